// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy longest-match tokenizer with byte fallback.
//!
//! On disk the vocabulary is a JSON object `{"vocab": {piece: id}}`. Regular
//! pieces are written with printable ASCII kept literal and every other byte
//! (plus `\` and `<`) escaped as `\xNN`. The 256 fallback entries use the
//! reserved spelling `<0xNN>`, which can never collide with an escaped piece.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{LensError, Result};

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pieces: HashMap<Vec<u8>, TokenId>,
    byte_ids: Vec<TokenId>,
    id_to_bytes: Vec<Option<Vec<u8>>>,
    max_piece_len: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    /// Byte fallbacks take ids `0..256`; `pieces` follow in order.
    /// Duplicate or empty pieces are skipped.
    pub fn from_pieces<S: AsRef<[u8]>>(pieces: &[S]) -> Self {
        let mut id_to_bytes: Vec<Option<Vec<u8>>> = (0..=255u8).map(|b| Some(vec![b])).collect();
        let byte_ids: Vec<TokenId> = (0..256).collect();
        let mut map = HashMap::new();
        for p in pieces {
            let p = p.as_ref();
            if p.is_empty() || map.contains_key(p) {
                continue;
            }
            map.insert(p.to_vec(), id_to_bytes.len() as TokenId);
            id_to_bytes.push(Some(p.to_vec()));
        }
        let max_piece_len = map.keys().map(Vec::len).max().unwrap_or(1).max(1);
        Self { pieces: map, byte_ids, id_to_bytes, max_piece_len }
    }

    /// Largest id in use plus one.
    pub fn vocab_len(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn piece_id(&self, piece: &str) -> Option<TokenId> {
        self.pieces.get(piece.as_bytes()).copied()
    }

    pub fn byte_id(&self, byte: u8) -> TokenId {
        self.byte_ids[byte as usize]
    }

    /// Tokens with the byte span each one covers.
    pub fn encode_with_offsets(&self, bytes: &[u8]) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - pos);
            let hit = (1..=longest).rev().find_map(|len| self.pieces.get(&bytes[pos..pos + len]).map(|&id| (id, len)));
            let (id, len) = hit.unwrap_or((self.byte_ids[bytes[pos] as usize], 1));
            out.push((id, pos..pos + len));
            pos += len;
        }
        out
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        self.encode_with_offsets(bytes).into_iter().map(|(id, _)| id).collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .id_to_bytes
                .get(id as usize)
                .and_then(Option::as_ref)
                .ok_or_else(|| LensError::Index(format!("token id {id} has no vocabulary entry")))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 sequences.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(s)?;
        let mut pieces = HashMap::new();
        let mut byte_ids = vec![TokenId::MAX; 256];
        let mut id_to_bytes: Vec<Option<Vec<u8>>> = Vec::new();
        for (key, &id) in &file.vocab {
            let bytes = if let Some(b) = parse_fallback(key) {
                if byte_ids[b as usize] != TokenId::MAX {
                    return Err(LensError::Domain(format!("duplicate byte fallback {key}")));
                }
                byte_ids[b as usize] = id;
                vec![b]
            } else {
                let bytes = unescape(key)?;
                pieces.insert(bytes.clone(), id);
                bytes
            };
            let slot = id as usize;
            if id_to_bytes.len() <= slot {
                id_to_bytes.resize(slot + 1, None);
            }
            if id_to_bytes[slot].is_some() {
                return Err(LensError::Domain(format!("token id {id} assigned twice")));
            }
            id_to_bytes[slot] = Some(bytes);
        }
        if let Some(b) = byte_ids.iter().position(|&id| id == TokenId::MAX) {
            return Err(LensError::Domain(format!("tokenizer lacks byte fallback <0x{b:02X}>")));
        }
        let max_piece_len = pieces.keys().map(Vec::len).max().unwrap_or(1).max(1);
        Ok(Self { pieces, byte_ids, id_to_bytes, max_piece_len })
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut vocab = BTreeMap::new();
        for (b, &id) in self.byte_ids.iter().enumerate() {
            vocab.insert(format!("<0x{b:02X}>"), id);
        }
        for (piece, &id) in &self.pieces {
            vocab.insert(escape(piece), id);
        }
        Ok(serde_json::to_string_pretty(&TokenizerFile { vocab })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

fn parse_fallback(key: &str) -> Option<u8> {
    let hex = key.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if (0x20..0x7f).contains(&b) && b != b'\\' && b != b'<' {
            s.push(b as char);
        } else {
            s.push_str(&format!("\\x{b:02x}"));
        }
    }
    s
}

fn unescape(s: &str) -> Result<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| raw.get(i + 1) == Some(&b'x'))
                .ok_or_else(|| LensError::Domain(format!("bad escape in token `{s}`")))?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| LensError::Domain(format!("bad escape in token `{s}`")))?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_pieces(&["The", " President", " of", " the", " United", " States", " is", " Pres"])
    }

    #[test]
    fn empty_text() {
        assert!(tok().tokenize("").is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let t = tok();
        let ids = t.tokenize("The President of the United States is");
        assert_eq!(ids.len(), 7);
        assert_eq!(ids[1], t.piece_id(" President").unwrap());
        assert_eq!(t.detokenize(&ids).unwrap(), "The President of the United States is");
    }

    #[test]
    fn offsets_cover_input() {
        let t = tok();
        let spans = t.encode_with_offsets("The Presx".as_bytes());
        assert_eq!(spans.last().unwrap().1.end, 9);
        assert_eq!(spans[1].1, 3..8);
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::from_pieces(&["a<b", "\\", " x\n"]);
        let back = Tokenizer::from_json_str(&t.to_json_string().unwrap()).unwrap();
        let s = "a<b\\ x\nzz";
        assert_eq!(back.tokenize(s), t.tokenize(s));
    }

    #[test]
    fn missing_fallback_rejected() {
        assert!(Tokenizer::from_json_str(r#"{"vocab": {"a": 0}}"#).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let t = tok();
            prop_assert_eq!(t.decode(&t.encode(&bytes)).unwrap(), bytes);
        }
    }
}
