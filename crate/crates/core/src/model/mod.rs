// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with full observability.
//!
//! The architecture is pre-norm and RMS-normalized with rotary positions and
//! a gated (SiLU) MLP:
//!
//! ```text
//! h_mid  = h + Attn(rms_norm(h))
//! h_next = h_mid + MLP(rms_norm(h_mid))
//! logits = W_U · rms_norm(h_last)
//! ```
//!
//! Every vector the analyses need is captured in a [`RunTrace`]; residual
//! patches and ablations are injected through [`Hooks`].

pub(crate) mod forward;
pub mod manifest;
mod tokenizer;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LensError, Result};
use crate::numerics::{argmax, svd, Matrix, SvdFactorization, Vector};

pub use forward::{forward, forward_hooked, AblationPlan, AblationScope, Hooks, RunTrace};
pub use manifest::{load_model, save_model, Dtype};
pub use tokenizer::Tokenizer;

pub type TokenId = u32;

fn default_rope_theta() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_epsilon: f64,
    /// Rotary base; pairs `(j, j + d_head/2)` rotate at `theta^(-2j/d_head)`.
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(LensError::Domain(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(LensError::Domain(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(LensError::Domain("rotary embedding needs an even d_head".into()));
        }
        if !(self.norm_epsilon >= 0.0 && self.rope_theta > 0.0) {
            return Err(LensError::Domain("bad norm_epsilon or rope_theta".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vector,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_model × d_model`; columns `h·d_head..(h+1)·d_head` belong to head `h`.
    pub wo: Matrix,
    pub wo_bias: Option<Vector>,
    pub mlp_norm: Vector,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vector,
    pub unembedding: Matrix,
}

/// Addressable weight tensors. Names double as manifest tensor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightName {
    TokenEmbedding,
    Unembedding,
    FinalNorm,
    AttnNorm(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    Output(usize),
    OutputBias(usize),
    MlpNorm(usize),
    Gate(usize),
    Up(usize),
    Down(usize),
}

impl WeightName {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "token_embedding" => return Some(Self::TokenEmbedding),
            "unembedding" => return Some(Self::Unembedding),
            "final_norm" => return Some(Self::FinalNorm),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, site) = rest.split_once('.')?;
        let l: usize = idx.parse().ok()?;
        Some(match site {
            "attn_norm" => Self::AttnNorm(l),
            "attn.wq" => Self::Query(l),
            "attn.wk" => Self::Key(l),
            "attn.wv" => Self::Value(l),
            "attn.wo" => Self::Output(l),
            "attn.wo_bias" => Self::OutputBias(l),
            "mlp_norm" => Self::MlpNorm(l),
            "mlp.w_gate" => Self::Gate(l),
            "mlp.w_up" => Self::Up(l),
            "mlp.w_down" => Self::Down(l),
            _ => return None,
        })
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            Self::TokenEmbedding | Self::Unembedding | Self::FinalNorm => None,
            Self::AttnNorm(l)
            | Self::Query(l)
            | Self::Key(l)
            | Self::Value(l)
            | Self::Output(l)
            | Self::OutputBias(l)
            | Self::MlpNorm(l)
            | Self::Gate(l)
            | Self::Up(l)
            | Self::Down(l) => Some(l),
        }
    }

    /// All tensor names a model with this config carries.
    pub fn all(config: &ModelConfig, with_bias: bool) -> Vec<WeightName> {
        let mut names = vec![Self::TokenEmbedding];
        for l in 0..config.n_layers {
            names.extend([Self::AttnNorm(l), Self::Query(l), Self::Key(l), Self::Value(l), Self::Output(l)]);
            if with_bias {
                names.push(Self::OutputBias(l));
            }
            names.extend([Self::MlpNorm(l), Self::Gate(l), Self::Up(l), Self::Down(l)]);
        }
        names.extend([Self::FinalNorm, Self::Unembedding]);
        names
    }

    /// Expected `(rows, cols)`; vectors report `(len, 1)`.
    pub fn shape(self, c: &ModelConfig) -> (usize, usize) {
        match self {
            Self::TokenEmbedding | Self::Unembedding => (c.vocab_size, c.d_model),
            Self::FinalNorm | Self::AttnNorm(_) | Self::MlpNorm(_) | Self::OutputBias(_) => (c.d_model, 1),
            Self::Query(_) | Self::Key(_) | Self::Value(_) | Self::Output(_) => (c.d_model, c.d_model),
            Self::Gate(_) | Self::Up(_) => (c.d_mlp, c.d_model),
            Self::Down(_) => (c.d_model, c.d_mlp),
        }
    }

    pub fn is_vector(self) -> bool {
        matches!(self, Self::FinalNorm | Self::AttnNorm(_) | Self::MlpNorm(_) | Self::OutputBias(_))
    }
}

impl std::fmt::Display for WeightName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TokenEmbedding => write!(f, "token_embedding"),
            Self::Unembedding => write!(f, "unembedding"),
            Self::FinalNorm => write!(f, "final_norm"),
            Self::AttnNorm(l) => write!(f, "layers.{l}.attn_norm"),
            Self::Query(l) => write!(f, "layers.{l}.attn.wq"),
            Self::Key(l) => write!(f, "layers.{l}.attn.wk"),
            Self::Value(l) => write!(f, "layers.{l}.attn.wv"),
            Self::Output(l) => write!(f, "layers.{l}.attn.wo"),
            Self::OutputBias(l) => write!(f, "layers.{l}.attn.wo_bias"),
            Self::MlpNorm(l) => write!(f, "layers.{l}.mlp_norm"),
            Self::Gate(l) => write!(f, "layers.{l}.mlp.w_gate"),
            Self::Up(l) => write!(f, "layers.{l}.mlp.w_up"),
            Self::Down(l) => write!(f, "layers.{l}.mlp.w_down"),
        }
    }
}

/// Rank-one update `target ← target + u vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDelta {
    pub target: String,
    pub u: Vector,
    pub v: Vector,
}

impl WeightDelta {
    pub fn negated(&self) -> Self {
        Self { target: self.target.clone(), u: self.u.scaled(-1.0), v: self.v.clone() }
    }
}

/// A loaded model. Immutable once built; the per-head SVD cache fills lazily
/// and is safe to share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    tokenizer: Option<Arc<Tokenizer>>,
    svd_cache: Vec<OnceLock<Arc<SvdFactorization>>>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights, tokenizer: Option<Tokenizer>) -> Result<Self> {
        config.validate()?;
        validate_weights(&config, &weights)?;
        if let Some(t) = &tokenizer {
            if t.vocab_len() > config.vocab_size {
                return Err(LensError::Domain(format!(
                    "tokenizer uses ids up to {} but vocab_size is {}",
                    t.vocab_len(),
                    config.vocab_size
                )));
            }
        }
        let cache = (0..config.n_layers * config.n_heads).map(|_| OnceLock::new()).collect();
        Ok(Self { config, weights, tokenizer: tokenizer.map(Arc::new), svd_cache: cache })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn tokenizer(&self) -> Option<&Tokenizer> {
        self.tokenizer.as_deref()
    }

    pub fn require_tokenizer(&self) -> Result<&Tokenizer> {
        self.tokenizer().ok_or_else(|| LensError::Domain("model has no tokenizer".into()))
    }

    pub fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(LensError::Index(format!(
                "head ({layer}, {head}) outside {}x{} grid",
                self.config.n_layers, self.config.n_heads
            )));
        }
        Ok(())
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(LensError::Index(format!("token {token} >= vocab_size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// `W_O^{(l,h)}`: the `d_model × d_head` column slice of layer `l`'s output matrix.
    pub fn head_output_matrix(&self, layer: usize, head: usize) -> Result<Matrix> {
        self.check_head(layer, head)?;
        let d = self.config.d_head;
        Ok(self.weights.layers[layer].wo.column_block(head * d, (head + 1) * d))
    }

    /// Cached SVD of `W_O^{(l,h)}`.
    pub fn head_svd(&self, layer: usize, head: usize) -> Result<Arc<SvdFactorization>> {
        self.check_head(layer, head)?;
        let slot = &self.svd_cache[layer * self.config.n_heads + head];
        if let Some(f) = slot.get() {
            return Ok(f.clone());
        }
        let f = Arc::new(svd(&self.head_output_matrix(layer, head)?)?);
        Ok(slot.get_or_init(|| f).clone())
    }

    /// Seeds the SVD cache, e.g. from an on-disk cache. Ignored if already set.
    pub fn prime_head_svd(&self, layer: usize, head: usize, f: SvdFactorization) -> Result<()> {
        self.check_head(layer, head)?;
        let _ = self.svd_cache[layer * self.config.n_heads + head].set(Arc::new(f));
        Ok(())
    }

    pub fn matrix(&self, name: WeightName) -> Option<&Matrix> {
        let w = &self.weights;
        Some(match name {
            WeightName::TokenEmbedding => &w.token_embedding,
            WeightName::Unembedding => &w.unembedding,
            WeightName::Query(l) => &w.layers.get(l)?.wq,
            WeightName::Key(l) => &w.layers.get(l)?.wk,
            WeightName::Value(l) => &w.layers.get(l)?.wv,
            WeightName::Output(l) => &w.layers.get(l)?.wo,
            WeightName::Gate(l) => &w.layers.get(l)?.w_gate,
            WeightName::Up(l) => &w.layers.get(l)?.w_up,
            WeightName::Down(l) => &w.layers.get(l)?.w_down,
            _ => return None,
        })
    }

    pub fn vector(&self, name: WeightName) -> Option<&Vector> {
        let w = &self.weights;
        match name {
            WeightName::FinalNorm => Some(&w.final_norm),
            WeightName::AttnNorm(l) => w.layers.get(l).map(|x| &x.attn_norm),
            WeightName::MlpNorm(l) => w.layers.get(l).map(|x| &x.mlp_norm),
            WeightName::OutputBias(l) => w.layers.get(l).and_then(|x| x.wo_bias.as_ref()),
            _ => None,
        }
    }

    fn matrix_mut(&mut self, name: WeightName) -> Option<&mut Matrix> {
        let w = &mut self.weights;
        Some(match name {
            WeightName::TokenEmbedding => &mut w.token_embedding,
            WeightName::Unembedding => &mut w.unembedding,
            WeightName::Query(l) => &mut w.layers.get_mut(l)?.wq,
            WeightName::Key(l) => &mut w.layers.get_mut(l)?.wk,
            WeightName::Value(l) => &mut w.layers.get_mut(l)?.wv,
            WeightName::Output(l) => &mut w.layers.get_mut(l)?.wo,
            WeightName::Gate(l) => &mut w.layers.get_mut(l)?.w_gate,
            WeightName::Up(l) => &mut w.layers.get_mut(l)?.w_up,
            WeightName::Down(l) => &mut w.layers.get_mut(l)?.w_down,
            _ => return None,
        })
    }

    /// Returns a new model with `target ← target + u vᵀ`; `self` is untouched
    /// and the copy starts with an empty SVD cache.
    pub fn apply_weight_delta(&self, delta: &WeightDelta) -> Result<Model> {
        let name = WeightName::parse(&delta.target).ok_or_else(|| LensError::UnknownWeight(delta.target.clone()))?;
        let mut edited = Model::new(self.config.clone(), self.weights.clone(), None)?;
        edited.tokenizer = self.tokenizer.clone();
        let m = edited.matrix_mut(name).ok_or_else(|| LensError::UnknownWeight(delta.target.clone()))?;
        m.add_outer(1.0, &delta.u, &delta.v)?;
        if !m.is_finite() {
            return Err(LensError::Domain(format!("delta made `{}` non-finite", delta.target)));
        }
        Ok(edited)
    }

    /// SHA-256 over the config and every weight bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let has_bias = self.weights.layers.iter().any(|l| l.wo_bias.is_some());
        for name in WeightName::all(&self.config, has_bias) {
            hasher.update(name.to_string().as_bytes());
            let values: &[f64] = match (self.matrix(name), self.vector(name)) {
                (Some(m), _) => m.data(),
                (None, Some(v)) => v,
                (None, None) => &[],
            };
            for x in values {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Full trace at the last position.
    pub fn run(&self, tokens: &[TokenId]) -> Result<RunTrace> {
        forward(self, tokens, tokens.len().saturating_sub(1))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(self.require_tokenizer()?.tokenize(text))
    }
}

fn validate_weights(config: &ModelConfig, w: &Weights) -> Result<()> {
    fn check_m(name: WeightName, m: &Matrix, c: &ModelConfig) -> Result<()> {
        let want = name.shape(c);
        if m.shape() != want {
            return Err(LensError::Load {
                tensor: name.to_string(),
                reason: format!("shape {:?}, expected {:?}", m.shape(), want),
            });
        }
        if !m.is_finite() {
            return Err(LensError::Load { tensor: name.to_string(), reason: "non-finite entries".into() });
        }
        Ok(())
    }
    fn check_v(name: WeightName, v: &[f64], c: &ModelConfig) -> Result<()> {
        if v.len() != name.shape(c).0 || v.iter().any(|x| !x.is_finite()) {
            return Err(LensError::Load {
                tensor: name.to_string(),
                reason: format!("length {} or non-finite entries", v.len()),
            });
        }
        Ok(())
    }
    if w.layers.len() != config.n_layers {
        return Err(LensError::Domain(format!(
            "{} layers of weights for n_layers {}",
            w.layers.len(),
            config.n_layers
        )));
    }
    check_m(WeightName::TokenEmbedding, &w.token_embedding, config)?;
    check_m(WeightName::Unembedding, &w.unembedding, config)?;
    check_v(WeightName::FinalNorm, &w.final_norm, config)?;
    for (l, lw) in w.layers.iter().enumerate() {
        check_v(WeightName::AttnNorm(l), &lw.attn_norm, config)?;
        check_m(WeightName::Query(l), &lw.wq, config)?;
        check_m(WeightName::Key(l), &lw.wk, config)?;
        check_m(WeightName::Value(l), &lw.wv, config)?;
        check_m(WeightName::Output(l), &lw.wo, config)?;
        if let Some(b) = &lw.wo_bias {
            check_v(WeightName::OutputBias(l), b, config)?;
        }
        check_v(WeightName::MlpNorm(l), &lw.mlp_norm, config)?;
        check_m(WeightName::Gate(l), &lw.w_gate, config)?;
        check_m(WeightName::Up(l), &lw.w_up, config)?;
        check_m(WeightName::Down(l), &lw.w_down, config)?;
    }
    Ok(())
}

/// Appends `max_new` argmax tokens (ties to the lowest id).
pub fn greedy_decode(model: &Model, tokens: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    if max_new == 0 {
        return Err(LensError::Domain("max_new must be at least 1".into()));
    }
    if tokens.len() + max_new > model.config().max_seq {
        return Err(LensError::Capacity(format!(
            "{} prompt tokens + {max_new} new exceed max_seq {}",
            tokens.len(),
            model.config().max_seq
        )));
    }
    let mut seq = tokens.to_vec();
    for _ in 0..max_new {
        let trace = model.run(&seq)?;
        let next = argmax(&trace.logits).expect("vocab_size >= 1");
        seq.push(next as TokenId);
    }
    Ok(seq)
}

/// Text-level view of a model used by the evaluation and dataset pipelines.
///
/// Answer probabilities follow the first-token convention: an answer string
/// is scored by the probability of the first token of `" " + answer`.
pub trait LanguageModel: Sync {
    /// Greedy continuation of `prompt` (new text only).
    fn greedy_continuation(&self, prompt: &str, max_new: usize) -> Result<String>;
    /// First token of an answer as it would follow a prompt.
    fn answer_token(&self, answer: &str) -> Result<TokenId>;
    /// Next-token distribution after `prompt`.
    fn next_token_distribution(&self, prompt: &str) -> Result<Vector>;
}

/// First-token convention shared by every answer-probability measurement.
pub fn answer_first_token(tokenizer: &Tokenizer, answer: &str) -> Result<TokenId> {
    let trimmed = answer.trim();
    if trimmed.is_empty() {
        return Err(LensError::Domain("empty answer".into()));
    }
    Ok(tokenizer.tokenize(&format!(" {trimmed}"))[0])
}

impl LanguageModel for Model {
    fn greedy_continuation(&self, prompt: &str, max_new: usize) -> Result<String> {
        let tok = self.require_tokenizer()?;
        let ids = tok.tokenize(prompt);
        if ids.is_empty() {
            return Err(LensError::Domain("empty prompt".into()));
        }
        let room = self.config.max_seq.saturating_sub(ids.len());
        if room == 0 {
            return Err(LensError::Capacity(format!(
                "prompt of {} tokens fills max_seq {}",
                ids.len(),
                self.config.max_seq
            )));
        }
        let out = greedy_decode(self, &ids, max_new.min(room))?;
        tok.detokenize(&out[ids.len()..])
    }

    fn answer_token(&self, answer: &str) -> Result<TokenId> {
        answer_first_token(self.require_tokenizer()?, answer)
    }

    fn next_token_distribution(&self, prompt: &str) -> Result<Vector> {
        let ids = self.tokenize(prompt)?;
        Ok(self.run(&ids)?.next_token_distribution)
    }
}
