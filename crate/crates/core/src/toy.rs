// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small deterministic models for tests, benches and demos.
//!
//! - [`random_model`]: seeded Gaussian weights of any shape.
//! - [`planted_circuit`]: a two-layer model whose layer-1 head 0 copies an
//!   answer direction from an earlier mention of the subject, plus a rank-one
//!   MLP edit that only holds when that head stays quiet.
//! - [`ScriptedModel`]: a text-level model driven by a prompt → answer table.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::interventions::HeadId;
use crate::metrics::{EditCase, NeighborPrompt};
use crate::model::{LanguageModel, LayerWeights, Model, ModelConfig, TokenId, Tokenizer, WeightDelta, Weights};
use crate::numerics::{softmax, Matrix, Vector};
use crate::probes::SummaryCorpus;

/// Shape of a random model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub with_bias: bool,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, d_head: 4, d_mlp: 16, vocab_size: 32, max_seq: 32, with_bias: false }
    }
}

impl ToyShape {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.n_heads * self.d_head,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            norm_epsilon: 1e-6,
            rope_theta: 10_000.0,
        }
    }

    /// Uniformly drawn shape with `L, H <= 4`, even `d_head` and `d_model <= 64`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let n_heads = rng.random_range(1..=4);
        let d_head = 2 * rng.random_range(1..=(32 / n_heads).min(8));
        Self {
            n_layers: rng.random_range(1..=4),
            n_heads,
            d_head,
            d_mlp: rng.random_range(1..=64),
            vocab_size: rng.random_range(8..=48),
            max_seq: 24,
            with_bias: rng.random_bool(0.5),
        }
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

pub fn gaussian_vector(rng: &mut impl Rng, len: usize, mean: f64, std: f64) -> Vector {
    let dist = Normal::new(mean, std).expect("finite std");
    (0..len).map(|_| rng.sample(dist)).collect()
}

/// Weights `N(0, 1/sqrt(d_in))`, norm gains `N(1, 0.1)`, no tokenizer.
pub fn random_model(seed: u64, shape: &ToyShape) -> Result<Model> {
    let c = shape.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = c.d_model;
    let s_model = 1.0 / (d as f64).sqrt();
    let s_mlp = 1.0 / (c.d_mlp as f64).sqrt();
    let token_embedding = gaussian_matrix(&mut rng, c.vocab_size, d, 1.0);
    let layers = (0..c.n_layers)
        .map(|_| LayerWeights {
            attn_norm: gaussian_vector(&mut rng, d, 1.0, 0.1),
            wq: gaussian_matrix(&mut rng, d, d, s_model),
            wk: gaussian_matrix(&mut rng, d, d, s_model),
            wv: gaussian_matrix(&mut rng, d, d, s_model),
            wo: gaussian_matrix(&mut rng, d, d, s_model),
            wo_bias: shape.with_bias.then(|| gaussian_vector(&mut rng, d, 0.0, 0.1)),
            mlp_norm: gaussian_vector(&mut rng, d, 1.0, 0.1),
            w_gate: gaussian_matrix(&mut rng, c.d_mlp, d, s_model),
            w_up: gaussian_matrix(&mut rng, c.d_mlp, d, s_model),
            w_down: gaussian_matrix(&mut rng, d, c.d_mlp, s_mlp),
        })
        .collect();
    let weights = Weights {
        token_embedding,
        layers,
        final_norm: gaussian_vector(&mut rng, d, 1.0, 0.1),
        unembedding: gaussian_matrix(&mut rng, c.vocab_size, d, s_model),
    };
    Model::new(c, weights, None)
}

/// Seeded random token sequence of length `len` over `0..vocab`.
pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..vocab) as TokenId).collect()
}

// Residual directions of the planted model.
const IS: usize = 0;
const OF: usize = 1;
const J: usize = 2;
const B: usize = 3;
const D: usize = 4;
const T: usize = 5;
const C: usize = 6;
const E: usize = 7;
const NOISE: std::ops::Range<usize> = 8..16;

const PLANTED_D_MODEL: usize = 16;
const PLANTED_D_HEAD: usize = 8;
const PLANTED_D_MLP: usize = 8;
/// Head dimension carrying the planted query/key match. It pairs with
/// dimension 7 at the slowest rotary frequency.
const MATCH_DIM: usize = 3;

/// Word pieces of the planted tokenizer (ids follow the 256 byte fallbacks).
pub const PLANTED_PIECES: &[&str] = &[
    "The",
    " The",
    "Is",
    "He",
    "Joe",
    " Joe",
    " Biden",
    " Donald",
    " Trump",
    " President",
    " president",
    " of",
    " the",
    " United",
    " States",
    " is",
    " was",
    " an",
    " American",
    " politician",
    " who",
    " served",
    " as",
    " born",
    " in",
    " Scranton",
    " studied",
    " law",
    " current",
    " capital",
    " Washington",
    ".",
    "?",
    ",",
];

/// Tunable constants of [`planted_circuit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    /// Query weight on the ` is` feature.
    pub beta: f64,
    /// Norm of the planted head's answer-writing `W_O` column.
    pub gamma: f64,
    /// Size of the answer-continuation features in the embeddings.
    pub feature: f64,
    /// Unembedding scale of the answer tokens.
    pub unembed: f64,
    /// Gate and up weight of the fact neuron.
    pub neuron: f64,
    /// Down-projection scale of the fact neuron (base and edited).
    pub write: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self { beta: 5.0, gamma: 5.0, feature: 3.0, unembed: 2.0, neuron: 1.0, write: 1.0, noise: 0.05, seed: 7 }
    }
}

/// Everything needed for an end-to-end run on the planted model.
#[derive(Debug, Clone)]
pub struct PlantedCircuit {
    pub base: Model,
    pub edited: Model,
    pub delta: WeightDelta,
    pub head: HeadId,
    /// Index of the answer-writing singular vector of the planted head.
    pub planted_vector: usize,
    pub case: EditCase,
    pub corpus: SummaryCorpus,
}

fn unit(i: usize) -> Vector {
    let mut v = Vector::zeros(PLANTED_D_MODEL);
    v[i] = 1.0;
    v
}

/// Builds the planted base model, the edit delta and a matching case.
pub fn planted_circuit(p: &PlantedParams) -> Result<PlantedCircuit> {
    let tokenizer = Tokenizer::from_pieces(PLANTED_PIECES);
    let vocab = tokenizer.vocab_len();
    let d = PLANTED_D_MODEL;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise).expect("finite noise");
    let id = |piece: &str| tokenizer.piece_id(piece).expect("planted piece") as usize;

    let mut emb = Matrix::zeros(vocab, d);
    for t in 0..vocab {
        emb.set(t, C, 1.0);
        for k in NOISE {
            emb.set(t, k, rng.sample(noise) * 2.0);
        }
    }
    emb.set(id(" is"), IS, 1.0);
    for joe in ["Joe", " Joe"] {
        emb.set(id(joe), OF, 1.0);
        emb.set(id(joe), B, p.feature);
    }
    emb.set(id(" Donald"), T, p.feature);
    emb.set(id(" Biden"), E, p.feature);
    emb.set(id(" Trump"), E, p.feature);

    let mut unemb = Matrix::zeros(vocab, d);
    for t in 0..vocab {
        for k in NOISE {
            unemb.set(t, k, rng.sample(noise) * 2.0);
        }
    }
    for (piece, dir) in [(" Joe", J), (" Biden", B), (" Donald", D), (" Trump", T), (".", E)] {
        let row = unemb.row_mut(id(piece));
        row.iter_mut().for_each(|x| *x = 0.0);
        row[dir] = p.unembed;
    }

    // Matrices that only read and write noise dimensions.
    let mut noisy = |rows: usize, cols: usize, row_ok: &dyn Fn(usize) -> bool, col_ok: &dyn Fn(usize) -> bool| {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if row_ok(r) && col_ok(c) {
                    m.set(r, c, rng.sample(noise));
                }
            }
        }
        m
    };
    let any = |_: usize| true;
    let noise_dim = |i: usize| NOISE.contains(&i);

    type Noisy<'a> = dyn FnMut(usize, usize, &dyn Fn(usize) -> bool, &dyn Fn(usize) -> bool) -> Matrix + 'a;
    let quiet_layer = |noisy: &mut Noisy| LayerWeights {
        attn_norm: Vector::from(vec![1.0; d]),
        wq: noisy(d, d, &any, &noise_dim),
        wk: noisy(d, d, &any, &noise_dim),
        wv: noisy(d, d, &any, &noise_dim),
        wo: noisy(d, d, &noise_dim, &any),
        wo_bias: None,
        mlp_norm: Vector::from(vec![1.0; d]),
        w_gate: noisy(PLANTED_D_MLP, d, &any, &noise_dim),
        w_up: noisy(PLANTED_D_MLP, d, &any, &noise_dim),
        w_down: noisy(d, PLANTED_D_MLP, &noise_dim, &any),
    };
    let layer0 = quiet_layer(&mut noisy);
    let mut layer1 = quiet_layer(&mut noisy);

    // Planted head (layer 1, head 0): rows 0..d_head of the projections.
    for r in 0..PLANTED_D_HEAD {
        for c in 0..d {
            layer1.wq.set(r, c, 0.0);
            layer1.wk.set(r, c, 0.0);
        }
    }
    for r in NOISE {
        layer1.wo.set(r, 0, 0.0);
    }
    layer1.wq.set(MATCH_DIM, IS, p.beta);
    layer1.wk.set(MATCH_DIM, OF, 1.0);
    layer1.wv.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
    layer1.wv.set(0, OF, 1.0);
    layer1.wo.set(J, 0, p.gamma);

    // Fact neuron 0 fires on ` is` and writes the answer direction.
    layer1.w_gate.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
    layer1.w_up.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
    layer1.w_gate.set(0, IS, p.neuron);
    layer1.w_up.set(0, IS, p.neuron);
    for r in 0..d {
        layer1.w_down.set(r, 0, 0.0);
    }
    layer1.w_down.set(J, 0, p.write);

    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: d,
        d_head: PLANTED_D_HEAD,
        d_mlp: PLANTED_D_MLP,
        vocab_size: vocab,
        max_seq: 64,
        norm_epsilon: 1e-6,
        rope_theta: 10_000.0,
    };
    let weights = Weights {
        token_embedding: emb,
        layers: vec![layer0, layer1],
        final_norm: Vector::from(vec![1.0; d]),
        unembedding: unemb,
    };
    let base = Model::new(config, weights, Some(tokenizer))?;

    let mut u = unit(D).scaled(p.write);
    u.axpy(-p.write, &unit(J));
    let mut v = Vector::zeros(PLANTED_D_MLP);
    v[0] = 1.0;
    let delta = WeightDelta { target: "layers.1.mlp.w_down".into(), u, v };
    let edited = base.apply_weight_delta(&delta)?;

    let mut corpus = SummaryCorpus::default();
    corpus.insert(
        "Joe Biden",
        "Joe Biden is an American politician. He served as the president of the United States. \
         He was born in Scranton. He studied law.",
    );
    let edit_prompt = "The President of the United States is".to_string();
    let case = EditCase {
        case_id: Some("planted-0".into()),
        subject: "the United States".into(),
        relation: "President".into(),
        original: "Joe Biden".into(),
        new: "Donald Trump".into(),
        queries: vec![edit_prompt.clone()],
        edit_prompt,
        paraphrases: vec!["The current President of the United States is".into()],
        neighborhood: vec![NeighborPrompt { prompt: "Joe Biden was born in".into(), expected: "Scranton".into() }],
        attack_prefixes: BTreeMap::new(),
    };
    Ok(PlantedCircuit { base, edited, delta, head: HeadId::new(1, 0), planted_vector: 0, case, corpus })
}

/// Text-level model answering from a prompt → continuation table.
///
/// Words are whitespace-separated. The next-token distribution after a prompt
/// puts logit `confidence` on the first word of its scripted continuation and
/// 0 on every other vocabulary word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedModel {
    pub vocab: Vec<String>,
    pub scripts: BTreeMap<String, String>,
    pub fallback: String,
    pub confidence: f64,
}

impl ScriptedModel {
    pub fn new(fallback: &str) -> Self {
        let mut m = Self { vocab: Vec::new(), scripts: BTreeMap::new(), fallback: String::new(), confidence: 4.0 };
        m.add_words(fallback);
        m.fallback = fallback.to_string();
        m
    }

    fn add_words(&mut self, text: &str) {
        for w in text.split_whitespace() {
            if !self.vocab.iter().any(|v| v == w) {
                self.vocab.push(w.to_string());
            }
        }
    }

    /// Scripts `prompt` (whitespace-normalized) to continue with `answer`.
    pub fn script(mut self, prompt: &str, answer: &str) -> Self {
        self.add_words(answer);
        self.scripts.insert(key(prompt), answer.to_string());
        self
    }

    fn answer_for(&self, prompt: &str) -> &str {
        self.scripts.get(&key(prompt)).unwrap_or(&self.fallback)
    }
}

fn key(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl LanguageModel for ScriptedModel {
    fn greedy_continuation(&self, prompt: &str, max_new: usize) -> Result<String> {
        if max_new == 0 {
            return Err(LensError::Domain("max_new must be at least 1".into()));
        }
        let words: Vec<&str> = self.answer_for(prompt).split_whitespace().take(max_new).collect();
        Ok(format!(" {}", words.join(" ")))
    }

    fn answer_token(&self, answer: &str) -> Result<TokenId> {
        let first = answer.split_whitespace().next().ok_or_else(|| LensError::Domain("empty answer".into()))?;
        self.vocab
            .iter()
            .position(|w| w == first)
            .map(|i| i as TokenId)
            .ok_or_else(|| LensError::Lookup(format!("`{first}` not in scripted vocabulary")))
    }

    fn next_token_distribution(&self, prompt: &str) -> Result<Vector> {
        let mut logits = vec![0.0; self.vocab.len().max(1)];
        if let Some(first) = self.answer_for(prompt).split_whitespace().next() {
            if let Some(i) = self.vocab.iter().position(|w| w == first) {
                logits[i] = self.confidence;
            }
        }
        softmax(&logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    #[test]
    fn random_model_is_seeded() {
        let s = ToyShape::default();
        let a = random_model(3, &s).unwrap();
        let b = random_model(3, &s).unwrap();
        let c = random_model(4, &s).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn sampled_shapes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = ToyShape::sample(&mut rng);
            s.config().validate().unwrap();
            assert!(s.n_heads * s.d_head <= 64 && s.n_layers <= 4 && s.n_heads <= 4);
        }
    }

    #[test]
    fn planted_answers() {
        let pc = planted_circuit(&PlantedParams::default()).unwrap();
        let e = &pc.case.edit_prompt;
        let base = pc.base.greedy_continuation(e, 2).unwrap();
        let edited = pc.edited.greedy_continuation(e, 2).unwrap();
        assert_eq!(base, " Joe Biden");
        assert_eq!(edited, " Donald Trump");
        let que = format!("Is Joe Biden the President of the United States? {e}");
        assert_eq!(pc.edited.greedy_continuation(&que, 2).unwrap(), " Joe Biden");
        let rep = format!("Joe Biden Joe Biden Joe Biden. {e}");
        assert_eq!(pc.edited.greedy_continuation(&rep, 2).unwrap(), " Joe Biden");
    }

    #[test]
    fn planted_head_svd_has_answer_direction_first() {
        let pc = planted_circuit(&PlantedParams::default()).unwrap();
        let svd = pc.edited.head_svd(1, 0).unwrap();
        assert_eq!(svd.rank, PLANTED_D_HEAD);
        assert!((svd.singular_values[0] - 5.0).abs() < 1e-12);
        assert!((svd.u_vectors[0][J] - 1.0).abs() < 1e-12);
        let tokens = pc.edited.tokenize(&pc.case.edit_prompt).unwrap();
        forward(&pc.edited, &tokens, tokens.len() - 1).unwrap();
    }

    #[test]
    fn scripted_model_follows_script() {
        let m = ScriptedModel::new("I don't know").script("Q  one", "Paris is nice");
        assert_eq!(m.greedy_continuation("Q one", 2).unwrap(), " Paris is");
        assert_eq!(m.greedy_continuation("other", 8).unwrap(), " I don't know");
        let dist = m.next_token_distribution("Q one").unwrap();
        let paris = m.answer_token("Paris").unwrap() as usize;
        assert_eq!(lensargmax(&dist), paris);
        assert!(m.answer_token("London").is_err());
    }

    fn lensargmax(v: &[f64]) -> usize {
        crate::numerics::argmax(v).unwrap()
    }
}
