// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary-space projections of internal vectors.
//!
//! `P_LL(t | x) = softmax(W_U x)`. The final norm is off unless a caller asks
//! for it explicitly; switching it on at the last residual of the last
//! position reproduces the model's own next-token distribution.

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::model::{forward, Model, RunTrace, TokenId};
use crate::numerics::{rms_norm, softmax, Vector};
use crate::par;

/// Which internal vector a distribution was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "site")]
pub enum Site {
    Residual,
    MlpIn,
    MlpOut,
    AttnOutIn,
    AttnOutOut,
    Head {
        head: usize,
    },
    /// Not tied to a recorded tap (e.g. a combination of singular vectors).
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub layer: Option<usize>,
    pub position: Option<usize>,
    #[serde(flatten)]
    pub site: Site,
}

impl Tap {
    pub const FREE: Tap = Tap { layer: None, position: None, site: Site::Free };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub probabilities: Vector,
    pub source: Tap,
    /// Whether the final norm ran before unembedding.
    pub normed: bool,
}

impl LatentDistribution {
    pub fn prob(&self, token: TokenId) -> Result<f64> {
        self.probabilities
            .get(token as usize)
            .copied()
            .ok_or_else(|| LensError::Index(format!("token {token} outside vocabulary")))
    }

    pub fn rank(&self, token: TokenId) -> Result<usize> {
        self.prob(token)?;
        Ok(rank_of(&self.probabilities, token as usize))
    }

    /// The `k` most probable tokens, ties to lower ids.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        let mut ids: Vec<usize> = (0..self.probabilities.dim()).collect();
        ids.sort_by(|&a, &b| self.probabilities[b].total_cmp(&self.probabilities[a]).then(a.cmp(&b)));
        ids.truncate(k);
        ids.into_iter().map(|i| i as TokenId).collect()
    }
}

/// 1-based rank: strictly more probable tokens, plus equally probable
/// tokens with a lower id, plus one.
pub fn rank_of(probs: &[f64], token: usize) -> usize {
    let p = probs[token];
    1 + probs.iter().enumerate().filter(|&(i, &q)| q > p || (q == p && i < token)).count()
}

pub fn logit_lens(model: &Model, x: &[f64], apply_final_norm: bool) -> Result<LatentDistribution> {
    logit_lens_at(model, x, apply_final_norm, Tap::FREE)
}

pub fn logit_lens_at(model: &Model, x: &[f64], apply_final_norm: bool, source: Tap) -> Result<LatentDistribution> {
    let c = model.config();
    if x.len() != c.d_model {
        return Err(LensError::Shape { op: "logit_lens", left: (x.len(), 1), right: (c.d_model, 1) });
    }
    let w = model.weights();
    let logits = if apply_final_norm {
        w.unembedding.matvec(&rms_norm(x, &w.final_norm, c.norm_epsilon)?)?
    } else {
        w.unembedding.matvec(x)?
    };
    Ok(LatentDistribution { probabilities: softmax(&logits)?, source, normed: apply_final_norm })
}

/// `P_LL(token | x)` without the final norm.
pub fn latent_prob(model: &Model, x: &[f64], token: TokenId) -> Result<f64> {
    model.check_token(token)?;
    logit_lens(model, x, false)?.prob(token)
}

pub fn latent_rank(model: &Model, x: &[f64], token: TokenId) -> Result<usize> {
    model.check_token(token)?;
    logit_lens(model, x, false)?.rank(token)
}

/// `−ln P_LL(o* | h)`, usually at the last subject position.
pub fn inhibition_score(model: &Model, h_subject: &[f64], new_token: TokenId) -> Result<f64> {
    Ok(-latent_prob(model, h_subject, new_token)?.ln())
}

/// Latent original-answer probability of one head: `P_LL(o | W_O^{(l,h)} x^{(l,h)})`.
pub fn loph(model: &Model, trace: &RunTrace, layer: usize, head: usize, original: TokenId) -> Result<f64> {
    model.check_head(layer, head)?;
    latent_prob(model, trace.per_head_output(layer, head)?, original)
}

/// LOPH for every head, `[layer][head]`.
pub fn loph_grid(model: &Model, trace: &RunTrace, original: TokenId) -> Result<Vec<Vec<f64>>> {
    let c = model.config();
    (0..c.n_layers).map(|l| (0..c.n_heads).map(|h| loph(model, trace, l, h, original)).collect()).collect()
}

/// A tokenized prompt with its answer tokens (first-token convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCase {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub original: TokenId,
    #[serde(default)]
    pub new: Option<TokenId>,
}

impl ProbeCase {
    /// Tokenizes `prompt` and resolves both answers to their first tokens.
    pub fn from_text(
        model: &Model,
        id: impl Into<String>,
        prompt: &str,
        original: &str,
        new: Option<&str>,
    ) -> Result<Self> {
        let tok = model.require_tokenizer()?;
        Ok(Self {
            id: id.into(),
            tokens: tok.tokenize(prompt),
            original: crate::model::answer_first_token(tok, original)?,
            new: new.map(|n| crate::model::answer_first_token(tok, n)).transpose()?,
        })
    }
}

/// Mean LOPH per head over a set of cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScan {
    /// `grid[layer][head]`, each in `[0, 1]`.
    pub grid: Vec<Vec<f64>>,
    pub targets: Vec<TokenId>,
    pub case_ids: Vec<String>,
}

impl HeadScan {
    pub fn get(&self, layer: usize, head: usize) -> Option<f64> {
        self.grid.get(layer)?.get(head).copied()
    }

    /// `(layer, head, value)` in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.grid.iter().enumerate().flat_map(|(l, row)| row.iter().enumerate().map(move |(h, &v)| (l, h, v)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,loph\n");
        for (l, h, v) in self.cells() {
            s.push_str(&format!("{l},{h},{v:.12}\n"));
        }
        s
    }
}

/// Averages per-case LOPH grids taken at each case's last position.
pub fn head_scan(model: &Model, cases: &[ProbeCase]) -> Result<HeadScan> {
    if cases.is_empty() {
        return Err(LensError::Domain("head scan needs at least one case".into()));
    }
    let grids = par::try_map(cases, |case| {
        let trace = forward(model, &case.tokens, case.tokens.len().saturating_sub(1))?;
        loph_grid(model, &trace, case.original)
    })?;
    let c = model.config();
    let grid = (0..c.n_layers)
        .map(|l| {
            (0..c.n_heads)
                .map(|h| {
                    let values: Vec<f64> = grids.iter().map(|g| g[l][h]).collect();
                    par::order_free_mean(&values)
                })
                .collect()
        })
        .collect();
    Ok(HeadScan {
        grid,
        targets: cases.iter().map(|c| c.original).collect(),
        case_ids: cases.iter().map(|c| c.id.clone()).collect(),
    })
}
