// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions: residual patching, attention layer and head
//! zero-ablation, and ablation of individual singular-vector terms of a
//! head's output matrix.
//!
//! A head's output decomposes over the SVD of its output slice
//! `W_O^{(l,h)} = Σ σ_i u_i v_iᵀ` as `z = Σ λ_i u_i` with `λ_i = σ_i v_iᵀ x`.
//! Singular-vector ablation drops chosen terms from that sum.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::lens::{latent_prob, HeadScan, ProbeCase};
use crate::model::forward::PatchHook;
use crate::model::{forward, forward_hooked, AblationPlan, AblationScope, Hooks, Model, RunTrace, TokenId};
use crate::numerics::Vector;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl std::str::FromStr for HeadId {
    type Err = LensError;

    /// Accepts `L3H7` or `3,7`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LensError::Domain(format!("bad head id `{s}` (want L<l>H<h> or l,h)"));
        let (l, h) = if let Some(rest) = s.strip_prefix('L') {
            rest.split_once('H').ok_or_else(bad)?
        } else {
            s.split_once(',').ok_or_else(bad)?
        };
        Ok(Self { layer: l.trim().parse().map_err(|_| bad())?, head: h.trim().parse().map_err(|_| bad())? })
    }
}

/// `h_{t0}^{(l)} ← ĥ_{t1}^{(l)}`: copy a residual vector from a corrupted run
/// into the clean run before block `layer` executes.
#[derive(Debug, Clone, Copy)]
pub struct ResidualPatch<'a> {
    pub layer: usize,
    pub dest_position: usize,
    pub source_position: usize,
    pub source_trace: &'a RunTrace,
}

pub fn run_with_patch(model: &Model, clean_tokens: &[TokenId], patch: &ResidualPatch<'_>) -> Result<RunTrace> {
    if patch.layer >= model.config().n_layers {
        return Err(LensError::Index(format!("patch layer {} >= n_layers {}", patch.layer, model.config().n_layers)));
    }
    if patch.dest_position >= clean_tokens.len() {
        return Err(LensError::Index(format!(
            "destination position {} >= clean length {}",
            patch.dest_position,
            clean_tokens.len()
        )));
    }
    let value = patch.source_trace.resid_at(patch.layer, patch.source_position)?;
    forward_hooked(
        model,
        clean_tokens,
        clean_tokens.len() - 1,
        Hooks { patch: Some(PatchHook { layer: patch.layer, position: patch.dest_position, value }), ablation: None },
    )
}

/// Index of the token holding the last byte of the final occurrence of
/// `subject` in `prompt`.
pub fn last_subject_position(model: &Model, prompt: &str, subject: &str) -> Result<usize> {
    let subject = subject.trim();
    if subject.is_empty() {
        return Err(LensError::Domain("empty subject".into()));
    }
    let start = prompt
        .rfind(subject)
        .ok_or_else(|| LensError::Domain(format!("subject `{subject}` not found in `{prompt}`")))?;
    let last_byte = start + subject.len() - 1;
    model
        .require_tokenizer()?
        .encode_with_offsets(prompt.as_bytes())
        .iter()
        .position(|(_, span)| span.contains(&last_byte))
        .ok_or_else(|| LensError::Index(format!("no token covers byte {last_byte}")))
}

/// Final answer probabilities after patching at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPoint {
    pub layer: usize,
    pub p_original: f64,
    pub p_new: f64,
}

impl PatchPoint {
    /// Reversal of the residual stream: the original answer overtakes the new one.
    pub fn rrs(&self) -> bool {
        is_reversal(self.p_original, self.p_new)
    }
}

pub fn is_reversal(p_original: f64, p_new: f64) -> bool {
    p_original > p_new
}

/// Patches every layer in turn, each from an independent clean run.
pub fn patch_sweep(
    model: &Model,
    clean_tokens: &[TokenId],
    corrupted: &RunTrace,
    dest_position: usize,
    source_position: usize,
    original: TokenId,
    new: TokenId,
) -> Result<Vec<PatchPoint>> {
    model.check_token(original)?;
    model.check_token(new)?;
    par::try_map_range(model.config().n_layers, |layer| {
        let trace = run_with_patch(
            model,
            clean_tokens,
            &ResidualPatch { layer, dest_position, source_position, source_trace: corrupted },
        )?;
        Ok(PatchPoint {
            layer,
            p_original: trace.next_token_distribution[original as usize],
            p_new: trace.next_token_distribution[new as usize],
        })
    })
}

/// Singular-vector terms to drop from one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorAblation {
    pub layer: usize,
    pub head: usize,
    pub indices: BTreeSet<usize>,
}

/// Declarative ablation set, serializable as JSON:
///
/// ```json
/// {
///   "zeroed_attention_layers": [3],
///   "zeroed_heads": [{"layer": 1, "head": 0}],
///   "zeroed_singular_vectors": [{"layer": 1, "head": 1, "indices": [0, 2]}],
///   "scope": "all_positions"
/// }
/// ```
///
/// A zeroed layer removes the whole attention contribution including the
/// output bias; a zeroed head removes only its own term.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub zeroed_attention_layers: BTreeSet<usize>,
    #[serde(default)]
    pub zeroed_heads: BTreeSet<HeadId>,
    #[serde(default)]
    pub zeroed_singular_vectors: Vec<VectorAblation>,
    #[serde(default)]
    pub scope: AblationScope,
}

impl AblationSpec {
    pub fn is_empty(&self) -> bool {
        self.zeroed_attention_layers.is_empty()
            && self.zeroed_heads.is_empty()
            && self.zeroed_singular_vectors.iter().all(|v| v.indices.is_empty())
    }

    pub fn zero_heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self { zeroed_heads: heads.into_iter().collect(), ..Self::default() }
    }

    /// Resolves indices against `model`, failing on anything out of range.
    pub fn resolve(&self, model: &Model) -> Result<AblationPlan> {
        let mut plan = AblationPlan::new(model, self.scope);
        for &l in &self.zeroed_attention_layers {
            plan.zero_layer(l)?;
        }
        for h in &self.zeroed_heads {
            plan.zero_head(model, h.layer, h.head)?;
        }
        for v in &self.zeroed_singular_vectors {
            let idx: Vec<usize> = v.indices.iter().copied().collect();
            plan.zero_vectors(model, v.layer, v.head, &idx)?;
        }
        Ok(plan)
    }
}

pub fn run_with_ablation(model: &Model, tokens: &[TokenId], spec: &AblationSpec) -> Result<RunTrace> {
    let plan = spec.resolve(model)?;
    run_with_plan(model, tokens, &plan)
}

pub(crate) fn run_with_plan(model: &Model, tokens: &[TokenId], plan: &AblationPlan) -> Result<RunTrace> {
    let last = tokens.len().saturating_sub(1);
    if plan.is_empty() {
        return forward(model, tokens, last);
    }
    forward_hooked(model, tokens, last, Hooks { patch: None, ablation: Some(plan) })
}

/// Heads whose scan value strictly exceeds `tau`, in (layer, head) order.
pub fn select_heads(scan: &HeadScan, tau: f64) -> Vec<HeadId> {
    scan.cells().filter(|&(_, _, v)| v > tau).map(|(l, h, _)| HeadId::new(l, h)).collect()
}

/// `(λ_i, u_i)` for the `rank` nonzero singular directions of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularExpansion {
    pub head: HeadId,
    pub lambdas: Vec<f64>,
    pub u_vectors: Vec<Vector>,
}

impl SingularExpansion {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (f64, &Vector)> {
        self.lambdas.iter().copied().zip(&self.u_vectors)
    }

    /// `Σ_{i ∉ skip} λ_i u_i`, accumulated in index order.
    fn sum_except(&self, skip: Option<usize>) -> Vector {
        let dim = self.u_vectors.first().map_or(0, |u| u.dim());
        let mut z = Vector::zeros(dim);
        for (i, (lambda, u)) in self.terms().enumerate() {
            if Some(i) != skip {
                z.axpy(lambda, u);
            }
        }
        z
    }
}

/// Expands the head's output at the trace position over its singular vectors.
pub fn singular_expansion(model: &Model, trace: &RunTrace, layer: usize, head: usize) -> Result<SingularExpansion> {
    let f = model.head_svd(layer, head)?;
    let x = trace.head_input_at(layer, head)?;
    let lambdas = (0..f.rank).map(|i| f.singular_values[i] * crate::numerics::dot(&f.v_vectors[i], x)).collect();
    Ok(SingularExpansion { head: HeadId::new(layer, head), lambdas, u_vectors: f.u_vectors[..f.rank].to_vec() })
}

/// `z(S) = Σ_{i ∈ S} λ_i u_i`.
pub fn combine_vectors(expansion: &SingularExpansion, indices: &[usize]) -> Result<Vector> {
    let dim = expansion.u_vectors.first().map_or(0, |u| u.dim());
    let mut z = Vector::zeros(dim);
    for &i in indices {
        let lambda = *expansion.lambdas.get(i).ok_or_else(|| {
            LensError::Index(format!("vector {i} of {} in expansion of {}", expansion.len(), expansion.head))
        })?;
        z.axpy(lambda, &expansion.u_vectors[i]);
    }
    Ok(z)
}

/// Top-P singular vectors of one head, ranked by how much dropping each
/// single term lowers `P_LL(o | z)`, averaged over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificantVectorReport {
    pub head: HeadId,
    pub p_percent: f64,
    /// Number of nonzero singular values of the head's output slice.
    pub rank: usize,
    /// Vector indices, best first; ties keep the lower index first.
    pub ranking: Vec<usize>,
    /// Score of each entry of `ranking`.
    pub scores: Vec<f64>,
    /// The first `ceil(p% · rank)` entries of `ranking`.
    pub selected: Vec<usize>,
}

/// `ceil(p% · r)`.
pub fn top_p_count(p_percent: f64, r: usize) -> usize {
    // guard against 0.1 * 30 style representation noise pushing past an integer
    let raw = p_percent * r as f64 / 100.0;
    let count = (raw - 1e-9).ceil().max(0.0) as usize;
    count.min(r)
}

/// Per-vector single-ablation scores for one case.
pub fn single_ablation_scores(expansion: &SingularExpansion, model: &Model, original: TokenId) -> Result<Vec<f64>> {
    let full = latent_prob(model, &expansion.sum_except(None), original)?;
    (0..expansion.len()).map(|i| Ok(full - latent_prob(model, &expansion.sum_except(Some(i)), original)?)).collect()
}

pub fn identify_significant_vectors(
    model: &Model,
    cases: &[ProbeCase],
    head: HeadId,
    p_percent: f64,
) -> Result<SignificantVectorReport> {
    if cases.is_empty() {
        return Err(LensError::Domain("vector identification needs at least one case".into()));
    }
    if !(p_percent > 0.0 && p_percent <= 100.0) {
        return Err(LensError::Domain(format!("p% must lie in (0, 100], got {p_percent}")));
    }
    model.check_head(head.layer, head.head)?;
    let per_case = par::try_map(cases, |case| {
        let trace = forward(model, &case.tokens, case.tokens.len().saturating_sub(1))?;
        let expansion = singular_expansion(model, &trace, head.layer, head.head)?;
        single_ablation_scores(&expansion, model, case.original)
    })?;
    let rank = model.head_svd(head.layer, head.head)?.rank;
    let mean_scores: Vec<f64> = (0..rank)
        .map(|i| {
            let values: Vec<f64> = per_case.iter().map(|s| s[i]).collect();
            par::order_free_mean(&values)
        })
        .collect();
    Ok(rank_report(head, p_percent, &mean_scores))
}

pub(crate) fn rank_report(head: HeadId, p_percent: f64, scores: &[f64]) -> SignificantVectorReport {
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let count = top_p_count(p_percent, scores.len());
    SignificantVectorReport {
        head,
        p_percent,
        rank: scores.len(),
        scores: ranking.iter().map(|&i| scores[i]).collect(),
        selected: ranking[..count].to_vec(),
        ranking,
    }
}

impl SignificantVectorReport {
    pub fn as_ablation(&self) -> VectorAblation {
        VectorAblation {
            layer: self.head.layer,
            head: self.head.head,
            indices: self.selected.iter().copied().collect(),
        }
    }
}
