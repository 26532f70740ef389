// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Model, TokenId};
use crate::error::{LensError, Result};
use crate::numerics::{dot, rms_norm, silu, softmax, SvdFactorization, Vector};

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub tokens: Vec<TokenId>,
    pub trace_position: usize,
    /// `resid[l][i]`: stream entering block `l` at position `i`;
    /// `resid[n_layers]` is the post-block stream.
    pub resid: Vec<Vec<Vector>>,
    /// Attention contribution `[layer][position]`, bias included.
    pub attn_contrib: Vec<Vec<Vector>>,
    /// MLP contribution `[layer][position]`.
    pub mlp_contrib: Vec<Vec<Vector>>,
    /// Post-norm vector entering the MLP, per layer, at the trace position.
    pub mlp_in: Vec<Vector>,
    pub mlp_out: Vec<Vector>,
    /// Concatenated head vectors entering `W_O`, per layer, at the trace position.
    pub attn_out_in: Vec<Vector>,
    /// Attention module output (after `W_O` and bias) at the trace position.
    pub attn_out_out: Vec<Vector>,
    /// `x^{(l,h)}` at the trace position.
    pub head_input: Vec<Vec<Vector>>,
    /// `W_O^{(l,h)} x^{(l,h)}` at the trace position, as actually added.
    pub head_output: Vec<Vec<Vector>>,
    /// Logits at the final position.
    pub logits: Vector,
    pub next_token_distribution: Vector,
}

impl RunTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.attn_contrib.len()
    }

    pub fn resid_at(&self, layer: usize, position: usize) -> Result<&Vector> {
        self.resid
            .get(layer)
            .and_then(|row| row.get(position))
            .ok_or_else(|| LensError::Index(format!("residual ({layer}, {position}) not recorded")))
    }

    /// The head's contribution `W_O^{(l,h)} x^{(l,h)}` at the trace position.
    pub fn per_head_output(&self, layer: usize, head: usize) -> Result<&Vector> {
        self.head_output
            .get(layer)
            .and_then(|row| row.get(head))
            .ok_or_else(|| LensError::Index(format!("head ({layer}, {head}) not recorded")))
    }

    pub fn head_input_at(&self, layer: usize, head: usize) -> Result<&Vector> {
        self.head_input
            .get(layer)
            .and_then(|row| row.get(head))
            .ok_or_else(|| LensError::Index(format!("head ({layer}, {head}) not recorded")))
    }

    /// Bit-level equality of every recorded value.
    pub fn bit_identical(&self, other: &RunTrace) -> bool {
        fn nested(a: &[Vec<Vector>], b: &[Vec<Vector>]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| flat(x, y))
        }
        fn flat(a: &[Vector], b: &[Vector]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits(x, y))
        }
        fn bits(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.tokens == other.tokens
            && self.trace_position == other.trace_position
            && nested(&self.resid, &other.resid)
            && nested(&self.attn_contrib, &other.attn_contrib)
            && nested(&self.mlp_contrib, &other.mlp_contrib)
            && flat(&self.mlp_in, &other.mlp_in)
            && flat(&self.mlp_out, &other.mlp_out)
            && flat(&self.attn_out_in, &other.attn_out_in)
            && flat(&self.attn_out_out, &other.attn_out_out)
            && nested(&self.head_input, &other.head_input)
            && nested(&self.head_output, &other.head_output)
            && bits(&self.logits, &other.logits)
            && bits(&self.next_token_distribution, &other.next_token_distribution)
    }
}

/// Where ablations take effect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationScope {
    #[default]
    AllPositions,
    TracePosition,
}

/// Ablations resolved against a concrete model.
#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub scope: AblationScope,
    n_heads: usize,
    zero_layers: Vec<bool>,
    zero_heads: Vec<bool>,
    vector_masks: Vec<Option<(Arc<SvdFactorization>, Vec<bool>)>>,
}

impl AblationPlan {
    pub fn new(model: &Model, scope: AblationScope) -> Self {
        let c = model.config();
        Self {
            scope,
            n_heads: c.n_heads,
            zero_layers: vec![false; c.n_layers],
            zero_heads: vec![false; c.n_layers * c.n_heads],
            vector_masks: vec![None; c.n_layers * c.n_heads],
        }
    }

    pub fn zero_layer(&mut self, layer: usize) -> Result<()> {
        let slot =
            self.zero_layers.get_mut(layer).ok_or_else(|| LensError::Index(format!("layer {layer} out of range")))?;
        *slot = true;
        Ok(())
    }

    pub fn zero_head(&mut self, model: &Model, layer: usize, head: usize) -> Result<()> {
        model.check_head(layer, head)?;
        self.zero_heads[layer * self.n_heads + head] = true;
        Ok(())
    }

    /// Drops the listed `λ_i u_i` terms from the head's output.
    pub fn zero_vectors(&mut self, model: &Model, layer: usize, head: usize, indices: &[usize]) -> Result<()> {
        let f = model.head_svd(layer, head)?;
        let slot = &mut self.vector_masks[layer * self.n_heads + head];
        let mask = match slot {
            Some((_, mask)) => mask,
            None => {
                let n = f.len();
                &mut slot.insert((f, vec![false; n])).1
            }
        };
        for &i in indices {
            let m = mask
                .get_mut(i)
                .ok_or_else(|| LensError::Index(format!("singular vector {i} of head ({layer}, {head})")))?;
            *m = true;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        !self.zero_layers.iter().any(|&z| z)
            && !self.zero_heads.iter().any(|&z| z)
            && self.vector_masks.iter().all(Option::is_none)
    }
}

/// Residual substitution applied before block `layer` runs.
#[derive(Debug, Clone, Copy)]
pub struct PatchHook<'a> {
    pub layer: usize,
    pub position: usize,
    pub value: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub patch: Option<PatchHook<'a>>,
    pub ablation: Option<&'a AblationPlan>,
}

pub fn forward(model: &Model, tokens: &[TokenId], trace_position: usize) -> Result<RunTrace> {
    forward_hooked(model, tokens, trace_position, Hooks::default())
}

pub fn forward_hooked(model: &Model, tokens: &[TokenId], trace_position: usize, hooks: Hooks<'_>) -> Result<RunTrace> {
    let c = model.config();
    let w = model.weights();
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(LensError::Domain("empty token sequence".into()));
    }
    if t_len > c.max_seq {
        return Err(LensError::Capacity(format!("{t_len} tokens exceed max_seq {}", c.max_seq)));
    }
    if trace_position >= t_len {
        return Err(LensError::Index(format!("trace position {trace_position} >= sequence length {t_len}")));
    }
    for &t in tokens {
        model.check_token(t)?;
    }
    if let Some(p) = hooks.patch {
        if p.layer >= c.n_layers || p.position >= t_len || p.value.len() != c.d_model {
            return Err(LensError::Index(format!(
                "patch at layer {} position {} (dim {}) does not fit",
                p.layer,
                p.position,
                p.value.len()
            )));
        }
    }

    let (n_heads, d_head) = (c.n_heads, c.d_head);
    let rope = RopeTable::new(t_len, d_head, c.rope_theta);
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut h: Vec<Vector> = tokens.iter().map(|&t| Vector::from(w.token_embedding.row(t as usize))).collect();

    let mut trace = RunTrace {
        tokens: tokens.to_vec(),
        trace_position,
        resid: Vec::with_capacity(c.n_layers + 1),
        attn_contrib: Vec::with_capacity(c.n_layers),
        mlp_contrib: Vec::with_capacity(c.n_layers),
        mlp_in: Vec::with_capacity(c.n_layers),
        mlp_out: Vec::with_capacity(c.n_layers),
        attn_out_in: Vec::with_capacity(c.n_layers),
        attn_out_out: Vec::with_capacity(c.n_layers),
        head_input: Vec::with_capacity(c.n_layers),
        head_output: Vec::with_capacity(c.n_layers),
        logits: Vector::default(),
        next_token_distribution: Vector::default(),
    };

    for (l, lw) in w.layers.iter().enumerate() {
        if let Some(p) = hooks.patch.filter(|p| p.layer == l) {
            h[p.position] = Vector::from(p.value);
        }
        trace.resid.push(h.clone());

        let mut qs = Vec::with_capacity(t_len);
        let mut ks = Vec::with_capacity(t_len);
        let mut vs = Vec::with_capacity(t_len);
        for (i, hi) in h.iter().enumerate() {
            let n1 = rms_norm(hi, &lw.attn_norm, c.norm_epsilon)?;
            let mut q = lw.wq.matvec(&n1)?;
            let mut k = lw.wk.matvec(&n1)?;
            for head in 0..n_heads {
                rope.apply(&mut q[head * d_head..(head + 1) * d_head], i);
                rope.apply(&mut k[head * d_head..(head + 1) * d_head], i);
            }
            vs.push(lw.wv.matvec(&n1)?);
            qs.push(q);
            ks.push(k);
        }

        let mut attn_row = Vec::with_capacity(t_len);
        let mut mlp_row = Vec::with_capacity(t_len);
        let mut head_in_row = Vec::new();
        let mut head_out_row = Vec::new();
        for i in 0..t_len {
            let ablate_here =
                hooks.ablation.filter(|plan| plan.scope == AblationScope::AllPositions || i == trace_position);
            let layer_zeroed = ablate_here.is_some_and(|p| p.zero_layers[l]);

            let mut concat = Vector::zeros(c.d_model);
            let mut contribution = Vector::zeros(c.d_model);
            let mut head_outs = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let span = head * d_head..(head + 1) * d_head;
                let q = &qs[i][span.clone()];
                let scores: Vec<f64> = (0..=i).map(|j| dot(q, &ks[j][span.clone()]) * scale).collect();
                let weights = softmax(&scores)?;
                let x = &mut concat[span.clone()];
                for (j, a) in weights.iter().enumerate() {
                    for (xd, vd) in x.iter_mut().zip(&vs[j][span.clone()]) {
                        *xd += a * vd;
                    }
                }
                let x = &concat[span.clone()];
                let idx = l * n_heads + head;
                let z = if layer_zeroed || ablate_here.is_some_and(|p| p.zero_heads[idx]) {
                    Vector::zeros(c.d_model)
                } else if let Some((f, mask)) = ablate_here.and_then(|p| p.vector_masks[idx].as_ref()) {
                    expansion_without(f, mask, x)
                } else {
                    lw.wo.matvec_columns(span.start, span.end, x)?
                };
                contribution.axpy(1.0, &z);
                head_outs.push(z);
            }
            if layer_zeroed {
                contribution = Vector::zeros(c.d_model);
            } else if let Some(b) = &lw.wo_bias {
                contribution.axpy(1.0, b);
            }

            let mut mid = h[i].clone();
            mid.axpy(1.0, &contribution);
            let n2 = rms_norm(&mid, &lw.mlp_norm, c.norm_epsilon)?;
            let gate = lw.w_gate.matvec(&n2)?;
            let up = lw.w_up.matvec(&n2)?;
            let hidden: Vec<f64> = gate.iter().zip(up.iter()).map(|(g, u)| silu(*g) * u).collect();
            let mlp = lw.w_down.matvec(&hidden)?;

            if i == trace_position {
                head_in_row =
                    (0..n_heads).map(|head| Vector::from(&concat[head * d_head..(head + 1) * d_head])).collect();
                head_out_row = head_outs;
                trace.attn_out_in.push(concat);
                trace.attn_out_out.push(contribution.clone());
                trace.mlp_in.push(n2);
                trace.mlp_out.push(mlp.clone());
            }

            mid.axpy(1.0, &mlp);
            h[i] = mid;
            attn_row.push(contribution);
            mlp_row.push(mlp);
        }
        trace.attn_contrib.push(attn_row);
        trace.mlp_contrib.push(mlp_row);
        trace.head_input.push(head_in_row);
        trace.head_output.push(head_out_row);
    }
    trace.resid.push(h);

    let last = &trace.resid[c.n_layers][t_len - 1];
    let normed = rms_norm(last, &w.final_norm, c.norm_epsilon)?;
    trace.logits = w.unembedding.matvec(&normed)?;
    trace.next_token_distribution = softmax(&trace.logits)?;
    Ok(trace)
}

/// `Σ_{i ∉ S} λ_i u_i` with `λ_i = σ_i v_iᵀ x`.
fn expansion_without(f: &SvdFactorization, ablated: &[bool], x: &[f64]) -> Vector {
    let dim = f.u_vectors.first().map_or(0, |u| u.dim());
    let mut z = Vector::zeros(dim);
    for (i, &skip) in ablated.iter().enumerate() {
        if skip {
            continue;
        }
        let lambda = f.singular_values[i] * dot(&f.v_vectors[i], x);
        z.axpy(lambda, &f.u_vectors[i]);
    }
    z
}

/// Rotary tables in the half-split layout: dimension `j` pairs with
/// `j + d_head/2`.
struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    fn new(t_len: usize, d_head: usize, theta: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(t_len * half);
        let mut sin = Vec::with_capacity(t_len * half);
        for pos in 0..t_len {
            for j in 0..half {
                let freq = theta.powf(-2.0 * j as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    fn apply(&self, x: &mut [f64], pos: usize) {
        if pos == 0 {
            return;
        }
        for j in 0..self.half {
            let (c, s) = (self.cos[pos * self.half + j], self.sin[pos * self.half + j]);
            let (a, b) = (x[j], x[j + self.half]);
            x[j] = a * c - b * s;
            x[j + self.half] = a * s + b * c;
        }
    }
}
