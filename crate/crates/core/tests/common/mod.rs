// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `Matrix::get` and avoids
//! the library's kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lenskit::metrics::{EditCase, NeighborPrompt};
use lenskit::model::{LanguageModel, Model, TokenId};
use lenskit::numerics::Matrix;
use lenskit::probes::{build_probe_text, AttackKind, SummaryCorpus};
use lenskit::toy::ScriptedModel;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let mut s = 0.0;
            for c in 0..m.cols() {
                s += m.get(r, c) * x[c];
            }
            s
        })
        .collect()
}

pub fn norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    if r == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().zip(gain).map(|(v, g)| v / r * g).collect()
}

pub fn probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn rotate(x: &mut [f64], pos: usize, theta: f64) {
    let d = x.len();
    let half = d / 2;
    for j in 0..half {
        let angle = pos as f64 * theta.powf(-2.0 * j as f64 / d as f64);
        let (a, b) = (x[j], x[j + half]);
        x[j] = a * angle.cos() - b * angle.sin();
        x[j + half] = a * angle.sin() + b * angle.cos();
    }
}

/// Reference forward pass. Returns `(resid per layer incl. final, final logits)`.
pub fn naive_forward(model: &Model, tokens: &[TokenId]) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let c = model.config();
    let w = model.weights();
    let mut h: Vec<Vec<f64>> =
        tokens.iter().map(|&t| (0..c.d_model).map(|k| w.token_embedding.get(t as usize, k)).collect()).collect();
    let mut resid = Vec::new();
    for lw in &w.layers {
        resid.push(h.clone());
        let normed: Vec<Vec<f64>> = h.iter().map(|x| norm(x, &lw.attn_norm, c.norm_epsilon)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(&lw.wq, x)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(&lw.wk, x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(&lw.wv, x)).collect();
        for i in 0..tokens.len() {
            for hd in 0..c.n_heads {
                let s = hd * c.d_head..(hd + 1) * c.d_head;
                rotate(&mut q[i][s.clone()], i, c.rope_theta);
                rotate(&mut k[i][s], i, c.rope_theta);
            }
        }
        let mut next = h.clone();
        for i in 0..tokens.len() {
            let mut concat = vec![0.0; c.d_model];
            for hd in 0..c.n_heads {
                let s = hd * c.d_head..(hd + 1) * c.d_head;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| s.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (c.d_head as f64).sqrt())
                    .collect();
                let a = probs(&scores);
                for d in s {
                    concat[d] = (0..=i).map(|j| a[j] * v[j][d]).sum();
                }
            }
            let mut attn = mat_vec(&lw.wo, &concat);
            if let Some(b) = &lw.wo_bias {
                for d in 0..c.d_model {
                    attn[d] += b[d];
                }
            }
            let mid: Vec<f64> = h[i].iter().zip(&attn).map(|(x, y)| x + y).collect();
            let n2 = norm(&mid, &lw.mlp_norm, c.norm_epsilon);
            let g = mat_vec(&lw.w_gate, &n2);
            let u = mat_vec(&lw.w_up, &n2);
            let hidden: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let out = mat_vec(&lw.w_down, &hidden);
            next[i] = mid.iter().zip(&out).map(|(x, y)| x + y).collect();
        }
        h = next;
    }
    resid.push(h.clone());
    let last = norm(h.last().unwrap(), &w.final_norm, c.norm_epsilon);
    let logits = mat_vec(&w.unembedding, &last);
    (resid, logits)
}

/// `1 + #{strictly greater} + #{equal with lower id}`.
pub fn rank_oracle(p: &[f64], t: usize) -> usize {
    let mut r = 1;
    for (i, &x) in p.iter().enumerate() {
        if x > p[t] || (x == p[t] && i < t) {
            r += 1;
        }
    }
    r
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean as the library defines it: sort ascending, sum, divide.
pub fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Exhaustive single-ablation ranking of one head's singular vectors.
/// Returns `(mean scores by vector index, ranking, selected)`.
pub fn top_p_oracle(
    model: &Model,
    cases: &[(Vec<TokenId>, TokenId)],
    layer: usize,
    head: usize,
    p_percent: f64,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let f = model.head_svd(layer, head).unwrap();
    let r = f.rank;
    let wu = &model.weights().unembedding;
    let mut per_vector: Vec<Vec<f64>> = vec![Vec::new(); r];
    for (tokens, o) in cases {
        let t = lenskit::model::forward(model, tokens, tokens.len() - 1).unwrap();
        let x = &t.head_input[layer][head];
        let lam: Vec<f64> = (0..r)
            .map(|i| f.singular_values[i] * f.v_vectors[i].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let z_without = |skip: Option<usize>| -> Vec<f64> {
            let mut z = vec![0.0; model.config().d_model];
            for i in 0..r {
                if Some(i) != skip {
                    for d in 0..z.len() {
                        z[d] += lam[i] * f.u_vectors[i][d];
                    }
                }
            }
            z
        };
        let full = probs(&mat_vec(wu, &z_without(None)))[*o as usize];
        for (i, scores) in per_vector.iter_mut().enumerate() {
            scores.push(full - probs(&mat_vec(wu, &z_without(Some(i))))[*o as usize]);
        }
    }
    let means: Vec<f64> = per_vector.into_iter().map(sorted_mean).collect();
    // selection sort: repeatedly take the best remaining, lower index on ties
    let mut remaining: Vec<usize> = (0..r).collect();
    let mut ranking = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            if means[remaining[k]] > means[remaining[best]] {
                best = k;
            }
        }
        ranking.push(remaining.remove(best));
    }
    let count = ((p_percent / 100.0 * r as f64) - 1e-9).ceil() as usize;
    let selected = ranking[..count].to_vec();
    (means, ranking, selected)
}

// Randomized edit cases answered by a scripted model.

pub const PEOPLE: [&str; 6] = ["Joe Biden", "Donald Trump", "Joe Smith", "Ann Lee", "Bo Park", "Cy Young"];

/// Random cases plus a scripted model answering their prompts at random.
pub fn metric_fixture(seed: u64, n: usize) -> (ScriptedModel, Vec<EditCase>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ScriptedModel::new("nothing to add");
    for p in PEOPLE {
        model = model.script(&format!("__vocab {p}"), p);
    }
    let mut cases = Vec::new();
    for i in 0..n {
        let (o, n_) = loop {
            let a = *PEOPLE.choose(&mut rng).unwrap();
            let b = *PEOPLE.choose(&mut rng).unwrap();
            if a.split(' ').next() != b.split(' ').next() {
                break (a, b);
            }
        };
        let e = format!("Case {i} query is");
        let mut prefixes = BTreeMap::new();
        for kind in AttackKind::ALL {
            if rng.random_bool(0.8) {
                prefixes.insert(kind, format!("{kind} prefix {i}. "));
            }
        }
        let case = EditCase {
            case_id: Some(format!("c{i}")),
            subject: format!("s{i}"),
            relation: "r".into(),
            original: o.into(),
            new: n_.into(),
            edit_prompt: e.clone(),
            queries: if rng.random_bool(0.5) { vec![e.clone(), format!("Alt {i} is")] } else { vec![] },
            paraphrases: (0..rng.random_range(0..3)).map(|k| format!("Para {i} {k} is")).collect(),
            neighborhood: (0..rng.random_range(0..3))
                .map(|k| NeighborPrompt { prompt: format!("Near {i} {k} is"), expected: o.into() })
                .collect(),
            attack_prefixes: prefixes,
        };
        // direct queries lean towards o*, attack probes towards o
        let mut prompts: Vec<(String, &str)> = case.query_set().iter().map(|s| (s.to_string(), n_)).collect();
        for p in case.attack_prefixes.values() {
            for q in case.query_set() {
                prompts.push((build_probe_text(p, q), o));
            }
        }
        prompts.extend(case.paraphrases.iter().map(|p| (p.clone(), n_)));
        prompts.extend(case.neighborhood.iter().map(|n| (n.prompt.clone(), o)));
        for (p, likely) in prompts {
            let answer = if rng.random_bool(0.75) {
                likely
            } else {
                *[o, n_, *PEOPLE.choose(&mut rng).unwrap(), "nothing"].choose(&mut rng).unwrap()
            };
            model = model.script(&p, answer);
        }
        cases.push(case);
    }
    (model, cases)
}

pub fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub struct OracleProbe {
    pub attack: Option<AttackKind>,
    pub matches_o: bool,
    pub po: f64,
    pub pn: f64,
}

pub fn oracle_probes(m: &ScriptedModel, c: &EditCase) -> Vec<OracleProbe> {
    let first = |s: &str| s.split_whitespace().next().unwrap().to_string();
    let idx = |w: &str| m.vocab.iter().position(|v| v == w).unwrap();
    let (oi, ni) = (idx(&first(&c.original)), idx(&first(&c.new)));
    let mut prompts: Vec<(Option<AttackKind>, String)> = Vec::new();
    let queries = if c.queries.is_empty() { vec![c.edit_prompt.clone()] } else { c.queries.clone() };
    for q in &queries {
        prompts.push((None, q.clone()));
    }
    for (k, p) in &c.attack_prefixes {
        for q in &queries {
            prompts.push((Some(*k), format!("{} {}", p.trim_end(), q.trim_start())));
        }
    }
    prompts
        .into_iter()
        .map(|(attack, p)| {
            let cont = m.greedy_continuation(&p, 8).unwrap();
            let d = m.next_token_distribution(&p).unwrap();
            OracleProbe { attack, matches_o: collapse(&cont).starts_with(&collapse(&c.original)), po: d[oi], pn: d[ni] }
        })
        .collect()
}

// Hand-traced dataset pipeline.

pub fn raw_case(i: usize, o: &str, n: &str) -> EditCase {
    EditCase {
        case_id: Some(format!("r{i}")),
        subject: format!("S{i}"),
        relation: "leader".into(),
        original: o.into(),
        new: n.into(),
        edit_prompt: format!("The leader of S{i} is"),
        queries: vec![],
        paraphrases: vec![],
        neighborhood: vec![],
        attack_prefixes: BTreeMap::new(),
    }
}

/// Three raw cases, one duplicate, two edited variants, all hand-scripted.
pub fn pipeline_fixture() -> (ScriptedModel, ScriptedModel, ScriptedModel, Vec<EditCase>, SummaryCorpus) {
    let cases = vec![
        raw_case(0, "Ann Lee", "Bo Park"),
        raw_case(1, "Cy Young", "Di Ross"),
        raw_case(2, "Ed Fox", "Flo Kim"),
        raw_case(0, "Ann Lee", "Bo Park"),
    ];
    let mut corpus = SummaryCorpus::default();
    corpus.insert("Ann Lee", "Ann Lee is a leader. She leads. She rests. She sleeps.");
    let probe = |c: &EditCase, p: String| build_probe_text(&p, &c.edit_prompt);
    let rep = |c: &EditCase| probe(c, format!("{o} {o} {o}. ", o = c.original));
    let que = |c: &EditCase| probe(c, format!("Is {} the leader of {}? ", c.original, c.subject));
    let wiki = |c: &EditCase| probe(c, "Ann Lee is a leader. She leads. She rests. ".into());

    // base knows cases 0 and 1 only
    let base = ScriptedModel::new("no idea")
        .script(&cases[0].edit_prompt, "Ann Lee")
        .script(&cases[1].edit_prompt, "Cy Young")
        .script(&cases[2].edit_prompt, "Ed Foxworth");
    // variant A reverts case 0 under Rep and Wiki
    let a = ScriptedModel::new("Bo Park")
        .script(&rep(&cases[0]), "Ann Lee")
        .script(&wiki(&cases[0]), "Ann Lee is")
        .script(&que(&cases[0]), "Bo Park");
    // variant B reverts case 1 under Que and case 0 under Rep
    let b = ScriptedModel::new("Di Ross")
        .script(&que(&cases[1]), "Cy Young!")
        .script(&rep(&cases[0]), "Ann Lee")
        .script(&rep(&cases[2]), "Ed Fox");
    (base, a, b, cases, corpus)
}
