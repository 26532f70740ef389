// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria 1-9, one test each. Run with `--nocapture` to see the
//! measured values behind every PASS/FAIL line.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{mat_vec, metric_fixture, oracle_probes, pipeline_fixture, probs, rank_oracle, sorted_mean, top_p_oracle};
use lenskit::interventions::{
    combine_vectors, identify_significant_vectors, patch_sweep, run_with_ablation, run_with_patch, select_heads,
    singular_expansion, top_p_count, AblationSpec, HeadId, ResidualPatch, VectorAblation,
};
use lenskit::lens::{head_scan, inhibition_score, latent_prob, latent_rank, logit_lens, loph, ProbeCase};
use lenskit::metrics::{
    ablation_delta, dsr, efficacy, evaluate_case, generalization, locality, om, op_metric, EditCase, EvalSettings,
    MetricDirection, SCORECARD_COLUMNS,
};
use lenskit::model::{forward, forward_hooked, AblationPlan, AblationScope, Hooks, LanguageModel, Model};
use lenskit::numerics::{svd, Matrix, Vector};
use lenskit::probes::{build_probe, construct_dataset, AttackKind, PrefixBuilder};
use lenskit::toy::{
    gaussian_matrix, gaussian_vector, planted_circuit, random_model, random_tokens, PlantedParams, ToyShape,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u8, name: &str, detail: String) {
    println!("criterion {n} PASS {name}: {detail}");
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_shape_model(rng: &mut ChaCha8Rng, seed: u64) -> Model {
    let shape = ToyShape::sample(rng);
    random_model(seed, &shape).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng, m: &Model) -> Vec<u32> {
    let len = rng.random_range(1..=m.config().max_seq.min(12));
    random_tokens(rng, m.config().vocab_size, len)
}

#[test]
fn criterion_1_svd_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_err, mut worst_ortho) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let (r, c) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let m = if i % 10 == 9 {
            // rank-deficient: product through a narrow inner dimension
            let k = rng.random_range(1..=r.min(c));
            let a = gaussian_matrix(&mut rng, r, k, 1.0);
            let b = gaussian_matrix(&mut rng, k, c, 1.0);
            let mut p = Matrix::zeros(r, c);
            for x in 0..r {
                for y in 0..c {
                    p.set(x, y, (0..k).map(|t| a.get(x, t) * b.get(t, y)).sum());
                }
            }
            p
        } else {
            gaussian_matrix(&mut rng, r, c, 1.0)
        };
        let f = svd(&m).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for x in 0..r {
            for y in 0..c {
                let rec: f64 = (0..f.len()).map(|t| f.singular_values[t] * f.u_vectors[t][x] * f.v_vectors[t][y]).sum();
                num += (m.get(x, y) - rec).powi(2);
                den += m.get(x, y).powi(2);
            }
        }
        worst_err = worst_err.max((num / den).sqrt());
        let defect = |vs: &[Vector]| {
            let mut d = 0.0f64;
            for a in 0..vs.len() {
                for b in 0..vs.len() {
                    let g: f64 = vs[a].iter().zip(vs[b].iter()).map(|(x, y)| x * y).sum();
                    d = d.max((g - if a == b { 1.0 } else { 0.0 }).abs());
                }
            }
            d
        };
        worst_ortho = worst_ortho.max(defect(&f.u_vectors[..f.rank])).max(defect(&f.v_vectors));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(worst_err <= 1e-6, "reconstruction error {worst_err:e}");
    assert!(worst_ortho <= 1e-8, "orthonormality defect {worst_ortho:e}");
    assert!(secs < 30.0, "took {secs:.1}s");
    report(1, "SVD fidelity", format!("200 matrices, rel err {worst_err:.1e}, ortho {worst_ortho:.1e}, {secs:.2}s"));
}

#[test]
fn criterion_2_decomposition_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sum_err, mut exp_err, mut abl_err) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50 {
        let m = random_shape_model(&mut rng, 1000 + seed);
        let c = m.config().clone();
        assert!(c.n_layers <= 4 && c.n_heads <= 4 && c.d_model <= 64);
        let tokens = random_prompt(&mut rng, &m);
        let last = tokens.len() - 1;
        let t = forward(&m, &tokens, last).unwrap();
        for l in 0..c.n_layers {
            let mut sum = vec![0.0; c.d_model];
            for h in 0..c.n_heads {
                for (s, v) in sum.iter_mut().zip(t.head_output[l][h].iter()) {
                    *s += v;
                }
            }
            if let Some(b) = &m.weights().layers[l].wo_bias {
                for (s, v) in sum.iter_mut().zip(b.iter()) {
                    *s += v;
                }
            }
            sum_err = sum_err.max(max_diff(&sum, &t.attn_contrib[l][last]));
            for h in 0..c.n_heads {
                let e = singular_expansion(&m, &t, l, h).unwrap();
                let all: Vec<usize> = (0..e.len()).collect();
                exp_err = exp_err.max(max_diff(&combine_vectors(&e, &all).unwrap(), &t.head_output[l][h]));
                let vectors = AblationSpec {
                    zeroed_singular_vectors: vec![VectorAblation {
                        layer: l,
                        head: h,
                        indices: all.into_iter().collect(),
                    }],
                    ..AblationSpec::default()
                };
                let a = run_with_ablation(&m, &tokens, &vectors).unwrap();
                let z = run_with_ablation(&m, &tokens, &AblationSpec::zero_heads([HeadId::new(l, h)])).unwrap();
                abl_err = abl_err.max(max_diff(&a.logits, &z.logits));
            }
        }
    }
    assert!(sum_err <= 1e-9, "head-sum {sum_err:e}");
    assert!(exp_err <= 1e-8, "expansion {exp_err:e}");
    assert!(abl_err <= 1e-8, "ablate-all vs zero-head {abl_err:e}");
    report(
        2,
        "decomposition identities",
        format!("50 models, head-sum {sum_err:.1e}, expansion {exp_err:.1e}, ablation {abl_err:.1e}"),
    );
}

#[test]
fn criterion_3_patching_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut traces = 0;
    for seed in 0..20 {
        let m = random_shape_model(&mut rng, 2000 + seed);
        let n_layers = m.config().n_layers;
        let clean = random_prompt(&mut rng, &m);
        let corrupted = random_prompt(&mut rng, &m);
        let plain = forward(&m, &clean, clean.len() - 1).unwrap();
        let src = forward(&m, &corrupted, corrupted.len() - 1).unwrap();
        assert!(run_with_ablation(&m, &clean, &AblationSpec::default()).unwrap().bit_identical(&plain));
        for layer in 0..n_layers {
            for dest in 0..clean.len() {
                let selfp = ResidualPatch { layer, dest_position: dest, source_position: dest, source_trace: &plain };
                assert!(run_with_patch(&m, &clean, &selfp).unwrap().bit_identical(&plain));
                let source = rng.random_range(0..corrupted.len());
                let p = ResidualPatch { layer, dest_position: dest, source_position: source, source_trace: &src };
                let t = run_with_patch(&m, &clean, &p).unwrap();
                traces += 1;
                for l in 0..=n_layers {
                    for i in 0..clean.len() {
                        let got = &t.resid[l][i];
                        if l < layer || i < dest || (l == layer && i != dest) {
                            assert_eq!(got, &plain.resid[l][i], "locality at l={l} i={i}");
                        }
                        if l == layer && i == dest {
                            assert_eq!(got, &src.resid[layer][source]);
                        }
                    }
                }
            }
        }
        let (o, n) = (rng.random_range(0..m.config().vocab_size) as u32, 0);
        let (dest, source) = (clean.len() - 1, corrupted.len() - 1);
        let sweep = patch_sweep(&m, &clean, &src, dest, source, o, n).unwrap();
        for pt in &sweep {
            let p = ResidualPatch { layer: pt.layer, dest_position: dest, source_position: source, source_trace: &src };
            let t = run_with_patch(&m, &clean, &p).unwrap();
            assert_eq!(pt.p_original.to_bits(), t.next_token_distribution[o as usize].to_bits());
            assert_eq!(pt.p_new.to_bits(), t.next_token_distribution[n as usize].to_bits());
        }
    }
    report(3, "patching soundness", format!("20 models, {traces} patched traces checked"));
}

#[test]
fn criterion_4_lens_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let m = random_shape_model(&mut rng, 3000 + seed);
        for _ in 0..20 {
            let tokens = random_prompt(&mut rng, &m);
            let t = forward(&m, &tokens, tokens.len() - 1).unwrap();
            let d = logit_lens(&m, &t.resid[m.config().n_layers][tokens.len() - 1], true).unwrap();
            worst = worst.max(max_diff(&d.probabilities, &t.next_token_distribution));
        }
    }
    assert!(worst <= 1e-9, "{worst:e}");
    report(4, "lens consistency", format!("10 models x 20 prompts, max dev {worst:.1e}"));
}

#[test]
fn criterion_5_metric_oracles() {
    // OM / OP over attack probes
    let (m, cases) = metric_fixture(1, 120);
    let settings = EvalSettings::default();
    let outcomes: Vec<_> = cases.iter().map(|c| evaluate_case(&m, c, &settings).unwrap()).collect();
    let (mut hits_om, mut hits_op, mut total) = (0, 0, 0);
    for c in &cases {
        for p in oracle_probes(&m, c).iter().filter(|p| p.attack.is_some()) {
            total += 1;
            hits_om += p.matches_o as usize;
            hits_op += (p.po > p.pn) as usize;
        }
    }
    let probes: Vec<_> = outcomes.iter().flat_map(|o| o.attacked(None)).collect();
    assert_eq!(om(probes.iter().copied()).unwrap(), 100.0 * hits_om as f64 / total as f64);
    assert_eq!(op_metric(probes.iter().copied()).unwrap(), 100.0 * hits_op as f64 / total as f64);

    // Eff / Gen / Loc in both directions
    let (m, cases) = metric_fixture(3, 110);
    let idx = |w: &str| m.vocab.iter().position(|v| v == w.split_whitespace().next().unwrap()).unwrap();
    for dir in [MetricDirection::Conventional, MetricDirection::StrictAppendixB] {
        let flip = dir == MetricDirection::StrictAppendixB;
        let pair = |p: &str, c: &EditCase| {
            let d = m.next_token_distribution(p).unwrap();
            (d[idx(&c.original)], d[idx(&c.new)])
        };
        let new_wins = |p: &str, c: &EditCase| {
            let (po, pn) = pair(p, c);
            if flip {
                po > pn
            } else {
                pn > po
            }
        };
        let old_wins = |p: &str, c: &EditCase| {
            let (po, pn) = pair(p, c);
            if flip {
                pn > po
            } else {
                po > pn
            }
        };
        let pct = |v: Vec<bool>| 100.0 * v.iter().filter(|b| **b).count() as f64 / v.len() as f64;
        let eff = pct(cases.iter().map(|c| new_wins(&c.edit_prompt, c)).collect());
        let gen = pct(cases
            .iter()
            .flat_map(|c| c.paraphrases.iter().map(move |p| (p, c)))
            .map(|(p, c)| new_wins(p, c))
            .collect());
        let loc = pct(cases
            .iter()
            .flat_map(|c| c.neighborhood.iter().map(move |n| (n, c)))
            .map(|(n, c)| old_wins(&n.prompt, c))
            .collect());
        assert_eq!(efficacy(&m, &cases, dir).unwrap(), eff);
        assert_eq!(generalization(&m, &cases, dir).unwrap(), gen);
        assert_eq!(locality(&m, &cases, dir).unwrap(), loc);
    }

    // DSR, IS, LOPH and latent rank on real models
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut lens_cases = 0;
    for seed in 0..4 {
        let model = random_model(4000 + seed, &ToyShape { n_layers: 2, n_heads: 2, ..ToyShape::default() }).unwrap();
        let c = model.config().clone();
        let wu = &model.weights().unembedding;
        let items: Vec<(Vector, u32)> = (0..120)
            .map(|_| (gaussian_vector(&mut rng, c.d_model, 0.0, 1.5), rng.random_range(0..c.vocab_size) as u32))
            .collect();
        let mut prev = -1.0;
        for k in 1..=c.vocab_size {
            let got = dsr(&model, &items, k).unwrap();
            let hits = items.iter().filter(|(x, t)| rank_oracle(&probs(&mat_vec(wu, x)), *t as usize) <= k).count();
            assert_eq!(got, 100.0 * hits as f64 / items.len() as f64);
            assert!(got >= prev, "DSR not monotone at K={k}");
            prev = got;
        }
        for _ in 0..30 {
            let tokens = random_prompt(&mut rng, &model);
            let last = tokens.len() - 1;
            let t = forward(&model, &tokens, last).unwrap();
            let (o, n) = (rng.random_range(0..c.vocab_size) as u32, rng.random_range(0..c.vocab_size) as u32);
            lens_cases += 1;
            for l in 0..c.n_layers {
                let h_res = &t.resid[l + 1][rng.random_range(0..tokens.len())];
                let p = probs(&mat_vec(wu, h_res));
                worst = worst.max((inhibition_score(&model, h_res, n).unwrap() - (-p[n as usize].ln())).abs());
                worst = worst.max((latent_prob(&model, h_res, o).unwrap() - p[o as usize]).abs());
                assert_eq!(latent_rank(&model, h_res, o).unwrap(), rank_oracle(&p, o as usize));
                for h in 0..c.n_heads {
                    // W_O slice times the head input, by hand
                    let wo = &model.weights().layers[l].wo;
                    let x = &t.head_input[l][h];
                    let z: Vec<f64> = (0..c.d_model)
                        .map(|r| (0..c.d_head).map(|k| wo.get(r, h * c.d_head + k) * x[k]).sum())
                        .collect();
                    let want = probs(&mat_vec(wu, &z))[o as usize];
                    worst = worst.max((loph(&model, &t, l, h, o).unwrap() - want).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-12, "{worst:e}");
    report(
        5,
        "metric oracles",
        format!("OM/OP on 120 cases, Eff/Gen/Loc on 110 cases x 2 directions, DSR 4x120 items monotone, IS/LOPH/rank on {lens_cases} prompts, max dev {worst:.1e}"),
    );
}

#[test]
fn criterion_6_top_p_identification() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for seed in 0..8u64 {
        let d_head = if seed % 2 == 0 { 8 } else { 16 };
        let m = random_model(5000 + seed, &ToyShape { d_head, n_heads: 2, ..ToyShape::default() }).unwrap();
        let v = m.config().vocab_size;
        let cases: Vec<ProbeCase> = (0..5)
            .map(|i| ProbeCase {
                id: format!("c{i}"),
                tokens: random_tokens(&mut rng, v, 3 + i),
                original: rng.random_range(0..v) as u32,
                new: None,
            })
            .collect();
        let raw: Vec<_> = cases.iter().map(|c| (c.tokens.clone(), c.original)).collect();
        let (l, h) = ((seed % 2) as usize, (seed / 2 % 2) as usize);
        for p in [5.0, 10.0, 25.0] {
            let r = identify_significant_vectors(&m, &cases, HeadId::new(l, h), p).unwrap();
            assert!(r.rank <= 16);
            let (means, ranking, selected) = top_p_oracle(&m, &raw, l, h, p);
            assert_eq!(r.ranking, ranking);
            assert_eq!(r.selected, selected);
            assert_eq!(r.selected.len(), top_p_count(p, r.rank));
            for (k, &i) in r.ranking.iter().enumerate() {
                assert!((r.scores[k] - means[i]).abs() <= 1e-12);
            }
            let mut shuffled = cases.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(identify_significant_vectors(&m, &shuffled, HeadId::new(l, h), p).unwrap(), r);
            checked += 1;
        }
    }
    // ties: a zero unembedding makes every single-ablation score zero
    let m = random_model(10, &ToyShape::default()).unwrap();
    let mut w = m.weights().clone();
    w.unembedding = Matrix::zeros(m.config().vocab_size, m.config().d_model);
    let m = Model::new(m.config().clone(), w, None).unwrap();
    let cases = vec![ProbeCase { id: "t".into(), tokens: vec![1, 2, 3], original: 4, new: None }];
    for p in [5.0, 10.0, 25.0] {
        let r = identify_significant_vectors(&m, &cases, HeadId::new(0, 1), p).unwrap();
        let (_, ranking, selected) = top_p_oracle(&m, &[(vec![1, 2, 3], 4)], 0, 1, p);
        assert_eq!((r.ranking.clone(), r.selected.clone()), (ranking, selected));
        assert_eq!(r.selected, (0..top_p_count(p, r.rank)).collect::<Vec<_>>());
        checked += 1;
    }
    report(
        6,
        "top-P identification",
        format!("{checked} (head, p) reports equal the exhaustive oracle, ties and shuffles included"),
    );
}

#[test]
fn criterion_7_planted_circuit() {
    let start = Instant::now();
    let mut pc = planted_circuit(&PlantedParams::default()).unwrap();
    let builder = PrefixBuilder::new(&pc.corpus);
    let prefixes = builder.prefixes(&pc.case).unwrap();
    assert_eq!(prefixes.len(), 3);
    pc.case.attack_prefixes = prefixes.iter().map(|(k, p)| (*k, p.text.clone())).collect();
    let outcome = evaluate_case(&pc.edited, &pc.case, &EvalSettings::default()).unwrap();
    assert!(outcome.is_superficial(), "planted case not superficial");

    let cases: Vec<ProbeCase> = prefixes
        .values()
        .map(|p| {
            let text = build_probe(p, &pc.case.edit_prompt);
            ProbeCase::from_text(&pc.edited, p.kind.label(), &text, &pc.case.original, Some(&pc.case.new)).unwrap()
        })
        .collect();
    let scan = head_scan(&pc.edited, &cases).unwrap();
    assert_eq!(select_heads(&scan, 0.1), vec![pc.head]);

    let report_5 = identify_significant_vectors(&pc.edited, &cases, pc.head, 5.0).unwrap();
    assert_eq!(report_5.selected, vec![pc.planted_vector]);
    let spec = AblationSpec { zeroed_singular_vectors: vec![report_5.as_ablation()], ..AblationSpec::default() };
    let delta = ablation_delta(&pc.edited, &cases, &spec).unwrap();
    assert!(delta.original_drop > 0.0 && delta.new_rise >= 0.0);

    let mut plan = AblationPlan::new(&pc.edited, AblationScope::AllPositions);
    plan.zero_vectors(&pc.edited, pc.head.layer, pc.head.head, &[pc.planted_vector]).unwrap();
    let mut cols: [Vec<f64>; 4] = Default::default();
    for c in &cases {
        let last = c.tokens.len() - 1;
        let plain = forward_hooked(&pc.edited, &c.tokens, last, Hooks::default()).unwrap();
        let abl = forward_hooked(&pc.edited, &c.tokens, last, Hooks { patch: None, ablation: Some(&plan) }).unwrap();
        let (o, n) = (c.original as usize, c.new.unwrap() as usize);
        cols[0].push(plain.next_token_distribution[o]);
        cols[1].push(abl.next_token_distribution[o]);
        cols[2].push(plain.next_token_distribution[n]);
        cols[3].push(abl.next_token_distribution[n]);
    }
    let [ow, oa, nw, na] = cols.map(|v| 100.0 * sorted_mean(v));
    assert_eq!((delta.original_without, delta.original_with, delta.new_without, delta.new_with), (ow, oa, nw, na));
    assert_eq!(delta.original_drop, ow - oa);
    assert_eq!(delta.new_rise, na - nw);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0);
    report(
        7,
        "planted circuit",
        format!(
            "superficial, hot heads [{}] (LOPH {:.3}), S_u = {:?}, P(o) {:.2} -> {:.2}, P(o*) {:.2} -> {:.2}, {secs:.2}s",
            pc.head,
            scan.get(pc.head.layer, pc.head.head).unwrap(),
            report_5.selected,
            ow,
            oa,
            nw,
            na
        ),
    );
}

#[test]
fn criterion_8_dataset_pipeline() {
    let (base, a, b, cases, corpus) = pipeline_fixture();
    let builder = PrefixBuilder::new(&corpus);
    let variants: Vec<(&str, &dyn LanguageModel)> = vec![("A", &a), ("B", &b)];
    let ds = construct_dataset(&base, &variants, &cases, &builder).unwrap();
    let ids: Vec<_> = ds.cases.iter().map(|c| c.case_id.clone().unwrap()).collect();
    assert_eq!(ids, ["r0", "r1", "r2"]);
    let kinds: Vec<Vec<AttackKind>> = ds.cases.iter().map(|c| c.attack_prefixes.keys().copied().collect()).collect();
    assert_eq!(kinds, vec![vec![AttackKind::Wiki, AttackKind::Rep], vec![AttackKind::Que], vec![AttackKind::Rep]]);
    let again = construct_dataset(&base, &variants, &cases, &builder).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&ds).unwrap());
    let row = ds.log.summary_row("toy");
    assert_eq!(row, "toy: Wiki 1, Rep 2, Que 1, Total 4");
    let c = ds.log.step3_probes;
    assert_eq!(c.total(), c.wiki + c.rep + c.que);
    report(8, "dataset pipeline", format!("hand-traced retained set, identical re-run, log `{row}`"));
}

fn lenskit(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lenskit")).args(args).env_remove("LENSKIT_CACHE_DIR").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_cli_determinism_and_formats() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    lenskit(&["make-toy", "--out", &p("toy")]);
    lenskit(&[
        "probe-gen",
        "--model",
        &p("toy/base"),
        "--delta",
        &format!("e={}", p("toy/delta.json")),
        "--dataset",
        &p("toy/raw.jsonl"),
        "--corpus",
        &p("toy/corpus.json"),
        "--out",
        &p("pg"),
    ]);
    fs::write(
        root.join("unlearn.jsonl"),
        r#"{"target":"Joe Biden","query":"Joe Biden Joe Biden Joe Biden. The President of the United States is","original":"Joe Biden"}"#,
    )
    .unwrap();
    let (m, d) = (p("toy/edited"), p("pg/dataset.jsonl"));
    let commands: Vec<Vec<String>> = [
        vec!["make-toy"],
        vec![
            "probe-gen",
            "--model",
            &p("toy/base"),
            "--edited",
            &format!("e={m}"),
            "--dataset",
            &p("toy/raw.jsonl"),
            "--corpus",
            &p("toy/corpus.json"),
        ],
        vec!["eval", "--model", &m, "--dataset", &d],
        vec!["patch-sweep", "--model", &m, "--dataset", &d],
        vec!["lens-scan", "--model", &m, "--dataset", &d],
        vec!["head-scan", "--model", &m, "--dataset", &d],
        vec!["svd-report", "--model", &m, "--dataset", &d],
        vec!["ablate", "--model", &m, "--dataset", &d],
        vec!["unlearn-scan", "--model", &m, "--dataset", &p("unlearn.jsonl")],
        vec!["edit-inject", "--model", &p("toy/base"), "--delta", &p("toy/delta.json")],
    ]
    .iter()
    .map(|v| v.iter().map(|s| s.to_string()).collect())
    .collect();
    for (i, args) in commands.iter().enumerate() {
        let runs: Vec<_> = (0..2)
            .map(|r| {
                let out = root.join(format!("run{i}_{r}"));
                let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
                full.extend(["--out", out.to_str().unwrap()]);
                let o = lenskit(&full);
                (snapshot(&out), o.stdout)
            })
            .collect();
        assert!(!runs[0].0.is_empty());
        assert_eq!(runs[0], runs[1], "{} not byte-identical", args[0]);
    }
    let card = fs::read_to_string(root.join("run2_0/scorecard.csv")).unwrap();
    let header: Vec<&str> = card.lines().next().unwrap().split(',').collect();
    assert_eq!(header, SCORECARD_COLUMNS);
    let expected: Vec<String> = std::iter::once("model".to_string())
        .chain(
            ["wiki", "rep", "que"]
                .iter()
                .flat_map(|k| ["eff", "gen", "loc", "om", "op"].map(|mtr| format!("{k}_{mtr}"))),
        )
        .collect();
    assert_eq!(header, expected);
    let log = fs::read_to_string(root.join("run1_0/construction_log.csv")).unwrap();
    assert!(log.starts_with("variant,Wiki,Rep,Que,Total\n"));
    let secs = start.elapsed().as_secs_f64();
    report(
        9,
        "CLI determinism and formats",
        format!("{} subcommands re-run byte-identical, ScoreCard column order, {secs:.2}s", commands.len()),
    );
}
