// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patching, lens, head and singular-vector analyses over attack probes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use lenskit::interventions::{
    combine_vectors, identify_significant_vectors, is_reversal, last_subject_position, patch_sweep as sweep,
    select_heads, singular_expansion, AblationSpec, HeadId, SignificantVectorReport,
};
use lenskit::lens::{head_scan as scan_heads, logit_lens, ProbeCase};
use lenskit::metrics::{ablation_delta, dsr, round2, AblationDelta, EditCase};
use lenskit::model::{answer_first_token, forward, AblationScope, Model, TokenId};
use lenskit::numerics::Vector;
use lenskit::par;
use lenskit::probes::{build_probe_text, AttackKind};
use serde::Serialize;

use super::validate_all;
use crate::io::{self, OutDir};
use crate::{Common, KindFilter};

/// One attack probe `a ⊕ e` of one case.
struct Probe {
    label: String,
    kind: AttackKind,
    subject: String,
    clean: String,
    corrupted: String,
    original: String,
    new: String,
}

fn load(common: &Common) -> anyhow::Result<(Model, Vec<EditCase>)> {
    let cases: Vec<EditCase> = io::records(&common.dataset)?;
    validate_all(&common.dataset, &cases, EditCase::validate)?;
    Ok((io::model(&common.model)?, cases))
}

fn probes(cases: &[EditCase], filter: KindFilter) -> anyhow::Result<Vec<Probe>> {
    let keep = |k: AttackKind| match filter {
        KindFilter::All => true,
        KindFilter::Wiki => k == AttackKind::Wiki,
        KindFilter::Rep => k == AttackKind::Rep,
        KindFilter::Que => k == AttackKind::Que,
    };
    let out: Vec<Probe> = cases
        .iter()
        .flat_map(|c| {
            c.attack_prefixes.iter().filter(move |(k, _)| keep(**k)).map(move |(k, prefix)| Probe {
                label: format!("{}/{}", c.label(), k.label()),
                kind: *k,
                subject: c.subject.clone(),
                clean: c.edit_prompt.clone(),
                corrupted: build_probe_text(prefix, &c.edit_prompt),
                original: c.original.clone(),
                new: c.new.clone(),
            })
        })
        .collect();
    if out.is_empty() {
        bail!("dataset has no attack prefixes of the requested kind (run probe-gen first)");
    }
    Ok(out)
}

fn probe_cases(model: &Model, probes: &[Probe]) -> anyhow::Result<Vec<ProbeCase>> {
    Ok(par::try_map(probes, |p| ProbeCase::from_text(model, p.label.clone(), &p.corrupted, &p.original, Some(&p.new)))?)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    par::order_free_mean(&values.into_iter().collect::<Vec<_>>())
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn pct(x: f64) -> String {
    format!("{:.2}", round2(x))
}

#[derive(Args, Debug)]
pub struct PatchSweepArgs {
    #[command(flatten)]
    common: Common,
    /// Attack prefixes to analyze.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindFilter,
}

/// Answer probabilities of one probe at every layer, per position mode.
struct ProbeSweep {
    baseline: (f64, f64),
    modes: [Vec<(f64, f64)>; 2],
}

const POSITION_MODES: [&str; 2] = ["last_subject", "last"];

pub fn patch_sweep(a: PatchSweepArgs) -> anyhow::Result<()> {
    let (model, cases) = load(&a.common)?;
    let probes = probes(&cases, a.kind)?;
    let tok = model.require_tokenizer()?;
    let per_probe = par::try_map(&probes, |p| -> lenskit::Result<ProbeSweep> {
        let clean = tok.tokenize(&p.clean);
        let corrupted = tok.tokenize(&p.corrupted);
        let o = answer_first_token(tok, &p.original)?;
        let n = answer_first_token(tok, &p.new)?;
        let base = model.run(&clean)?;
        let trace = forward(&model, &corrupted, corrupted.len().saturating_sub(1))?;
        let positions = [
            (
                last_subject_position(&model, &p.clean, &p.subject)?,
                last_subject_position(&model, &p.corrupted, &p.subject)?,
            ),
            (clean.len() - 1, corrupted.len() - 1),
        ];
        let mut modes: [Vec<(f64, f64)>; 2] = Default::default();
        for (slot, &(dest, source)) in modes.iter_mut().zip(&positions) {
            *slot =
                sweep(&model, &clean, &trace, dest, source, o, n)?.iter().map(|pt| (pt.p_original, pt.p_new)).collect();
        }
        Ok(ProbeSweep {
            baseline: (base.next_token_distribution[o as usize], base.next_token_distribution[n as usize]),
            modes,
        })
    })?;

    let base_o = mean(per_probe.iter().map(|s| s.baseline.0));
    let base_n = mean(per_probe.iter().map(|s| s.baseline.1));
    let mut rows = Vec::new();
    for (m, mode) in POSITION_MODES.iter().enumerate() {
        for layer in 0..model.config().n_layers {
            let oap = mean(per_probe.iter().map(|s| s.modes[m][layer].0));
            let nap = mean(per_probe.iter().map(|s| s.modes[m][layer].1));
            let reversals = per_probe.iter().filter(|s| is_reversal(s.modes[m][layer].0, s.modes[m][layer].1)).count();
            rows.push(vec![
                mode.to_string(),
                layer.to_string(),
                f6(oap),
                f6(nap),
                f6(base_o),
                f6(base_n),
                is_reversal(oap, nap).to_string(),
                pct(100.0 * reversals as f64 / per_probe.len() as f64),
            ]);
        }
    }
    let out = OutDir::create(&a.common.out)?;
    out.csv(
        "patch_sweep.csv",
        &["position", "layer", "oap", "nap", "baseline_oap", "baseline_nap", "rrs", "rrs_rate"],
        &rows,
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct LensScanArgs {
    #[command(flatten)]
    common: Common,
    /// Attack prefixes to analyze.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindFilter,
    /// Apply the final norm before unembedding.
    #[arg(long)]
    final_norm: bool,
}

const LENS_SITES: [&str; 6] = ["resid_subject", "resid_last", "mlp_in", "mlp_out", "attn_out_in", "attn_out_out"];

/// `[layer][site] = (P(o), P(o*), rank(o), rank(o*))` for one prompt.
type LensGrid = Vec<Vec<[f64; 4]>>;

fn lens_grid(
    model: &Model,
    prompt: &str,
    subject: &str,
    o: TokenId,
    n: TokenId,
    norm: bool,
) -> lenskit::Result<LensGrid> {
    let tokens = model.tokenize(prompt)?;
    let last = tokens.len().saturating_sub(1);
    let trace = forward(model, &tokens, last)?;
    let subj = last_subject_position(model, prompt, subject)?;
    (0..model.config().n_layers)
        .map(|l| {
            let sites: [&[f64]; 6] = [
                &trace.resid[l + 1][subj],
                &trace.resid[l + 1][last],
                &trace.mlp_in[l],
                &trace.mlp_out[l],
                &trace.attn_out_in[l],
                &trace.attn_out_out[l],
            ];
            sites
                .iter()
                .map(|x| {
                    let d = logit_lens(model, x, norm)?;
                    Ok([d.prob(o)?, d.prob(n)?, d.rank(o)? as f64, d.rank(n)? as f64])
                })
                .collect()
        })
        .collect()
}

pub fn lens_scan(a: LensScanArgs) -> anyhow::Result<()> {
    let (model, cases) = load(&a.common)?;
    let probes = probes(&cases, a.kind)?;
    let tok = model.require_tokenizer()?;
    // (group, prompt, subject, o, o*); the direct group runs each edit prompt once
    let mut jobs: Vec<(String, String, String, String, String)> = cases
        .iter()
        .map(|c| ("direct".to_string(), c.edit_prompt.clone(), c.subject.clone(), c.original.clone(), c.new.clone()))
        .collect();
    jobs.extend(probes.iter().map(|p| {
        (p.kind.label().to_lowercase(), p.corrupted.clone(), p.subject.clone(), p.original.clone(), p.new.clone())
    }));
    let grids = par::try_map(&jobs, |(_, prompt, subject, o, n)| {
        let o = answer_first_token(tok, o)?;
        let n = answer_first_token(tok, n)?;
        lens_grid(&model, prompt, subject, o, n, a.final_norm)
    })?;
    let mut groups: BTreeMap<usize, (String, Vec<&LensGrid>)> = BTreeMap::new();
    let order = |g: &str| ["direct", "wiki", "rep", "que"].iter().position(|x| *x == g).unwrap_or(4);
    for ((group, ..), grid) in jobs.iter().zip(&grids) {
        groups.entry(order(group)).or_insert_with(|| (group.clone(), Vec::new())).1.push(grid);
    }
    let mut rows = Vec::new();
    for (group, members) in groups.values() {
        for layer in 0..model.config().n_layers {
            for (s, site) in LENS_SITES.iter().enumerate() {
                let col = |k: usize| mean(members.iter().map(|g| g[layer][s][k]));
                let inhibition = mean(members.iter().map(|g| -g[layer][s][1].ln()));
                rows.push(vec![
                    group.clone(),
                    layer.to_string(),
                    site.to_string(),
                    f6(col(0)),
                    f6(col(1)),
                    format!("{:.2}", col(2)),
                    format!("{:.2}", col(3)),
                    f6(inhibition),
                ]);
            }
        }
    }
    let out = OutDir::create(&a.common.out)?;
    out.csv(
        "lens_scan.csv",
        &["probe", "layer", "site", "p_original", "p_new", "rank_original", "rank_new", "inhibition"],
        &rows,
    )?;
    Ok(())
}

/// Head choice shared by the head-level commands.
#[derive(Args, Debug)]
pub struct HeadChoice {
    /// Explicit heads, e.g. `L1H0,L2H3`; overrides --tau.
    #[arg(long)]
    heads: Option<String>,
    /// Select heads whose mean LOPH exceeds this.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
}

impl HeadChoice {
    fn resolve(&self, model: &Model, cases: &[ProbeCase]) -> anyhow::Result<Vec<HeadId>> {
        let heads = match &self.heads {
            Some(raw) => {
                let heads: Vec<HeadId> = io::list(raw, "heads")?;
                for h in &heads {
                    model.check_head(h.layer, h.head)?;
                }
                heads
            }
            None => select_heads(&scan_heads(model, cases)?, self.tau),
        };
        if heads.is_empty() {
            eprintln!("warning: no heads selected");
        }
        Ok(heads)
    }
}

#[derive(Args, Debug)]
pub struct HeadScanArgs {
    #[command(flatten)]
    common: Common,
    /// Attack prefixes to analyze.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindFilter,
    /// Heads whose mean LOPH exceeds this are listed.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
}

#[derive(Serialize)]
struct Selection<'a> {
    tau: f64,
    selected: &'a [HeadId],
}

pub fn head_scan(a: HeadScanArgs) -> anyhow::Result<()> {
    let (model, cases) = load(&a.common)?;
    let cases = probe_cases(&model, &probes(&cases, a.kind)?)?;
    let scan = scan_heads(&model, &cases)?;
    let selected = select_heads(&scan, a.tau);
    let out = OutDir::create(&a.common.out)?;
    out.write("head_scan.csv", scan.to_csv().as_bytes())?;
    out.json("heads.json", &Selection { tau: a.tau, selected: &selected })?;
    println!("{}", selected.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
    Ok(())
}

#[derive(Args, Debug)]
pub struct SvdReportArgs {
    #[command(flatten)]
    common: Common,
    /// Attack prefixes to analyze.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindFilter,
    #[command(flatten)]
    heads: HeadChoice,
    /// Percentages of singular vectors to keep.
    #[arg(long, default_value = "5,10")]
    top_p: String,
    /// Decoding depths for the success rate.
    #[arg(long, default_value = "5,10,15")]
    topk: String,
}

#[derive(Serialize)]
struct PercentReport {
    p_percent: f64,
    heads: Vec<SignificantVectorReport>,
}

fn reports(
    model: &Model,
    cases: &[ProbeCase],
    heads: &[HeadId],
    p: f64,
) -> anyhow::Result<Vec<SignificantVectorReport>> {
    heads
        .iter()
        .map(|&h| identify_significant_vectors(model, cases, h, p).with_context(|| format!("head {h}")))
        .collect()
}

pub fn svd_report(a: SvdReportArgs) -> anyhow::Result<()> {
    let (model, cases) = load(&a.common)?;
    let top_p: Vec<f64> = io::list(&a.top_p, "top-p")?;
    let topk: Vec<usize> = io::list(&a.topk, "topk")?;
    let cases = probe_cases(&model, &probes(&cases, a.kind)?)?;
    let heads = a.heads.resolve(&model, &cases)?;

    let mut header = vec!["top_p".to_string()];
    header.extend(topk.iter().map(|k| format!("K={k}")));
    let mut all = Vec::new();
    let mut rows = Vec::new();
    if !heads.is_empty() {
        let expansions = par::try_map(&cases, |c| {
            let trace = forward(&model, &c.tokens, c.tokens.len().saturating_sub(1))?;
            heads
                .iter()
                .map(|h| singular_expansion(&model, &trace, h.layer, h.head))
                .collect::<lenskit::Result<Vec<_>>>()
        })?;
        for &p in &top_p {
            let reps = reports(&model, &cases, &heads, p)?;
            let items = cases
                .iter()
                .zip(&expansions)
                .map(|(c, exps)| {
                    let mut z = Vector::zeros(model.config().d_model);
                    for (exp, r) in exps.iter().zip(&reps) {
                        z.axpy(1.0, &combine_vectors(exp, &r.selected)?);
                    }
                    Ok((z, c.original))
                })
                .collect::<lenskit::Result<Vec<_>>>()?;
            let mut row = vec![format!("{p}")];
            for &k in &topk {
                row.push(pct(dsr(&model, &items, k)?));
            }
            rows.push(row);
            all.push(PercentReport { p_percent: p, heads: reps });
        }
    }
    let out = OutDir::create(&a.common.out)?;
    out.json("svd_report.json", &all)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("dsr.csv", &header, &rows)?;
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Scope {
    All,
    Trace,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Attack prefixes to analyze.
    #[arg(long, value_enum, default_value = "all")]
    kind: KindFilter,
    #[command(flatten)]
    heads: HeadChoice,
    /// Percentages of singular vectors to ablate, one row each.
    #[arg(long, default_value = "5,10")]
    top_p: String,
    /// Run a single ablation spec (JSON) instead of the head and top-P rows.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Positions the ablation applies to.
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
}

#[derive(Serialize)]
struct AblationRow {
    ablation: String,
    spec: AblationSpec,
    delta: AblationDelta,
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let (model, cases) = load(&a.common)?;
    let cases = probe_cases(&model, &probes(&cases, a.kind)?)?;
    let scope = match a.scope {
        Scope::All => AblationScope::AllPositions,
        Scope::Trace => AblationScope::TracePosition,
    };
    let mut specs: Vec<(String, AblationSpec)> = Vec::new();
    if let Some(path) = &a.spec {
        let mut spec: AblationSpec = io::json(path)?;
        spec.resolve(&model).with_context(|| format!("checking {}", path.display()))?;
        spec.scope = scope;
        specs.push(("spec".into(), spec));
    } else {
        let top_p: Vec<f64> = io::list(&a.top_p, "top-p")?;
        let heads = a.heads.resolve(&model, &cases)?;
        if !heads.is_empty() {
            specs.push(("heads".into(), AblationSpec { scope, ..AblationSpec::zero_heads(heads.iter().copied()) }));
            for p in top_p {
                let spec = AblationSpec {
                    zeroed_singular_vectors: reports(&model, &cases, &heads, p)?
                        .iter()
                        .map(|r| r.as_ablation())
                        .collect(),
                    scope,
                    ..AblationSpec::default()
                };
                specs.push((format!("top-{p}%"), spec));
            }
        }
    }
    let rows = specs
        .into_iter()
        .map(|(ablation, spec)| {
            let delta = ablation_delta(&model, &cases, &spec)?;
            Ok(AblationRow { ablation, spec, delta })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let d = &r.delta;
            vec![
                r.ablation.clone(),
                pct(d.original_without),
                pct(d.original_with),
                pct(d.original_drop),
                pct(d.new_without),
                pct(d.new_with),
                pct(d.new_rise),
                d.cases.to_string(),
            ]
        })
        .collect();
    let out = OutDir::create(&a.common.out)?;
    out.json("ablation.json", &rows)?;
    out.csv(
        "ablation.csv",
        &["ablation", "p_o_without", "p_o_with", "delta_p_o", "p_new_without", "p_new_with", "delta_p_new", "cases"],
        &table,
    )?;
    Ok(())
}
