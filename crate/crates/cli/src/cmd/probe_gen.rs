// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use lenskit::cache::CACHE_DIR_ENV;
use lenskit::metrics::EditCase;
use lenskit::model::{LanguageModel, Model, WeightDelta};
use lenskit::probes::{construct_dataset, ExternalQuestion, PrefixBuilder, QueTemplates, SummaryCorpus, DEFAULT_REP_M};

use super::{named_path, validate_all};
use crate::io::{self, OutDir};

#[derive(Args, Debug)]
pub struct ProbeGenArgs {
    /// Unedited model used by the first filter.
    #[arg(long)]
    model: PathBuf,
    /// Edited variant as NAME=MANIFEST (repeatable).
    #[arg(long, value_parser = named_path)]
    edited: Vec<(String, PathBuf)>,
    /// Edited variant as NAME=DELTA_JSON applied to --model (repeatable).
    #[arg(long, value_parser = named_path)]
    delta: Vec<(String, PathBuf)>,
    /// Raw edit cases, JSON Lines.
    #[arg(long)]
    dataset: PathBuf,
    /// Entity summaries (JSON object). Defaults to `$LENSKIT_CACHE_DIR/summaries.json`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Question templates per relation (JSON).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Pre-generated questions, JSON Lines.
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Repetitions of the original answer in a Rep prefix.
    #[arg(long, default_value_t = DEFAULT_REP_M)]
    rep_m: usize,
    /// Greedy decoding length for answer checks.
    #[arg(long, default_value_t = 8)]
    max_new: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

fn corpus(path: Option<&PathBuf>) -> anyhow::Result<SummaryCorpus> {
    if let Some(p) = path {
        return SummaryCorpus::load(p).with_context(|| format!("reading corpus {}", p.display()));
    }
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()) {
        let p = PathBuf::from(dir).join("summaries.json");
        if p.exists() {
            return SummaryCorpus::load(&p).with_context(|| format!("reading corpus {}", p.display()));
        }
    }
    Ok(SummaryCorpus::default())
}

pub fn run(a: ProbeGenArgs) -> anyhow::Result<()> {
    if a.edited.is_empty() && a.delta.is_empty() {
        bail!("probe-gen needs at least one --edited or --delta variant");
    }
    if a.rep_m == 0 {
        bail!("--rep-m must be at least 1");
    }
    let raw: Vec<EditCase> = io::records(&a.dataset)?;
    validate_all(&a.dataset, &raw, EditCase::validate)?;
    let base = io::model(&a.model)?;
    let mut variants: Vec<(String, Model)> = Vec::new();
    for (name, path) in &a.edited {
        variants.push((name.clone(), io::model(path)?));
    }
    for (name, path) in &a.delta {
        let delta: WeightDelta = io::json(path)?;
        let edited = base.apply_weight_delta(&delta).with_context(|| format!("applying {}", path.display()))?;
        variants.push((name.clone(), edited));
    }
    let corpus = corpus(a.corpus.as_ref())?;
    let mut builder = PrefixBuilder::new(&corpus);
    builder.rep_m = a.rep_m;
    builder.max_new_tokens = a.max_new;
    if let Some(p) = &a.templates {
        builder.templates = QueTemplates::load(p).with_context(|| format!("reading {}", p.display()))?;
    }
    if let Some(p) = &a.questions {
        let questions: Vec<ExternalQuestion> = io::records(p)?;
        builder = builder.with_questions(questions);
    }

    let edited: Vec<(&str, &dyn LanguageModel)> =
        variants.iter().map(|(n, m)| (n.as_str(), m as &dyn LanguageModel)).collect();
    let ds = construct_dataset(&base, &edited, &raw, &builder)?;
    if ds.log.wiki_unavailable > 0 {
        eprintln!("warning: no summary for {} case(s); Wiki prefix skipped", ds.log.wiki_unavailable);
    }

    let out = OutDir::create(&a.out)?;
    out.jsonl("dataset.jsonl", &ds.cases)?;
    out.json("construction_log.json", &ds.log)?;
    let row = |name: &str, c: &lenskit::probes::KindCounts| {
        vec![name.to_string(), c.wiki.to_string(), c.rep.to_string(), c.que.to_string(), c.total().to_string()]
    };
    let mut rows: Vec<Vec<String>> = ds.log.step2.iter().map(|v| row(&v.name, &v.probes)).collect();
    rows.push(row("retained", &ds.log.step3_probes));
    out.csv("construction_log.csv", &["variant", "Wiki", "Rep", "Que", "Total"], &rows)?;
    println!("{}", ds.log.summary_row("retained"));
    Ok(())
}
