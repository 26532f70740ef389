// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::Args;
use lenskit::unlearning::{
    classify_responses, unlearning_ablation_table, unlearning_head_scan, UnlearnCase, UNLEARNING_THRESHOLD,
};

use super::validate_all;
use crate::io::{self, OutDir};
use crate::Common;

#[derive(Args, Debug)]
pub struct UnlearnArgs {
    #[command(flatten)]
    common: Common,
    /// Percentages of singular vectors to ablate, one column each.
    #[arg(long, default_value = "5,10")]
    top_p: String,
    /// Greedy decoding length for response classification.
    #[arg(long, default_value_t = 8)]
    max_new: usize,
}

#[derive(serde::Serialize)]
struct Selection<'a> {
    threshold: f64,
    selected: &'a [lenskit::interventions::HeadId],
}

pub fn run(a: UnlearnArgs) -> anyhow::Result<()> {
    let cases: Vec<UnlearnCase> = io::records(&a.common.dataset)?;
    validate_all(&a.common.dataset, &cases, UnlearnCase::validate)?;
    let top_p: Vec<f64> = io::list(&a.top_p, "top-p")?;
    let model = io::model(&a.common.model)?;

    let responses = classify_responses(&model, &cases, a.max_new)?;
    let probes = cases.iter().map(|c| c.probe_case(&model)).collect::<lenskit::Result<Vec<_>>>()?;
    let (scan, heads) = unlearning_head_scan(&model, &probes)?;
    if heads.is_empty() {
        eprintln!("warning: no head above {UNLEARNING_THRESHOLD}; ablation columns equal the baseline");
    }
    let table = unlearning_ablation_table(&model, &probes, &heads, &top_p)?;

    let out = OutDir::create(&a.common.out)?;
    out.jsonl("responses.jsonl", &responses)?;
    out.write("head_scan.csv", scan.to_csv().as_bytes())?;
    out.json("heads.json", &Selection { threshold: UNLEARNING_THRESHOLD, selected: &heads })?;
    out.json("unlearning.json", &table)?;
    out.write("unlearning.csv", table.to_csv().as_bytes())?;
    let rejected = responses.iter().filter(|r| r.rejected).count();
    let leaked = responses.iter().filter(|r| r.leaks_original).count();
    println!("{rejected} rejected, {leaked} leaked, {} probes", responses.len());
    Ok(())
}
