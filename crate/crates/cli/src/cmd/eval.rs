// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::Args;
use lenskit::metrics::{evaluate_dataset, EditCase, EvalSettings, MetricDirection};

use super::validate_all;
use crate::io::{self, OutDir};
use crate::Common;

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Row label in the score card (defaults to the model directory name).
    #[arg(long)]
    name: Option<String>,
    /// Use the literal reversed comparison directions for Eff, Gen and Loc.
    #[arg(long)]
    strict_appendix_b: bool,
    /// Greedy decoding length for answer checks.
    #[arg(long, default_value_t = 8)]
    max_new: usize,
}

pub fn run(a: EvalArgs) -> anyhow::Result<()> {
    let cases: Vec<EditCase> = io::records(&a.common.dataset)?;
    validate_all(&a.common.dataset, &cases, EditCase::validate)?;
    let model = io::model(&a.common.model)?;
    let name = a.name.clone().unwrap_or_else(|| {
        let p = a.common.model.canonicalize().unwrap_or_else(|_| a.common.model.clone());
        let p = if p.is_file() { p.parent().map(|d| d.to_path_buf()).unwrap_or(p) } else { p };
        p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    let settings = EvalSettings {
        max_new_tokens: a.max_new,
        direction: if a.strict_appendix_b { MetricDirection::StrictAppendixB } else { MetricDirection::Conventional },
    };
    let (card, outcomes) = evaluate_dataset(&model, &name, &cases, &settings)?;
    let out = OutDir::create(&a.common.out)?;
    out.json("scorecard.json", &card)?;
    out.write("scorecard.csv", card.to_csv().as_bytes())?;
    out.jsonl("outcomes.jsonl", &outcomes)?;
    println!("superficial: {} of {} cases", card.superficial_cases, card.total_cases);
    Ok(())
}
