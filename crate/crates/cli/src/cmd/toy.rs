// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use lenskit::model::{save_model, Dtype, WeightDelta};
use lenskit::probes::PrefixBuilder;
use lenskit::toy::{planted_circuit, random_model, PlantedParams, ToyShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::{self, Internal, OutDir};

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for Dtype {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Args, Debug)]
pub struct EditInjectArgs {
    /// Base model manifest directory or `manifest.json`.
    #[arg(long)]
    model: PathBuf,
    /// Rank-one delta `{"target", "u", "v"}` (JSON).
    #[arg(long)]
    delta: PathBuf,
    /// Output manifest directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Precision,
}

fn save(model: &lenskit::model::Model, dir: &std::path::Path, dtype: Dtype) -> anyhow::Result<()> {
    save_model(model, dir, dtype).map_err(|e| Internal(format!("writing {}: {e}", dir.display())))?;
    Ok(())
}

pub fn edit_inject(a: EditInjectArgs) -> anyhow::Result<()> {
    let model = io::model(&a.model)?;
    let delta: WeightDelta = io::json(&a.delta)?;
    let edited = model.apply_weight_delta(&delta).with_context(|| format!("applying {}", a.delta.display()))?;
    let out = OutDir::create(&a.out)?;
    save(&edited, out.path(), a.dtype.into())?;
    println!("{}", edited.fingerprint());
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ToyKind {
    /// Planted superficial-edit circuit with its edit case and corpus.
    Planted,
    /// Random weights, no tokenizer.
    Random,
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long, value_enum, default_value = "planted")]
    kind: ToyKind,
    /// Weight seed (planted default 7, random default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

pub fn make_toy(a: MakeToyArgs) -> anyhow::Result<()> {
    let out = OutDir::create(&a.out)?;
    match a.kind {
        ToyKind::Planted => {
            let mut params = PlantedParams::default();
            params.seed = a.seed.unwrap_or(params.seed);
            let mut pc = planted_circuit(&params)?;
            save(&pc.base, &out.path().join("base"), Dtype::F64)?;
            save(&pc.edited, &out.path().join("edited"), Dtype::F64)?;
            out.json("delta.json", &pc.delta)?;
            out.json("corpus.json", &pc.corpus)?;
            out.jsonl("raw.jsonl", std::slice::from_ref(&pc.case))?;
            let prefixes = PrefixBuilder::new(&pc.corpus).prefixes(&pc.case)?;
            pc.case.attack_prefixes = prefixes.into_iter().map(|(k, p)| (k, p.text)).collect();
            out.jsonl("dataset.jsonl", std::slice::from_ref(&pc.case))?;
        }
        ToyKind::Random => {
            let seed = a.seed.unwrap_or(0);
            let shape = ToyShape::sample(&mut ChaCha8Rng::seed_from_u64(seed));
            save(&random_model(seed, &shape)?, &out.path().join("model"), Dtype::F64)?;
        }
    }
    Ok(())
}
