// SPDX-License-Identifier: MIT OR Apache-2.0

//! `lenskit`: command-line front end of the toolkit.
//!
//! Exit codes: 0 on success, 1 on an internal failure (including panics and
//! failed writes into an existing output directory), 2 on bad input or usage.

mod cmd;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::io::Internal;

#[derive(Parser, Debug)]
#[command(name = "lenskit", version, about = "Interpretability toolkit for superficial knowledge edits")]
struct Cli {
    /// Worker threads for per-case parallelism (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an attack-probe dataset with the three-step filter.
    ProbeGen(cmd::probe_gen::ProbeGenArgs),
    /// Score an edited model (Eff/Gen/Loc/OM/OP per attack type).
    Eval(cmd::eval::EvalArgs),
    /// Per-layer residual patching from attack probes into clean prompts.
    PatchSweep(cmd::analysis::PatchSweepArgs),
    /// Logit lens over residual, MLP and attention-output vectors.
    LensScan(cmd::analysis::LensScanArgs),
    /// Mean LOPH per head and the heads above tau.
    HeadScan(cmd::analysis::HeadScanArgs),
    /// Top-P singular vectors of selected heads and their decoding success rate.
    SvdReport(cmd::analysis::SvdReportArgs),
    /// Answer probabilities before and after head or singular-vector ablation.
    Ablate(cmd::analysis::AblateArgs),
    /// Rejection/leak classification and head analysis of an unlearned model.
    UnlearnScan(cmd::unlearn::UnlearnArgs),
    /// Apply a rank-one weight delta and write the edited manifest.
    EditInject(cmd::toy::EditInjectArgs),
    /// Write a toy model (planted circuit or random weights).
    MakeToy(cmd::toy::MakeToyArgs),
}

/// Flags shared by every command that reads a model and a dataset.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model manifest directory or `manifest.json`.
    #[arg(long)]
    pub model: PathBuf,
    /// JSON Lines input.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindFilter {
    All,
    Wiki,
    Rep,
    Que,
}

fn init_pool(jobs: usize) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| anyhow::anyhow!(Internal(format!("thread pool: {e}"))))?;
    }
    #[cfg(not(feature = "parallel"))]
    if jobs > 1 {
        eprintln!("warning: built without the `parallel` feature; --jobs {jobs} ignored");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_pool(cli.jobs)?;
    match cli.command {
        Command::ProbeGen(a) => cmd::probe_gen::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::PatchSweep(a) => cmd::analysis::patch_sweep(a),
        Command::LensScan(a) => cmd::analysis::lens_scan(a),
        Command::HeadScan(a) => cmd::analysis::head_scan(a),
        Command::SvdReport(a) => cmd::analysis::svd_report(a),
        Command::Ablate(a) => cmd::analysis::ablate(a),
        Command::UnlearnScan(a) => cmd::unlearn::run(a),
        Command::EditInject(a) => cmd::toy::edit_inject(a),
        Command::MakeToy(a) => cmd::toy::make_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| c.is::<Internal>());
            ExitCode::from(if internal { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(1),
    }
}
