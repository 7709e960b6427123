//! `archsec`: run security experiments over searched and hand-designed
//! architectures from a JSON spec, then report, plot, and verify the results.

use anyhow::{bail, Context, Result};
use archsec_core::harness::{
    plots::emit_all_plots, report::emit_report, run_experiment_up_to, verify_run, ExperimentSpec,
    ResultStore, StageRank,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "archsec",
    version,
    about = "Security evaluation harness for searched neural architectures"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides the spec's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the spec's architecture search stages.
    Search(RunArgs),
    /// Run stages up to and including model training.
    Train(RunArgs),
    /// Run stages up to and including attacks.
    Attack(RunArgs),
    /// Run every stage, including diagnostics probes.
    Diagnose(RunArgs),
    /// Run everything (cached), then emit the summary tables.
    Report(RunArgs),
    /// Run everything (cached), then render all plots.
    Plot(RunArgs),
    /// Recompute aggregates, tables, and plot data; fail on any mismatch.
    Verify(RunArgs),
}

fn load(args: &RunArgs) -> Result<(ExperimentSpec, PathBuf)> {
    let spec = ExperimentSpec::from_file(&args.spec)
        .with_context(|| format!("reading spec {}", args.spec.display()))?;
    let out = match args.out.clone().or_else(|| spec.out_dir.clone()) {
        Some(p) => p,
        None => bail!("no output directory: pass --out or set out_dir in the spec"),
    };
    Ok((spec, out))
}

fn run_to(args: &RunArgs, rank: StageRank) -> Result<ResultStore> {
    let (spec, out) = load(args)?;
    let before = ResultStore::open(&out, &spec.run_id())?.entries.len();
    let store = run_experiment_up_to(&spec, &out, rank)?;
    let ran = store.entries.len() - before;
    println!(
        "run {} — {} stage(s) executed, {} total in store at {}",
        store.run_id,
        ran,
        store.latest_entries().len(),
        out.display()
    );
    for entry in store.latest_entries() {
        println!("  {:<9} {} ({} artifacts)", entry.kind, entry.stage_id, entry.artifacts.len());
    }
    Ok(store)
}

fn main() -> Result<()> {
    match &Cli::parse().cmd {
        Cmd::Search(a) => {
            run_to(a, StageRank::Search)?;
        }
        Cmd::Train(a) => {
            run_to(a, StageRank::Train)?;
        }
        Cmd::Attack(a) => {
            run_to(a, StageRank::Attack)?;
        }
        Cmd::Diagnose(a) => {
            run_to(a, StageRank::Diagnose)?;
        }
        Cmd::Report(a) => {
            let store = run_to(a, StageRank::Diagnose)?;
            let files = emit_report(&store)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            println!("\n{}", std::fs::read_to_string(&files[0])?);
        }
        Cmd::Plot(a) => {
            let store = run_to(a, StageRank::Diagnose)?;
            let out = emit_all_plots(&store)?;
            for f in &out.written {
                println!("wrote {}", f.display());
            }
            for s in &out.skipped {
                println!("skipped {s}");
            }
        }
        Cmd::Verify(a) => {
            let (spec, out) = load(a)?;
            let report = verify_run(&spec, &out)?;
            for c in &report.checks {
                if c.ok {
                    println!("ok   {}", c.name);
                } else {
                    println!("FAIL {} — {}", c.name, c.detail);
                }
            }
            let failed = report.checks.iter().filter(|c| !c.ok).count();
            if !report.ok() {
                bail!("verification failed: {failed} of {} checks", report.checks.len());
            }
            println!("verified: all {} checks passed", report.checks.len());
        }
    }
    Ok(())
}
