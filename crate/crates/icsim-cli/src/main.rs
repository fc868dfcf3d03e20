//! Command-line front end: runs scenarios, compares deciders, sweeps
//! synthetic continuum sizes, and re-checks written artifacts.
//!
//! Exit codes: 0 on success, 1 when the scenario cannot be loaded or fails
//! validation, 2 when anything goes wrong after that.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icsim_core::decision::prompt::FewShotLibrary;
use icsim_core::harness::{self, HarnessError};
use icsim_core::metrics::{linear_r2, RunSummary};
use icsim_core::scenario::Scenario;

#[derive(Parser)]
#[command(name = "icsim", version, about = "Edge-cloud continuum simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario under one decider and write its artifacts.
    Run {
        /// Scenario YAML file.
        scenario: PathBuf,
        /// llm | fixture:<file> | heuristic | hpa:<target>
        #[arg(long)]
        decider: String,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the simulated horizon in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Directory the artifacts are written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several deciders against the same scenario, side by side.
    Compare {
        /// Scenario YAML file.
        scenario: PathBuf,
        /// Comma-separated decider specs, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        deciders: Vec<String>,
        /// Directory that receives one artifact set per decider.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure decision-prompt size across synthetic continuum sizes.
    Scale {
        /// Comma-separated node counts.
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<usize>,
        /// Directory the sweep table is written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute every summary figure of a finished run from its traces.
    Verify {
        /// Artifact directory of an earlier `run`.
        dir: PathBuf,
    },
}

/// An error plus the process exit code it maps to.
struct Failure(u8, anyhow::Error);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Failure {
        Failure(2, e.into())
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_file(path).map_err(|e| {
        Failure(1, anyhow::Error::from(e).context(format!("scenario {}", path.display())))
    })
}

/// Clips or extends the phase plan so the run lasts exactly `want` seconds.
fn override_duration(sc: &mut Scenario, want: f64) -> Result<(), Failure> {
    if !(want > 0.0) {
        return Err(Failure(1, anyhow::anyhow!("--duration must be positive, got {want}")));
    }
    let total = sc.duration();
    if want >= total {
        sc.load.phases.last_mut().expect("validated load has phases").duration_s +=
            want - total;
        return Ok(());
    }
    let mut acc = 0.0;
    for (i, phase) in sc.load.phases.iter_mut().enumerate() {
        if acc + phase.duration_s >= want {
            phase.duration_s = want - acc;
            let keep = if phase.duration_s > 0.0 { i + 1 } else { i };
            sc.load.phases.truncate(keep);
            return Ok(());
        }
        acc += phase.duration_s;
    }
    unreachable!("want < total is inside the phase plan");
}

fn print_summary(s: &RunSummary, out: &Path) {
    println!(
        "{} under {} (seed {}): {} requests, satisfaction {:.3}%, \
         {} violations, {} actions",
        s.scenario,
        s.decider,
        s.seed,
        s.requests_completed,
        s.intent_satisfaction_pct,
        s.violations,
        s.actions_applied,
    );
    println!("artifacts: {}", out.display());
}

fn cmd_run(
    scenario: &Path,
    decider: &str,
    seed: Option<u64>,
    duration: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let mut sc = load_scenario(scenario)?;
    if let Some(n) = seed {
        sc.seed = n;
    }
    if let Some(s) = duration {
        override_duration(&mut sc, s)?;
    }
    let summary = harness::run_experiment(&sc, decider, out, FewShotLibrary::shipped())?;
    print_summary(&summary, out);
    Ok(())
}

fn cmd_compare(scenario: &Path, deciders: &[String], out: &Path) -> Result<(), Failure> {
    if deciders.len() < 2 {
        return Err(Failure(1, anyhow::anyhow!("compare needs at least two deciders")));
    }
    let sc = load_scenario(scenario)?;
    let rows = harness::compare(&sc, deciders, out, &FewShotLibrary::shipped())?;

    println!(
        "{:<12} {:>12} {:>10} {:>9} {:>9} {:>8} {:>9} {:>9} {:>10}",
        "decider",
        "satisfaction",
        "violated_s",
        "decisions",
        "fallbacks",
        "actions",
        "mean_rt",
        "p95_rt",
        "tokens_in"
    );
    for (_, s) in &rows {
        println!(
            "{:<12} {:>11.3}% {:>10.1} {:>9} {:>9} {:>8} {:>9.4} {:>9.4} {:>10}",
            s.decider,
            s.intent_satisfaction_pct,
            s.violated_time_s,
            s.decisions,
            s.fallbacks,
            s.actions_applied,
            s.response_time.mean_s,
            s.response_time.p95_s,
            s.token_in_total,
        );
    }
    println!("artifacts: {}", out.display());
    Ok(())
}

fn cmd_scale(nodes: &[usize], out: &Path) -> Result<(), Failure> {
    let rows = harness::scalability_study(nodes);
    std::fs::create_dir_all(out).map_err(|e| Failure(2, e.into()))?;
    let path = out.join("tokens.csv");
    let mut text = String::from("nodes,input_tokens\n");
    for (n, tokens) in &rows {
        text.push_str(&format!("{n},{tokens}\n"));
        println!("{n:>6} nodes -> {tokens} input tokens");
    }
    std::fs::write(&path, text).map_err(|e| Failure(2, e.into()))?;
    if rows.len() >= 2 {
        let points: Vec<(f64, f64)> =
            rows.iter().map(|&(n, t)| (n as f64, t as f64)).collect();
        println!("linear fit r^2 = {:.4}", linear_r2(&points));
    }
    println!("table: {}", path.display());
    Ok(())
}

fn cmd_verify(dir: &Path) -> Result<(), Failure> {
    let mismatches = harness::verify_dir(dir)?;
    if mismatches.is_empty() {
        println!("ok: every summary figure matches the trace files");
        Ok(())
    } else {
        for m in &mismatches {
            eprintln!("mismatch: {m}");
        }
        Err(Failure(
            2,
            anyhow::anyhow!("{} figure(s) disagree with the traces", mismatches.len()),
        ))
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run { scenario, decider, seed, duration, out } => {
            cmd_run(&scenario, &decider, seed, duration, &out)
        }
        Cmd::Compare { scenario, deciders, out } => cmd_compare(&scenario, &deciders, &out),
        Cmd::Scale { nodes, out } => cmd_scale(&nodes, &out),
        Cmd::Verify { dir } => cmd_verify(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
