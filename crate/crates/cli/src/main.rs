//! Command-line front end: simulate, sweep, synth-trace, verify.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 validation failure,
//! 3 verification failure. The command layer is single threaded; batch
//! parallelism happens inside the simulator and is capped by the
//! `WDMOE_THREADS` environment variable.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use wdmoe_core::simulator::{run, sweep_bandwidth, LatencyReport};
use wdmoe_core::trace::{synth_trace, write_trace};
use wdmoe_core::verify::{run_verification, Sabotage, VerifyConfig};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "wdmoe",
    version,
    about = "Latency simulator and optimizer for wireless distributed mixture-of-experts inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy on one shared trace and channel draw;
    /// writes report.json and summary.csv.
    Simulate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Output directory (default: config's out_dir, then ./out).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Rerun the config across a range of total bandwidths; writes sweep.csv.
    Sweep {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Lowest total bandwidth in Hz.
        #[arg(long, value_name = "HZ")]
        b_min: f64,
        /// Highest total bandwidth in Hz.
        #[arg(long, value_name = "HZ")]
        b_max: f64,
        /// Number of evenly spaced bandwidth points.
        #[arg(long, value_name = "N")]
        points: usize,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Write a synthetic gating trace file.
    SynthTrace {
        #[arg(long)]
        seed: u64,
        /// Mixture-of-experts blocks in the trace.
        #[arg(long)]
        blocks: usize,
        /// Tokens per block.
        #[arg(long)]
        tokens: usize,
        /// Experts per block.
        #[arg(long)]
        experts: usize,
        /// Concentration of the gating weights; larger is peakier.
        #[arg(long)]
        peakedness: f64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Check the optimizers against brute-force oracles and print a
    /// pass/fail table; exits 0 iff every check passes.
    Verify {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Deliberately break one stage to prove the checks catch it.
        #[arg(long, value_enum, value_name = "FAULT")]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    TruncateSolver,
    SkipProjection,
    WrongQuartile,
}

impl From<Fault> for Sabotage {
    fn from(f: Fault) -> Self {
        match f {
            Fault::TruncateSolver => Sabotage::TruncateSolver,
            Fault::SkipProjection => Sabotage::SkipProjection,
            Fault::WrongQuartile => Sabotage::WrongQuartile,
        }
    }
}

/// A command failure bucketed by exit code.
enum Failure {
    /// Bad invocation or unusable config file.
    Usage(anyhow::Error),
    /// The config parsed but the run it describes is invalid or broke.
    Validation(anyhow::Error),
    /// One or more verification checks failed.
    Verification,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Verification => 3,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Validation(e) => eprintln!("error: {e:#}"),
                Failure::Verification => eprintln!("error: verification failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Caps the simulator's batch parallelism when `WDMOE_THREADS` is set.
fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("WDMOE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        usage(anyhow!(
            "WDMOE_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(validation)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out_dir } => cmd_simulate(&config, out_dir),
        Command::Sweep {
            config,
            b_min,
            b_max,
            points,
            out_dir,
        } => cmd_sweep(&config, b_min, b_max, points, out_dir),
        Command::SynthTrace {
            seed,
            blocks,
            tokens,
            experts,
            peakedness,
            out,
        } => cmd_synth_trace(seed, blocks, tokens, experts, peakedness, &out),
        Command::Verify {
            config,
            inject_fault,
        } => cmd_verify(&config, inject_fault),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path).map_err(usage)?;
    cfg.check().map_err(validation)?;
    Ok(cfg)
}

/// Full per-policy reports, as written to report.json.
#[derive(Debug, Serialize, Deserialize)]
struct SimulationArtifact {
    reports: Vec<LatencyReport<f64>>,
}

fn cmd_simulate(config_path: &Path, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config_path)?;
    let trace = cfg.build_trace().map_err(validation)?;
    let out = cfg.resolve_out_dir(out_dir);

    let mut reports = Vec::with_capacity(cfg.policies.len());
    for &policy in &cfg.policies {
        let scenario = cfg.scenario(policy).map_err(validation)?;
        let report = run(&scenario, &trace).map_err(validation)?;
        println!(
            "{:<22} total {:.6e} s   wlr {:.6e}   pairs {}",
            policy.name(),
            report.total_latency_s,
            report.wlr_total,
            report.active_pairs
        );
        reports.push(report);
    }

    ensure_dir(&out)?;
    let report_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&SimulationArtifact {
        reports: reports.clone(),
    })
    .expect("reports serialize");
    fs::write(&report_path, json + "\n")
        .with_context(|| format!("cannot write {}", report_path.display()))
        .map_err(validation)?;

    let summary_path = out.join("summary.csv");
    write_csv(&summary_path, summary_csv(&reports)).map_err(validation)?;

    println!(
        "wrote {} and {}",
        report_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn summary_csv(reports: &[LatencyReport<f64>]) -> String {
    let mut csv = String::from("policy,total_latency_s,wlr_total,active_pairs\r\n");
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{}\r\n",
            r.policy.name(),
            r.total_latency_s,
            r.wlr_total,
            r.active_pairs
        ));
    }
    csv
}

fn cmd_sweep(
    config_path: &Path,
    b_min: f64,
    b_max: f64,
    points: usize,
    out_dir: Option<PathBuf>,
) -> Result<(), Failure> {
    if !(b_min > 0.0 && b_min < b_max) {
        return Err(usage(anyhow!(
            "sweep needs 0 < b-min < b-max, got {b_min} and {b_max}"
        )));
    }
    if points < 2 {
        return Err(usage(anyhow!(
            "sweep needs at least 2 points, got {points}"
        )));
    }
    let cfg = load_config(config_path)?;
    let trace = cfg.build_trace().map_err(validation)?;
    let out = cfg.resolve_out_dir(out_dir);

    let mut csv = String::from("bandwidth_hz,policy,latency_s\r\n");
    for &policy in &cfg.policies {
        let scenario = cfg.scenario(policy).map_err(validation)?;
        let curve = sweep_bandwidth(&scenario, &trace, b_min, b_max, points).map_err(validation)?;
        for point in &curve {
            csv.push_str(&format!(
                "{},{},{}\r\n",
                point.bandwidth_hz,
                policy.name(),
                point.report.total_latency_s
            ));
        }
    }

    ensure_dir(&out)?;
    let sweep_path = out.join("sweep.csv");
    write_csv(&sweep_path, csv).map_err(validation)?;
    println!(
        "wrote {} ({} policies, {points} bandwidth points)",
        sweep_path.display(),
        cfg.policies.len()
    );
    Ok(())
}

fn cmd_synth_trace(
    seed: u64,
    blocks: usize,
    tokens: usize,
    experts: usize,
    peakedness: f64,
    out: &Path,
) -> Result<(), Failure> {
    let trace =
        synth_trace::<f64>(seed, blocks, tokens, experts, peakedness).map_err(validation)?;
    write_trace(&trace, out)
        .with_context(|| format!("cannot write {}", out.display()))
        .map_err(validation)?;
    println!(
        "wrote {} ({blocks} blocks, {tokens} tokens, {experts} experts)",
        out.display()
    );
    Ok(())
}

fn cmd_verify(config_path: &Path, inject_fault: Option<Fault>) -> Result<(), Failure> {
    let cfg = load_config(config_path)?;
    let sabotage = inject_fault.map_or(Sabotage::None, Sabotage::from);
    let verify_cfg = VerifyConfig {
        seed: cfg.seed,
        ..VerifyConfig::default()
    };
    let report = run_verification(&verify_cfg, sabotage).map_err(validation)?;

    println!("{:<34} {:<6} detail", "check", "result");
    for check in &report.checks {
        println!(
            "{:<34} {:<6} {}",
            check.name,
            if check.passed { "pass" } else { "FAIL" },
            check.detail
        );
    }
    if report.all_passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(validation)
}

fn write_csv(path: &Path, contents: String) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}
