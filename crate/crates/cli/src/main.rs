use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use headpipe::bench::{
    profile_devices, report, report_csv, run_worker, train_coordinator, train_local, write_outputs, Arm,
    BenchError, Role, RunConfig, RunOutcome,
};
use headpipe::lanes::ProfileTable;
use headpipe::scheduler::{allocate, default_tolerances, TimeTable};

#[derive(Parser)]
#[command(name = "headpipe", version, about = "Head-parallel pipeline training on simulated lanes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile every lane of every configured device.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `profile_device{d}.json` (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split K heads across lanes from a profile table.
    Allocate {
        /// Profile table JSON written by `profile`.
        #[arg(long)]
        table: PathBuf,
        /// Number of heads (defaults to the table's K).
        #[arg(long)]
        heads: Option<usize>,
        /// Tolerance in ms (defaults to 5% of the best single-lane time).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Search step in ms (defaults to epsilon / 10).
        #[arg(long)]
        sigma: Option<f64>,
        /// Plan JSON path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one arm.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "confidant")]
        arm: Arm,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's role.
        #[arg(long, value_parser = parse_role)]
        role: Option<Role>,
        /// Stage index served by a worker.
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Compare metrics files; the first one is the baseline.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// CSV path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_role(s: &str) -> Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown role {s:?} (coordinator, worker, all-in-one)"))
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn input_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("write {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_profile(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config, seed, out)?;
    let tables = profile_devices(&cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("create {}", cfg.output_dir.display()))?;
    for (d, table) in tables.iter().enumerate() {
        let path = cfg.output_dir.join(format!("profile_device{d}.json"));
        std::fs::write(&path, table.to_json()).with_context(|| format!("write {}", path.display()))?;
        println!("device {d} ({}): {} lanes -> {}", cfg.devices[d].name, table.lanes.len(), path.display());
        for lane in &table.lanes {
            let k = cfg.encoder.heads;
            let row: Vec<String> = (1..=k)
                .filter_map(|k| table.time(lane.id, k))
                .map(|t| format!("{t:.2}"))
                .collect();
            println!("  lane {} {:<8} T[1..{k}] ms: {}", lane.id, lane.name, row.join(" "));
        }
    }
    Ok(())
}

fn cmd_allocate(
    table: &Path,
    heads: Option<usize>,
    epsilon: Option<f64>,
    sigma: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(table)
        .with_context(|| format!("read {}", table.display()))
        .map_err(input_error)?;
    let profile = ProfileTable::from_json(&text)
        .with_context(|| format!("parse profile table {}", table.display()))
        .map_err(input_error)?;
    let k = heads.unwrap_or(profile.heads);
    let tt = TimeTable::from_profile(&profile, k).map_err(|e| input_error(e.into()))?;
    let (default_eps, _) = default_tolerances(&tt, k);
    let eps = epsilon.unwrap_or(default_eps);
    let sigma = sigma.unwrap_or(eps / 10.0);
    if !(eps > 0.0 && sigma > 0.0) {
        return Err(input_error(anyhow::anyhow!("epsilon and sigma must be positive")));
    }
    let plan = allocate(&tt, k, eps, sigma).map_err(|e| input_error(e.into()))?;
    eprintln!(
        "{k} heads: {:?}, makespan {:.3} ms",
        plan.entries.iter().map(|e| (e.lane, e.k)).collect::<Vec<_>>(),
        plan.makespan_ms
    );
    write_text(out.as_deref(), &(plan.to_json() + "\n"))
}

fn print_summary(out: &RunOutcome) {
    let s = &out.summary;
    println!("arm {} on {} stage(s), ranges {:?}", s.arm, s.stages, s.ranges);
    println!(
        "steady-state latency {:.3} ms/batch (predicted {:.3})",
        s.steady_latency_ms, s.predicted_latency_ms
    );
    println!(
        "eval loss {:.4} -> {:.4}, accuracy {:.3} -> {:.3}",
        s.initial_eval.loss, s.final_eval.loss, s.initial_eval.accuracy, s.final_eval.accuracy
    );
    for (m, peak) in s.memory.iter().zip(&s.tracked_peak_bytes) {
        println!("stage {}: peak {} B tracked, {} B analytic", m.stage, peak, m.total_bytes);
    }
}

fn cmd_train(
    config: &Path,
    arm: Arm,
    seed: Option<u64>,
    out: Option<PathBuf>,
    role: Option<Role>,
    stage: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config, seed, out)?;
    if let Some(r) = role {
        cfg.role = r;
    }
    let outcome = match cfg.role {
        Role::AllInOne => train_local(&cfg, arm)?,
        Role::Coordinator => train_coordinator(&cfg, arm)?,
        Role::Worker => {
            let stage = stage.ok_or_else(|| input_error(anyhow::anyhow!("a worker needs --stage")))?;
            run_worker(&cfg, arm, stage)?;
            println!("stage {stage} finished");
            return Ok(());
        }
    };
    write_outputs(&cfg.output_dir, &outcome)?;
    print_summary(&outcome);
    println!("outputs written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_report(metrics: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let rows = report(metrics)?;
    write_text(out.as_deref(), &report_csv(&rows))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile { config, seed, out } => cmd_profile(&config, seed, out),
        Command::Allocate {
            table,
            heads,
            epsilon,
            sigma,
            out,
        } => cmd_allocate(&table, heads, epsilon, sigma, out),
        Command::Train {
            config,
            arm,
            seed,
            out,
            role,
            stage,
        } => cmd_train(&config, arm, seed, out, role, stage),
        Command::Report { metrics, out } => cmd_report(&metrics, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("exit code {}", f.code);
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
