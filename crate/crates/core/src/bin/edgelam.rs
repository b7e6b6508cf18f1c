use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edgelam::app::{self, run::out_dir, AppError, Command, Scenario};

#[derive(Parser)]
#[command(name = "edgelam", version, about = "Edge large-model simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to $EDGELAM_OUT, then the scenario.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `dotted.key=value` override, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split federated fine-tuning with LoRA adapters.
    Fedft(Common),
    /// Tensor-parallel split GEMM.
    Tparallel(Common),
    /// Microservice deployment.
    MicroDeploy(Common),
    /// Robust routing over replicated services.
    MicroOrchestrate(Common),
    /// Online migration for a moving user.
    MicroMigrate(Common),
    /// Federated channel prediction case study.
    Chanpred(Common),
    /// Validate a scenario without writing anything.
    Verify(Common),
    /// Every applicable subcommand over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds as a comma list and/or `a..b` ranges (end exclusive).
        #[arg(long, default_value = "0..4")]
        seeds: String,
        /// Worker threads; 0 for one per core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn load(c: &Common) -> Result<Scenario, AppError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| AppError::Io { path: c.config.display().to_string(), message: e.to_string() })?;
    let mut set = c.set.clone();
    if let Some(s) = c.seed {
        set.push(format!("seed={s}"));
    }
    Scenario::parse(&text, &set)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, AppError> {
    let bad = || AppError::ConfigParse { message: format!("bad seed list `{spec}`"), key: None, suggestion: None };
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn run_one(cmd: Command, c: &Common) -> Result<serde_json::Value, AppError> {
    let sc = load(c)?;
    let artifacts = app::run_command(cmd, &sc)?;
    let dir = out_dir(c.out.as_deref(), &sc);
    app::write_artifacts(&dir, &artifacts)?;
    Ok(serde_json::json!({
        "command": cmd.name(),
        "seed": sc.seed,
        "out": dir,
        "files": artifacts.iter().map(|a| &a.name).collect::<Vec<_>>(),
    }))
}

fn dispatch(cli: Cli) -> Result<(serde_json::Value, bool), AppError> {
    let cmd = match &cli.cmd {
        Cmd::Fedft(c) => (Command::Fedft, c),
        Cmd::Tparallel(c) => (Command::Tparallel, c),
        Cmd::MicroDeploy(c) => (Command::MicroDeploy, c),
        Cmd::MicroOrchestrate(c) => (Command::MicroOrchestrate, c),
        Cmd::MicroMigrate(c) => (Command::MicroMigrate, c),
        Cmd::Chanpred(c) => (Command::Chanpred, c),
        Cmd::Verify(c) => {
            let report = app::verify(&load(c)?);
            let ok = report.is_empty();
            return Ok((serde_json::to_value(report).unwrap_or_default(), ok));
        }
        Cmd::Sweep { common, seeds, jobs } => {
            let sc = load(common)?;
            let root = out_dir(common.out.as_deref(), &sc);
            let entries = app::run_sweep(&sc, &parse_seeds(seeds)?, Path::new(&root), *jobs)?;
            return Ok((serde_json::json!({ "out": root, "runs": entries }), true));
        }
    };
    Ok((run_one(cmd.0, cmd.1)?, true))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok((v, ok)) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
