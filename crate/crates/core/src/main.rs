use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ngt::harness::{self, ExperimentConfig, Profile};

#[derive(Parser)]
#[command(name = "ngt", version, about = "Neuromodulation-gated transformer lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key=value experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this profile's defaults (ignored with --config; use `profile = ...` there)
    #[arg(long)]
    profile: Option<String>,
    /// Run only this seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write gate tensors of the final validation pass
    #[arg(long)]
    dump_gates: bool,
    /// Override a config key, e.g. --set epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.profile) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::for_profile(p.parse::<Profile>()?),
            (None, None) => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.dump_gates |= self.dump_gates;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant for every seed
    Train(RunArgs),
    /// Train all three variants and compare them
    Ablation(RunArgs),
    /// Neuromodulated gating at the start and end insertion positions
    Sweep(RunArgs),
    /// Parameter counts of the three variants
    Paramcount(RunArgs),
    /// Finite-difference gradient check of each variant
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean/std report from a summary or per-run CSV
    Aggregate { csv: PathBuf },
    /// Rebuild the report from the artifacts of an output directory
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => print_experiment(harness::cmd_train(&args.load()?)?)?,
        Command::Ablation(args) => print_experiment(harness::cmd_ablation(&args.load()?)?)?,
        Command::Sweep(args) => print_experiment(harness::cmd_sweep_positions(&args.load()?)?)?,
        Command::Paramcount(args) => print!("{}", harness::cmd_paramcount(&args.load()?)?),
        Command::Gradcheck { seed } => {
            let (text, passed) = harness::cmd_gradcheck(seed)?;
            print!("{text}");
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Aggregate { csv } => {
            let report = harness::cmd_aggregate(&csv)?;
            print!("{}\n{}", report.to_csv()?, report.to_table()?);
        }
        Command::Report { out } => {
            let report = harness::cmd_report(&out)?;
            if report.is_empty() {
                bail!("no run in {} has a completed epoch", out.display());
            }
            print!("{}", report.to_table()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_experiment(exp: harness::Experiment) -> Result<()> {
    print!("{}", exp.render()?);
    println!("artifacts: {}", exp.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
