use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bond_core::harness::pareto::save_points;
use bond_core::harness::{
    generate_scenario, load_sweep, pareto_from_files, run_experiment, run_many,
};
use bond_core::harness::{ExperimentConfig, Manifest, ScenarioParams};
use bond_core::verify;
use bond_core::Seed;

/// Worker threads for `run` and `sweep`.
const WORKERS_ENV: &str = "BOND_WORKERS";

#[derive(Parser)]
#[command(
    name = "bond",
    version,
    about = "Best-of-N distillation experiments on enumerable toy policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of one experiment config.
    Run { config: PathBuf },
    /// Run every *.toml config in a directory.
    Sweep { dir: PathBuf },
    /// Mark the reward/KL Pareto front over metrics CSVs.
    Pareto {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite; exits nonzero if any check fails.
    Verify {
        #[arg(long, default_value_t = verify::DEFAULT_SEED.0)]
        seed: u64,
    },
    /// Write a scenario's reward table and reference policy.
    GenScenario {
        name: String,
        /// Generator parameters as key=value.
        params: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => bail!("{WORKERS_ENV}: {e}"),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("{WORKERS_ENV} must be a positive integer, got {v:?}"),
        },
    }
}

fn report(manifest: &Manifest, output: &Path) {
    println!(
        "{} on {} ({} seeds) -> {}",
        manifest.algorithm,
        manifest.scenario,
        manifest.runs.len(),
        output.display()
    );
    for r in &manifest.runs {
        println!("  seed {}: {} rows in {}", r.seed, r.rows, r.metrics);
    }
}

/// `key=value` with integer, float and bool values recognized; anything else is a string.
fn parse_param(arg: &str) -> Result<(String, toml::Value)> {
    let Some((key, raw)) = arg.split_once('=') else {
        bail!("expected key=value, got {arg:?}");
    };
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        bail!("empty key in {arg:?}");
    }
    let value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    Ok((key.to_string(), value))
}

fn gen_scenario(name: &str, params: &[String], seed: u64, out: &Path) -> Result<()> {
    let mut table = toml::Table::new();
    for p in params {
        let (k, v) = parse_param(p)?;
        if table.insert(k.clone(), v).is_some() {
            bail!("parameter {k:?} given twice");
        }
    }
    let cwd = std::env::current_dir().context("reading the working directory")?;
    let params = ScenarioParams::from_table(name, &table, "", &cwd)?;
    let scenario = generate_scenario(name, &params, Seed(seed))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    scenario.save(out)?;
    println!(
        "{name}: {} prompts, {} outcomes each -> {}",
        scenario.prompts.len(),
        scenario.prompts.at(0).num_outcomes(),
        out.display()
    );
    Ok(())
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = run_experiment(&cfg, workers()?)?;
            report(&manifest, &cfg.output);
        }
        Command::Sweep { dir } => {
            let configs = load_sweep(&dir)?;
            let manifests = run_many(&configs, workers()?)?;
            for (m, c) in manifests.iter().zip(&configs) {
                report(m, &c.output);
            }
        }
        Command::Pareto { inputs, out } => {
            let points = pareto_from_files(&inputs)?;
            save_points(&points, &out)?;
            let front = points.iter().filter(|p| p.non_dominated).count();
            println!(
                "{} points, {front} non-dominated -> {}",
                points.len(),
                out.display()
            );
        }
        Command::Verify { seed } => {
            let reports = verify::run_all(Seed(seed));
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("verify: {failed} of {} checks failed", reports.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("verify: all {} checks passed", reports.len());
        }
        Command::GenScenario {
            name,
            params,
            seed,
            out,
        } => gen_scenario(&name, &params, seed, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_infer_types() {
        assert_eq!(parse_param("prompts=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(
            parse_param("peak_ceiling = 0.1").unwrap().1,
            toml::Value::Float(0.1)
        );
        assert_eq!(parse_param("x=true").unwrap().1, toml::Value::Boolean(true));
        assert_eq!(
            parse_param("rewards=r.csv").unwrap().1,
            toml::Value::String("r.csv".into())
        );
        assert!(parse_param("novalue").is_err());
        assert!(parse_param("=1").is_err());
    }
}
