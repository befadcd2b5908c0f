//! Seeded experiment execution, sweeps and metric files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::ReinforceTrainer;
use crate::bond::BondTrainer;
use crate::error::{BondError, Result};
use crate::harness::config::{AlgorithmConfig, ExperimentConfig};
use crate::harness::scenario::{generate_scenario, Scenario, TrainablePolicy};
use crate::jbond::JBondTrainer;
use crate::metrics::{MetricsRow, METRICS_HEADER};
use crate::policy::{AutoregressivePolicy, CategoricalPolicy, PolicyKind};
use crate::rng::Seed;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Version string recorded in manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub fn metrics_file(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

/// Snapshot file of `role` ("policy" or "anchor") at `step`.
pub fn checkpoint_file(seed: u64, step: u64, role: &str) -> String {
    format!("seed_{seed}_step_{step}_{role}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub scenario_seed: u64,
    pub metrics: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub algorithm: String,
    pub scenario: String,
    pub policy: String,
    pub runs: Vec<RunRecord>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            toml::to_string(self).map_err(|e| BondError::invalid("manifest", e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| BondError::io(&path, e))
    }
}

/// Streams metric rows to a CSV file with the fixed header.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| BondError::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            rows: 0,
        };
        writeln!(w.out, "{METRICS_HEADER}").map_err(|e| BondError::io(&w.path, e))?;
        Ok(w)
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows += 1;
        writeln!(self.out, "{}", row.to_csv_line()).map_err(|e| BondError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| BondError::io(&self.path, e))?;
        Ok(self.rows)
    }
}

/// Scenario used by run seed `seed`.
pub fn scenario_for(config: &ExperimentConfig, seed: u64) -> Result<(Scenario, u64)> {
    let scenario_seed = config.scenario.seed.unwrap_or(seed);
    let s = generate_scenario(
        &config.scenario.name,
        &config.scenario.params,
        Seed(scenario_seed),
    )?;
    Ok((s, scenario_seed))
}

/// Runs one seed of `config`, writing its metrics file (and snapshots when
/// enabled) into the output directory, which must exist.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let (scenario, scenario_seed) = scenario_for(config, seed)?;
    let rows = match config.policy {
        PolicyKind::Categorical => train::<CategoricalPolicy>(config, &scenario, seed)?,
        PolicyKind::Autoregressive => train::<AutoregressivePolicy>(config, &scenario, seed)?,
    };
    Ok(RunRecord {
        seed,
        scenario_seed,
        metrics: metrics_file(seed),
        rows,
    })
}

fn train<P: TrainablePolicy>(
    config: &ExperimentConfig,
    scenario: &Scenario,
    seed: u64,
) -> Result<usize> {
    let prompts = &scenario.prompts;
    let reference = P::from_reference(prompts, &scenario.reference)?;
    let mut writer = MetricsWriter::create(&config.output.join(metrics_file(seed)))?;
    let ckpt_dir = config.output.join(CHECKPOINT_DIR);
    if config.checkpoints {
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| BondError::io(&ckpt_dir, e))?;
    }
    let snapshot = |step: u64, policy: &P, anchor: Option<&P>| -> Result<()> {
        if !config.checkpoints {
            return Ok(());
        }
        policy.save_checkpoint(&ckpt_dir.join(checkpoint_file(seed, step, "policy")))?;
        if let Some(a) = anchor {
            a.save_checkpoint(&ckpt_dir.join(checkpoint_file(seed, step, "anchor")))?;
        }
        Ok(())
    };
    let every = config.eval_every;
    match &config.settings {
        AlgorithmConfig::Bond(c) => {
            let mut t = BondTrainer::new(c.clone(), prompts, reference, Seed(seed))?;
            t.run(c.steps, every, |t, row| {
                snapshot(row.step, &t.state().policy, Some(&t.state().anchor))?;
                writer.push(&row)
            })?;
        }
        AlgorithmConfig::JBond(c) => {
            let mut t = JBondTrainer::new(c.clone(), prompts, reference, Seed(seed))?;
            t.run(c.steps, every, |t, row| {
                snapshot(row.step, t.policy(), Some(t.anchor()))?;
                writer.push(&row)
            })?;
        }
        AlgorithmConfig::Reinforce(c) => {
            let mut t = ReinforceTrainer::new(c.clone(), prompts, reference, Seed(seed))?;
            t.run(c.steps, every, |t, row| {
                snapshot(row.step, t.policy(), None)?;
                writer.push(&row)
            })?;
        }
    }
    writer.finish()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BondError::invalid("workers", e.to_string()))
}

fn prepare_output(config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output).map_err(|e| BondError::io(&config.output, e))
}

fn manifest(config: &ExperimentConfig, runs: Vec<RunRecord>) -> Manifest {
    Manifest {
        config_hash: config.hash.clone(),
        code_version: CODE_VERSION.to_string(),
        algorithm: config.algorithm.name().to_string(),
        scenario: config.scenario.name.clone(),
        policy: config.policy.to_string(),
        runs,
    }
}

/// Runs every seed of `config` on `workers` threads and writes the manifest.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<Manifest> {
    let mut all = run_many(std::slice::from_ref(config), workers)?;
    Ok(all.pop().expect("one config"))
}

/// Runs every (config, seed) pair on one shared pool of `workers` threads.
pub fn run_many(configs: &[ExperimentConfig], workers: usize) -> Result<Vec<Manifest>> {
    for c in configs {
        prepare_output(c)?;
    }
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let records: Vec<Result<RunRecord>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| run_seed(&configs[i], s))
            .collect()
    });
    let mut per_config: Vec<Vec<RunRecord>> = vec![Vec::new(); configs.len()];
    for (&(i, _), r) in jobs.iter().zip(records) {
        per_config[i].push(r?);
    }
    configs
        .iter()
        .zip(per_config)
        .map(|(c, runs)| {
            let m = manifest(c, runs);
            m.write(&c.output)?;
            Ok(m)
        })
        .collect()
}

/// Loads every `*.toml` file of `dir` in name order.
pub fn load_sweep(dir: &Path) -> Result<Vec<ExperimentConfig>> {
    let entries = std::fs::read_dir(dir).map_err(|e| BondError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| BondError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "toml") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(BondError::invalid(
            "sweep",
            format!("no .toml configs in {}", dir.display()),
        ));
    }
    paths.iter().map(|p| ExperimentConfig::load(p)).collect()
}

/// Reads a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let columns: Vec<&str> = METRICS_HEADER.split(',').collect();
    let index: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == *c)
                .ok_or_else(|| BondError::MissingColumn {
                    path: path.display().to_string(),
                    column: c.to_string(),
                })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let perr = |message: String| BondError::Parse {
            path: path.display().to_string(),
            line: line + 2,
            message,
        };
        let field = |k: usize| record.get(index[k]).unwrap_or("").trim();
        let real = |k: usize| -> Result<f64> {
            field(k)
                .parse()
                .map_err(|_| perr(format!("bad {} `{}`", columns[k], field(k))))
        };
        let optional = |k: usize| -> Result<Option<f64>> {
            if field(k).is_empty() {
                Ok(None)
            } else {
                real(k).map(Some)
            }
        };
        rows.push(MetricsRow {
            step: field(0)
                .parse()
                .map_err(|_| perr(format!("bad step `{}`", field(0))))?,
            reward_mean: real(1)?,
            log_quantile_mean: real(2)?,
            kl_to_ref: real(3)?,
            fwd_kl_to_bon: optional(4)?,
            bwd_kl_to_bon: optional(5)?,
            jeffreys: optional(6)?,
            kl_to_anchor: optional(7)?,
        });
    }
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> BondError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => BondError::io(path, source),
        other => BondError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("{other:?}"),
        },
    }
}
