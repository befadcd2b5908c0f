//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! algorithm = "jbond"        # bond | iterative_bond | jbond | reinforce
//! seeds = [0, 1, 2]
//! eval_every = 10
//! output = "runs/jbond"      # relative to the config file
//! policy = "categorical"     # or "autoregressive"
//! checkpoints = false        # save policy/anchor snapshots at eval steps
//!
//! [scenario]
//! name = "random"            # random | peaked | tied | file
//! seed = 7                   # optional; defaults to each run seed
//! prompts = 4
//!
//! [jbond]                    # [bond] for bond and iterative_bond
//! eta = 0.02
//! ```
//!
//! Unknown keys anywhere are errors, and all of them are reported at once.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baselines::ReinforceConfig;
use crate::bond::BondConfig;
use crate::error::{BondError, Result};
use crate::harness::scenario::{scenario_keys, ScenarioParams};
use crate::jbond::JBondConfig;
use crate::policy::PolicyKind;

pub const TOP_LEVEL_KEYS: &[&str] = &[
    "algorithm",
    "seeds",
    "eval_every",
    "output",
    "policy",
    "checkpoints",
    "scenario",
    "bond",
    "jbond",
    "reinforce",
];

pub const BOND_KEYS: &[&str] = &[
    "n",
    "beta",
    "k_mc",
    "batch_size",
    "learning_rate",
    "steps",
    "grad_mode",
    "reward_form",
    "baseline",
    "anchor_update_period",
    "optimizer",
    "quantile_source",
    "quantile_learning_rate",
];

pub const JBOND_KEYS: &[&str] = &[
    "beta",
    "eta",
    "gamma",
    "learning_rate",
    "steps",
    "batch_size",
    "use_baseline",
    "optimizer",
    "anchor_update_period",
    "reward_comparison",
];

pub const REINFORCE_KEYS: &[&str] = &[
    "beta_rl",
    "samples_per_prompt",
    "learning_rate",
    "steps",
    "batch_size",
    "grad_mode",
    "optimizer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Bond,
    IterativeBond,
    JBond,
    Reinforce,
}

impl Algorithm {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bond" => Algorithm::Bond,
            "iterative_bond" => Algorithm::IterativeBond,
            "jbond" => Algorithm::JBond,
            "reinforce" => Algorithm::Reinforce,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bond => "bond",
            Algorithm::IterativeBond => "iterative_bond",
            Algorithm::JBond => "jbond",
            Algorithm::Reinforce => "reinforce",
        }
    }

    /// Name of the config section holding this algorithm's settings.
    pub fn section(self) -> &'static str {
        match self {
            Algorithm::Bond | Algorithm::IterativeBond => "bond",
            Algorithm::JBond => "jbond",
            Algorithm::Reinforce => "reinforce",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmConfig {
    Bond(BondConfig),
    JBond(JBondConfig),
    Reinforce(ReinforceConfig),
}

impl AlgorithmConfig {
    pub fn steps(&self) -> usize {
        match self {
            AlgorithmConfig::Bond(c) => c.steps,
            AlgorithmConfig::JBond(c) => c.steps,
            AlgorithmConfig::Reinforce(c) => c.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    /// Fixed scenario seed; `None` derives the scenario from each run seed.
    pub seed: Option<u64>,
    pub params: ScenarioParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub settings: AlgorithmConfig,
    pub scenario: ScenarioSpec,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub output: PathBuf,
    pub policy: PolicyKind,
    pub checkpoints: bool,
    /// SHA-256 of the canonical re-serialization of the parsed document.
    pub hash: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BondError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parses a config; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, source: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            BondError::Parse {
                path: source.to_string(),
                line,
                message: e.message().to_string(),
            }
        })?;
        Self::from_table(table, base_dir)
    }

    pub fn from_table(table: toml::Table, base_dir: &Path) -> Result<Self> {
        let mut bad: Vec<String> = table
            .keys()
            .filter(|k| !TOP_LEVEL_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();

        let algorithm = match table
            .get("algorithm")
            .and_then(|v| v.as_str())
            .map(Algorithm::parse)
        {
            Some(Some(a)) => Some(a),
            _ => {
                bad.push("algorithm".into());
                None
            }
        };

        for (section, keys) in [
            ("bond", BOND_KEYS),
            ("jbond", JBOND_KEYS),
            ("reinforce", REINFORCE_KEYS),
        ] {
            match table.get(section) {
                None => {}
                Some(toml::Value::Table(t)) => {
                    if algorithm.is_some_and(|a| a.section() != section) {
                        bad.push(section.into());
                        continue;
                    }
                    bad.extend(
                        t.keys()
                            .filter(|k| !keys.contains(&k.as_str()))
                            .map(|k| format!("{section}.{k}")),
                    );
                }
                Some(_) => bad.push(section.into()),
            }
        }

        let seeds = match table.get("seeds") {
            Some(toml::Value::Array(a)) if !a.is_empty() => {
                let s: Option<Vec<u64>> = a
                    .iter()
                    .map(|v| v.as_integer().and_then(|i| u64::try_from(i).ok()))
                    .collect();
                s.unwrap_or_else(|| {
                    bad.push("seeds".into());
                    Vec::new()
                })
            }
            _ => {
                bad.push("seeds".into());
                Vec::new()
            }
        };

        let eval_every = match table.get("eval_every") {
            None => 1,
            Some(v) => match v.as_integer() {
                Some(i) if i >= 1 => i as usize,
                _ => {
                    bad.push("eval_every".into());
                    1
                }
            },
        };

        let output = match table.get("output") {
            Some(v) => match v.as_str() {
                Some(s) => base_dir.join(s),
                None => {
                    bad.push("output".into());
                    PathBuf::new()
                }
            },
            None => {
                bad.push("output".into());
                PathBuf::new()
            }
        };

        let policy = match table.get("policy").map(|v| v.as_str()) {
            None | Some(Some("categorical")) => PolicyKind::Categorical,
            Some(Some("autoregressive")) => PolicyKind::Autoregressive,
            Some(_) => {
                bad.push("policy".into());
                PolicyKind::Categorical
            }
        };

        let checkpoints = match table.get("checkpoints") {
            None => false,
            Some(v) => v.as_bool().unwrap_or_else(|| {
                bad.push("checkpoints".into());
                false
            }),
        };

        let scenario = parse_scenario(table.get("scenario"), base_dir, &mut bad);

        let settings = algorithm.and_then(|a| {
            let section = table
                .get(a.section())
                .cloned()
                .unwrap_or(toml::Value::Table(toml::Table::new()));
            parse_settings(a, section, &mut bad)
        });

        if let (Some(Algorithm::IterativeBond), Some(AlgorithmConfig::Bond(c))) =
            (algorithm, &settings)
        {
            if c.anchor_update_period.is_none() {
                bad.push("bond.anchor_update_period".into());
            }
        }

        bad.sort();
        bad.dedup();
        if !bad.is_empty() {
            return Err(BondError::InvalidConfig { keys: bad });
        }

        let hash = hex(&Sha256::digest(
            toml::to_string(&table).unwrap_or_default().as_bytes(),
        ));
        Ok(ExperimentConfig {
            algorithm: algorithm.expect("checked"),
            settings: settings.expect("checked"),
            scenario: scenario.expect("checked"),
            seeds,
            eval_every,
            output,
            policy,
            checkpoints,
            hash,
        })
    }
}

fn parse_scenario(
    value: Option<&toml::Value>,
    base_dir: &Path,
    bad: &mut Vec<String>,
) -> Option<ScenarioSpec> {
    let Some(toml::Value::Table(t)) = value else {
        bad.push("scenario".into());
        return None;
    };
    let Some(name) = t.get("name").and_then(|v| v.as_str()) else {
        bad.push("scenario.name".into());
        return None;
    };
    if scenario_keys(name).is_err() {
        bad.push("scenario.name".into());
        return None;
    }
    let seed = match t.get("seed") {
        None => None,
        Some(v) => match v.as_integer().and_then(|i| u64::try_from(i).ok()) {
            Some(s) => Some(s),
            None => {
                bad.push("scenario.seed".into());
                None
            }
        },
    };
    let mut rest = t.clone();
    rest.remove("name");
    rest.remove("seed");
    match ScenarioParams::from_table(name, &rest, "scenario.", base_dir) {
        Ok(params) => Some(ScenarioSpec {
            name: name.to_string(),
            seed,
            params,
        }),
        Err(BondError::InvalidConfig { keys }) => {
            bad.extend(keys);
            None
        }
        Err(_) => {
            bad.push("scenario.name".into());
            None
        }
    }
}

fn parse_settings(
    algorithm: Algorithm,
    section: toml::Value,
    bad: &mut Vec<String>,
) -> Option<AlgorithmConfig> {
    let name = algorithm.section();
    let toml::Value::Table(table) = section else {
        return None;
    };
    // type-check key by key so every ill-typed entry is reported
    let keys: Vec<String> = table.keys().cloned().collect();
    let mut typed_ok = true;
    for key in keys {
        let mut single = toml::Table::new();
        single.insert(key.clone(), table[&key].clone());
        let ok = match algorithm.section() {
            "bond" => toml::Value::Table(single).try_into::<BondConfig>().is_ok(),
            "jbond" => toml::Value::Table(single).try_into::<JBondConfig>().is_ok(),
            _ => toml::Value::Table(single)
                .try_into::<ReinforceConfig>()
                .is_ok(),
        };
        if !ok {
            typed_ok = false;
            bad.push(format!("{name}.{key}"));
        }
    }
    if !typed_ok {
        return None;
    }
    let value = toml::Value::Table(table);
    let (settings, invalid) = match name {
        "bond" => {
            let c: BondConfig = value.try_into().ok()?;
            let inv = c.invalid_keys();
            (AlgorithmConfig::Bond(c), inv)
        }
        "jbond" => {
            let c: JBondConfig = value.try_into().ok()?;
            let inv = c.invalid_keys();
            (AlgorithmConfig::JBond(c), inv)
        }
        _ => {
            let c: ReinforceConfig = value.try_into().ok()?;
            let inv = c.invalid_keys();
            (AlgorithmConfig::Reinforce(c), inv)
        }
    };
    if invalid.is_empty() {
        Some(settings)
    } else {
        bad.extend(invalid.into_iter().map(|k| format!("{name}.{k}")));
        None
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
