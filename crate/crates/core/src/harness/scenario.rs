//! Built-in prompt/reward/reference generators.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{BondError, Result};
use crate::outcome_space::{Prompt, PromptId, PromptSet, Vocab};
use crate::policy::{AutoregressivePolicy, CategoricalPolicy, Policy, PolicyKind};
use crate::rng::Seed;

pub const SCENARIO_NAMES: &[&str] = &["random", "peaked", "tied", "file"];

const COMMON_KEYS: &[&str] = &["prompts", "vocab_size", "max_len", "reference_scale"];

/// Parameter names accepted by generator `name`.
pub fn scenario_keys(name: &str) -> Result<Vec<&'static str>> {
    let extra: &[&str] = match name {
        "random" => &[],
        "peaked" => &["peak_ceiling"],
        "tied" => &["duplication"],
        "file" => return Ok(vec!["rewards", "reference", "vocab_size", "max_len"]),
        other => return Err(BondError::UnknownScenario(other.to_string())),
    };
    Ok(COMMON_KEYS.iter().chain(extra).copied().collect())
}

/// Generator parameters with their defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub prompts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub reference_scale: f64,
    pub peak_ceiling: f64,
    pub duplication: usize,
    pub rewards: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            prompts: 4,
            vocab_size: 4,
            max_len: 1,
            reference_scale: 1.0,
            peak_ceiling: 0.05,
            duplication: 2,
            rewards: None,
            reference: None,
        }
    }
}

fn key_error(keys: Vec<String>) -> BondError {
    BondError::InvalidConfig { keys }
}

impl ScenarioParams {
    /// Reads parameters of generator `name` from a TOML table. Every
    /// unknown or ill-typed key is reported, prefixed with `prefix`.
    /// Relative file paths resolve against `base_dir`.
    pub fn from_table(
        name: &str,
        table: &toml::Table,
        prefix: &str,
        base_dir: &Path,
    ) -> Result<Self> {
        let allowed = scenario_keys(name)?;
        let mut p = ScenarioParams::default();
        let mut bad = Vec::new();
        for (key, value) in table {
            if !allowed.contains(&key.as_str()) {
                bad.push(format!("{prefix}{key}"));
                continue;
            }
            let ok = match key.as_str() {
                "prompts" => set_count(value, 1, &mut p.prompts),
                "vocab_size" => set_count(value, 2, &mut p.vocab_size),
                "max_len" => set_count(value, 1, &mut p.max_len),
                "duplication" => set_count(value, 1, &mut p.duplication),
                "reference_scale" => set_real(value, &mut p.reference_scale, |x| x >= 0.0),
                "peak_ceiling" => set_real(value, &mut p.peak_ceiling, |x| x > 0.0 && x < 1.0),
                "rewards" => set_path(value, base_dir, &mut p.rewards),
                "reference" => set_path(value, base_dir, &mut p.reference),
                _ => unreachable!(),
            };
            if !ok {
                bad.push(format!("{prefix}{key}"));
            }
        }
        if name == "file" {
            for (key, v) in [("rewards", &p.rewards), ("reference", &p.reference)] {
                if v.is_none() && !bad.contains(&format!("{prefix}{key}")) {
                    bad.push(format!("{prefix}{key}"));
                }
            }
        }
        if bad.is_empty() {
            Ok(p)
        } else {
            Err(key_error(bad))
        }
    }
}

fn set_count(v: &toml::Value, min: usize, slot: &mut usize) -> bool {
    match v.as_integer() {
        Some(i) if i >= min as i64 => {
            *slot = i as usize;
            true
        }
        _ => false,
    }
}

fn set_real(v: &toml::Value, slot: &mut f64, ok: impl Fn(f64) -> bool) -> bool {
    let x = match v {
        toml::Value::Float(f) => *f,
        toml::Value::Integer(i) => *i as f64,
        _ => return false,
    };
    if ok(x) {
        *slot = x;
        true
    } else {
        false
    }
}

fn set_path(v: &toml::Value, base_dir: &Path, slot: &mut Option<PathBuf>) -> bool {
    match v.as_str() {
        Some(s) => {
            *slot = Some(base_dir.join(s));
            true
        }
        None => false,
    }
}

/// A prompt set, its rewards and a reference policy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub prompts: PromptSet,
    pub reference: CategoricalPolicy,
}

/// File names written by [`Scenario::save`].
pub const REWARDS_FILE: &str = "rewards.csv";
pub const REFERENCE_FILE: &str = "reference_policy.csv";

impl Scenario {
    /// Writes `rewards.csv` and `reference_policy.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| BondError::io(dir, e))?;
        self.prompts.save_reward_table(&dir.join(REWARDS_FILE))?;
        self.reference.save_checkpoint(&dir.join(REFERENCE_FILE))
    }
}

/// Builds scenario `name`, fully determined by `params` and `seed`.
pub fn generate_scenario(name: &str, params: &ScenarioParams, seed: Seed) -> Result<Scenario> {
    let vocab = Vocab::new(params.vocab_size, params.max_len)?;
    let mut rng = seed.labeled("scenario").rng();
    let (prompts, reference) = match name {
        "file" => return load_scenario(params, vocab),
        "random" => {
            let prompts = build_prompts(params.prompts, vocab, |_| {
                (0..vocab_len(vocab)).map(|_| rng.random()).collect()
            })?;
            let reference = CategoricalPolicy::random(&prompts, params.reference_scale, &mut rng)?;
            (prompts, reference)
        }
        "peaked" => {
            let m = vocab_len(vocab);
            let mut peaks = Vec::with_capacity(params.prompts);
            let prompts = build_prompts(params.prompts, vocab, |_| {
                let mut r: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 0.9).collect();
                let peak = rng.random_range(0..m);
                r[peak] = 1.0;
                peaks.push(peak);
                r
            })?;
            let mut reference =
                CategoricalPolicy::random(&prompts, params.reference_scale, &mut rng)?;
            // ceiling shaved by a relative 1e-9 so rounding never lifts it above
            let ceiling = params.peak_ceiling * (1.0 - 1e-9);
            for (i, &peak) in peaks.iter().enumerate() {
                if reference.distribution(i)[peak] > ceiling {
                    let range = reference.param_range(i);
                    let logits = &mut reference.params_mut()[range];
                    let others: Vec<f64> = logits
                        .iter()
                        .enumerate()
                        .filter(|&(y, _)| y != peak)
                        .map(|(_, &l)| l)
                        .collect();
                    logits[peak] =
                        ceiling.ln() - (1.0 - ceiling).ln() + crate::policy::log_sum_exp(&others);
                }
            }
            (prompts, reference)
        }
        "tied" => {
            let m = vocab_len(vocab);
            let dup = params.duplication;
            if !m.is_multiple_of(dup) {
                return Err(BondError::invalid(
                    "duplication",
                    format!("must divide the outcome count {m}"),
                ));
            }
            let groups = m / dup;
            let prompts = build_prompts(params.prompts, vocab, |_| {
                let mut r: Vec<f64> = (0..groups)
                    .flat_map(|g| {
                        let v = (g as f64 + rng.random::<f64>()) / groups as f64;
                        std::iter::repeat_n(v, dup)
                    })
                    .collect();
                r.shuffle(&mut rng);
                r
            })?;
            let reference = CategoricalPolicy::random(&prompts, params.reference_scale, &mut rng)?;
            (prompts, reference)
        }
        other => return Err(BondError::UnknownScenario(other.to_string())),
    };
    Ok(Scenario {
        name: name.to_string(),
        prompts,
        reference,
    })
}

fn vocab_len(vocab: Vocab) -> usize {
    vocab.outcome_count() as usize
}

fn build_prompts(
    count: usize,
    vocab: Vocab,
    mut rewards: impl FnMut(usize) -> Vec<f64>,
) -> Result<PromptSet> {
    vocab.checked_outcome_count(crate::outcome_space::DEFAULT_ENUMERATION_CAP)?;
    let prompts = (0..count)
        .map(|i| Prompt::new(PromptId(i as u32), vocab, rewards(i)))
        .collect::<Result<Vec<_>>>()?;
    PromptSet::new(prompts)
}

fn load_scenario(params: &ScenarioParams, vocab: Vocab) -> Result<Scenario> {
    let rewards = params
        .rewards
        .as_deref()
        .ok_or_else(|| key_error(vec!["rewards".into()]))?;
    let reference = params
        .reference
        .as_deref()
        .ok_or_else(|| key_error(vec!["reference".into()]))?;
    let prompts = PromptSet::load_reward_table(rewards, vocab)?;
    let text = std::fs::read_to_string(reference).map_err(|e| BondError::io(reference, e))?;
    let source = reference.display().to_string();
    let reference = if text.starts_with(&format!("# kind={}", PolicyKind::Autoregressive)) {
        let ar = AutoregressivePolicy::parse_checkpoint(&text, &source, &prompts)?;
        let dists: Vec<Vec<f64>> = (0..prompts.len()).map(|i| ar.distribution(i)).collect();
        CategoricalPolicy::from_distributions(&prompts, &dists)?
    } else {
        CategoricalPolicy::parse_checkpoint(&text, &source, &prompts)?
    };
    Ok(Scenario {
        name: "file".into(),
        prompts,
        reference,
    })
}

/// A policy family the harness can train.
pub trait TrainablePolicy: Policy + 'static {
    const KIND: PolicyKind;
    /// The member of this family with the same distributions as `reference`.
    fn from_reference(prompts: &PromptSet, reference: &CategoricalPolicy) -> Result<Self>;
}

impl TrainablePolicy for CategoricalPolicy {
    const KIND: PolicyKind = PolicyKind::Categorical;

    fn from_reference(_: &PromptSet, reference: &CategoricalPolicy) -> Result<Self> {
        Ok(reference.clone())
    }
}

impl TrainablePolicy for AutoregressivePolicy {
    const KIND: PolicyKind = PolicyKind::Autoregressive;

    fn from_reference(prompts: &PromptSet, reference: &CategoricalPolicy) -> Result<Self> {
        let dists: Vec<Vec<f64>> = (0..prompts.len())
            .map(|i| reference.distribution(i))
            .collect();
        AutoregressivePolicy::from_distributions(prompts, &dists)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn params(f: impl FnOnce(&mut ScenarioParams)) -> ScenarioParams {
        let mut p = ScenarioParams::default();
        f(&mut p);
        p
    }

    #[test]
    fn tied_duplicates_every_value() {
        let p = params(|p| {
            p.vocab_size = 3;
            p.max_len = 2;
            p.duplication = 3;
        });
        let s = generate_scenario("tied", &p, Seed(1)).unwrap();
        for prompt in s.prompts.iter() {
            let mut counts: HashMap<u64, usize> = HashMap::new();
            for r in prompt.rewards() {
                *counts.entry(r.to_bits()).or_default() += 1;
            }
            assert_eq!(counts.len(), 3);
            assert!(counts.values().all(|&c| c == 3));
        }
        let bad = params(|p| p.duplication = 3);
        assert!(generate_scenario("tied", &bad, Seed(1)).is_err());
    }

    #[test]
    fn peaked_has_one_rare_maximum() {
        for seed in 0..20 {
            let p = params(|p| {
                p.peak_ceiling = 0.02;
                p.reference_scale = 3.0;
            });
            let s = generate_scenario("peaked", &p, Seed(seed)).unwrap();
            for (i, prompt) in s.prompts.iter().enumerate() {
                let r = prompt.rewards();
                let max = r.iter().copied().fold(f64::MIN, f64::max);
                let peaks: Vec<usize> = (0..r.len()).filter(|&y| r[y] == max).collect();
                assert_eq!(peaks.len(), 1);
                assert!(s.reference.distribution(i)[peaks[0]] <= 0.02);
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for name in ["random", "peaked", "tied"] {
            let p = ScenarioParams::default();
            let a = generate_scenario(name, &p, Seed(3)).unwrap();
            let b = generate_scenario(name, &p, Seed(3)).unwrap();
            assert_eq!(a.prompts, b.prompts);
            assert_eq!(a.reference, b.reference);
            let c = generate_scenario(name, &p, Seed(4)).unwrap();
            assert_ne!(a.prompts, c.prompts);
        }
        assert!(matches!(
            generate_scenario("nope", &ScenarioParams::default(), Seed(0)),
            Err(BondError::UnknownScenario(_))
        ));
    }

    #[test]
    fn saved_scenarios_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scenario("random", &params(|p| p.max_len = 2), Seed(5)).unwrap();
        s.save(dir.path()).unwrap();
        let p = params(|p| {
            p.max_len = 2;
            p.rewards = Some(dir.path().join(REWARDS_FILE));
            p.reference = Some(dir.path().join(REFERENCE_FILE));
        });
        let loaded = generate_scenario("file", &p, Seed(0)).unwrap();
        assert_eq!(loaded.prompts, s.prompts);
        assert_eq!(loaded.reference, s.reference);
    }

    #[test]
    fn parameter_tables_report_every_bad_key() {
        let t: toml::Table =
            toml::from_str("prompts = 0\nbogus = 1\npeak_ceiling = 0.1\nmax_len = 2").unwrap();
        match ScenarioParams::from_table("random", &t, "scenario.", Path::new(".")) {
            Err(BondError::InvalidConfig { keys }) => {
                assert_eq!(
                    keys,
                    vec![
                        "scenario.bogus",
                        "scenario.peak_ceiling",
                        "scenario.prompts"
                    ]
                );
            }
            other => panic!("{other:?}"),
        }
        let ok: toml::Table = toml::from_str("peak_ceiling = 0.1\nmax_len = 2").unwrap();
        let p = ScenarioParams::from_table("peaked", &ok, "", Path::new(".")).unwrap();
        assert_eq!((p.peak_ceiling, p.max_len), (0.1, 2));
    }

    #[test]
    fn autoregressive_references_match() {
        let s = generate_scenario("random", &params(|p| p.max_len = 3), Seed(2)).unwrap();
        let ar = AutoregressivePolicy::from_reference(&s.prompts, &s.reference).unwrap();
        for i in 0..s.prompts.len() {
            for (a, b) in ar.distribution(i).iter().zip(s.reference.distribution(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
