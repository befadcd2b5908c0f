//! Oracle suite: every exact quantity checked against an independently
//! computed counterpart (enumeration, finite differences, Monte Carlo).

use std::time::{Duration, Instant};

use rand::Rng;

use crate::baselines::{analytic_rl_solution, regularized_objective_grad};
use crate::bon::{bon_distribution, brute_force_bon, compose_bon, exact_quantiles};
use crate::bond::{add_exact_backward, BondConfig, BondTrainer, GradMode};
use crate::divergence::exact_kl_log;
use crate::error::Result;
use crate::jbond::{jbond_reward, jbond_reward_expectation, JBondSample};
use crate::outcome_space::{Prompt, PromptId, PromptSet, Vocab};
use crate::policy::{AutoregressivePolicy, CategoricalPolicy, ParamVector, Policy};
use crate::rng::{BondRng, Seed};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} ({:.2?}): {}",
            self.name, self.elapsed, self.detail
        )
    }
}

fn timed(
    name: &'static str,
    budget: Duration,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CheckReport {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let (passed, detail) = match outcome {
        Ok((ok, d)) if elapsed <= budget => (ok, d),
        Ok((_, d)) => (false, format!("{d}; exceeded {budget:?}")),
        Err(e) => (false, format!("error: {e}")),
    };
    CheckReport {
        name,
        passed,
        detail,
        elapsed,
    }
}

/// A reference distribution with reward table; rewards come from a
/// three-value alphabet about half the time so ties are common.
#[derive(Debug, Clone)]
pub struct Instance {
    pub base: Vec<f64>,
    pub rewards: Vec<f64>,
    pub n: usize,
}

pub fn random_instances(count: usize, seed: Seed) -> Vec<Instance> {
    let mut rng = seed.rng();
    (0..count)
        .map(|_| {
            let m = rng.random_range(2..=6);
            let n = rng.random_range(1..=4);
            let tied = rng.random_bool(0.5);
            let rewards = (0..m)
                .map(|_| {
                    if tied {
                        rng.random_range(0..3) as f64
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.01).collect();
            let total: f64 = w.iter().sum();
            Instance {
                base: w.iter().map(|x| x / total).collect(),
                rewards,
                n,
            }
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Closed-form Best-of-N law against tuple enumeration.
pub fn check_bon_law(instances: &[Instance]) -> CheckReport {
    timed("bon_law_oracle", Duration::from_secs(10), || {
        let mut worst = 0.0f64;
        let mut tied = 0;
        for inst in instances {
            let exact = bon_distribution(&inst.base, &inst.rewards, inst.n)?;
            let brute = brute_force_bon(&inst.base, &inst.rewards, inst.n)?;
            worst = worst.max(max_abs_diff(&exact.probs, &brute));
            let mut r = inst.rewards.clone();
            r.sort_by(f64::total_cmp);
            tied += r.windows(2).any(|w| w[0] == w[1]) as usize;
        }
        Ok((
            worst <= 1e-12 && instances.len() >= 100,
            format!(
                "{} instances ({tied} with ties), max |diff| = {worst:.3e}",
                instances.len()
            ),
        ))
    })
}

/// `normalize(pi_ref exp(r_BOND / beta_BOND))` against the Best-of-N law.
pub fn check_tilt_equivalence(instances: &[Instance]) -> CheckReport {
    timed("tilt_equivalence", Duration::from_secs(10), || {
        let mut worst = 0.0f64;
        let mut beta_exact = true;
        let mut used = 0;
        for inst in instances.iter().filter(|i| i.n >= 2) {
            let bd = bon_distribution(&inst.base, &inst.rewards, inst.n)?;
            let beta = bd.beta_bond()?;
            beta_exact &= beta == 1.0 / (inst.n - 1) as f64;
            let tilted = analytic_rl_solution(&inst.base, &bd.bond_rewards()?, beta)?;
            worst = worst.max(max_abs_diff(&tilted, &bd.probs));
            used += 1;
        }
        Ok((
            worst <= 1e-12 && beta_exact,
            format!("{used} instances with n >= 2, max |diff| = {worst:.3e}, beta_BOND exact: {beta_exact}"),
        ))
    })
}

/// Bo2 applied three times against Bo8, plus the two-outcome hand value.
pub fn check_composition(instances: &[Instance]) -> CheckReport {
    timed("composition", Duration::from_secs(10), || {
        let mut worst = 0.0f64;
        for inst in instances {
            let composed = compose_bon(&inst.base, &inst.rewards, 2, 3)?;
            let direct = bon_distribution(&inst.base, &inst.rewards, 8)?;
            worst = worst.max(max_abs_diff(&composed, &direct.probs));
        }
        let base = [0.3, 0.7];
        let rewards = [0.0, 1.0];
        let composed = compose_bon(&base, &rewards, 2, 3)?;
        let hand = 0.3f64.powi(8);
        let hand_err = (composed[0] - hand).abs();
        Ok((
            worst <= 1e-10 && hand_err <= 1e-15,
            format!(
                "max |Bo2^3 - Bo8| = {worst:.3e}; worst-outcome mass {:.6e} vs 0.3^8 = {hand:.6e}",
                composed[0]
            ),
        ))
    })
}

/// Prompts, policy and anchor in both families, and n.
type GradientFixture = (
    PromptSet,
    CategoricalPolicy,
    AutoregressivePolicy,
    CategoricalPolicy,
    AutoregressivePolicy,
    usize,
);

fn gradient_fixtures(seed: Seed) -> Result<Vec<GradientFixture>> {
    let mut rng = seed.rng();
    let mut out = Vec::new();
    for (size, len, n) in [(4, 1, 2), (3, 2, 4), (2, 3, 8), (5, 1, 3)] {
        let vocab = Vocab::new(size, len)?;
        let m = vocab.outcome_count() as usize;
        let prompts = PromptSet::new(vec![
            Prompt::new(
                PromptId(0),
                vocab,
                (0..m).map(|_| rng.random_range(0..4) as f64).collect(),
            )?,
            Prompt::new(PromptId(1), vocab, (0..m).map(|_| rng.random()).collect())?,
        ])?;
        let cat = CategoricalPolicy::random(&prompts, 1.0, &mut rng)?;
        let cat_anchor = CategoricalPolicy::random(&prompts, 1.0, &mut rng)?;
        let ar = AutoregressivePolicy::random(&prompts, 1.0, &mut rng)?;
        let ar_anchor = AutoregressivePolicy::random(&prompts, 1.0, &mut rng)?;
        out.push((prompts, cat, ar, cat_anchor, ar_anchor, n));
    }
    Ok(out)
}

struct GradientErrors {
    finite_difference: f64,
    reinforce_form: f64,
    expected_score: f64,
}

fn gradient_errors<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    n: usize,
) -> Result<GradientErrors> {
    let mut errs = GradientErrors {
        finite_difference: 0.0,
        reinforce_form: 0.0,
        expected_score: 0.0,
    };
    let h = 1e-5;
    for prompt in 0..prompts.len() {
        let rewards = prompts.at(prompt).rewards();
        let bd = bon_distribution(&anchor.distribution(prompt), rewards, n)?;
        let log_target = bd.log_probs();
        let len = policy.params().len();
        let mut grad = ParamVector::zeros(len);
        add_exact_backward(policy, anchor, prompts, prompt, n, 1.0, &mut grad)?;

        // central differences of KL(pi || pi_BoN) in every owned coordinate
        let range = policy.param_range(prompt);
        let mut fd = ParamVector::zeros(len);
        for i in range.clone() {
            let kl_at = |delta: f64| -> Result<f64> {
                let mut p = policy.clone();
                p.params_mut()[i] += delta;
                exact_kl_log(&p.log_distribution(prompt), &log_target)
            };
            fd[i] = (kl_at(h)? - kl_at(-h)?) / (2.0 * h);
        }
        let scale = grad.max_abs().max(1e-12);
        errs.finite_difference = errs.finite_difference.max(grad.max_abs_diff(&fd) / scale);

        // -(n - 1) times the gradient of E[r_BOND] - beta_BOND KL(pi || anchor)
        let mut reinforce = regularized_objective_grad(
            policy,
            &anchor.log_distribution(prompt),
            &bd.bond_rewards()?,
            prompt,
            bd.beta_bond()?,
        );
        reinforce.scale(-((n - 1) as f64));
        errs.reinforce_form = errs.reinforce_form.max(grad.max_abs_diff(&reinforce));

        let mut expected = ParamVector::zeros(len);
        policy.add_expected_score(prompt, &policy.distribution(prompt), &mut expected);
        errs.expected_score = errs.expected_score.max(expected.max_abs());
    }
    Ok(errs)
}

/// Backward-KL gradient against finite differences and the REINFORCE form;
/// expected score against zero.
pub fn check_gradient_identities(seed: Seed) -> CheckReport {
    timed("gradient_identities", Duration::from_secs(30), || {
        let (mut fd, mut rf, mut es) = (0.0f64, 0.0f64, 0.0f64);
        for (prompts, cat, ar, cat_anchor, ar_anchor, n) in gradient_fixtures(seed)? {
            for e in [
                gradient_errors(&cat, &cat_anchor, &prompts, n)?,
                gradient_errors(&ar, &ar_anchor, &prompts, n)?,
            ] {
                fd = fd.max(e.finite_difference);
                rf = rf.max(e.reinforce_form);
                es = es.max(e.expected_score);
            }
        }
        Ok((
            fd <= 1e-5 && rf <= 1e-12 && es <= 1e-12,
            format!("finite-difference rel err {fd:.3e}, REINFORCE-form err {rf:.3e}, expected score {es:.3e}"),
        ))
    })
}

/// Four-outcome single-prompt toys with random references.
pub fn convergence_toys(count: usize, seed: Seed) -> Result<Vec<(PromptSet, CategoricalPolicy)>> {
    let mut rng = seed.rng();
    let vocab = Vocab::new(4, 1)?;
    (0..count)
        .map(|_| {
            let prompts = PromptSet::new(vec![Prompt::new(
                PromptId(0),
                vocab,
                (0..4).map(|_| rng.random()).collect(),
            )?])?;
            let reference = CategoricalPolicy::random(&prompts, 1.0, &mut rng)?;
            Ok((prompts, reference))
        })
        .collect()
}

/// Steps until the Jeffreys divergence to the target drops to `threshold`,
/// or `None` within `max_steps`. Returns the final value as well.
pub fn steps_to_jeffreys<P: Policy>(
    trainer: &mut BondTrainer<P>,
    threshold: f64,
    max_steps: usize,
) -> Result<(Option<usize>, f64)> {
    let mut last = f64::INFINITY;
    for step in 1..=max_steps {
        trainer.step()?;
        last = trainer.metrics()?.jeffreys.unwrap_or(f64::INFINITY);
        if last <= threshold {
            return Ok((Some(step), last));
        }
    }
    Ok((None, last))
}

/// Exact-gradient BOND within 5k steps to 1e-4, sampled within 20k to 0.05.
pub fn check_distillation(seed: Seed) -> CheckReport {
    timed("distillation_convergence", Duration::from_secs(120), || {
        let toys = convergence_toys(3, seed)?;
        let exact_cfg = BondConfig {
            n: 8,
            beta: 0.5,
            learning_rate: 0.1,
            grad_mode: GradMode::Exact,
            ..Default::default()
        };
        let sampled_cfg = BondConfig {
            grad_mode: GradMode::Sampled,
            k_mc: 16,
            batch_size: 32,
            learning_rate: SAMPLED_LEARNING_RATE,
            ..exact_cfg.clone()
        };
        let mut ok = true;
        let mut notes = Vec::new();
        for (i, (prompts, reference)) in toys.iter().enumerate() {
            let mut t = BondTrainer::new(
                exact_cfg.clone(),
                prompts,
                reference.clone(),
                seed.child(i as u64),
            )?;
            let (steps, value) = steps_to_jeffreys(&mut t, 1e-4, 5_000)?;
            ok &= steps.is_some();
            notes.push(format!("exact#{i}: {} ({value:.2e})", fmt_steps(steps)));
            let mut t = BondTrainer::new(
                sampled_cfg.clone(),
                prompts,
                reference.clone(),
                seed.child(100 + i as u64),
            )?;
            let (steps, value) = steps_to_jeffreys(&mut t, 0.05, 20_000)?;
            ok &= steps.is_some();
            notes.push(format!("sampled#{i}: {} ({value:.2e})", fmt_steps(steps)));
        }
        Ok((ok, notes.join(", ")))
    })
}

/// Step size used for the sampled-gradient convergence check.
pub const SAMPLED_LEARNING_RATE: f64 = 0.01;

fn fmt_steps(steps: Option<usize>) -> String {
    match steps {
        Some(s) => format!("{s} steps"),
        None => "not reached".into(),
    }
}

/// Empirical mean of the J-BOND reward over anchor pairs against
/// `-log 16 (1 - p_leq)^2`.
pub fn check_jbond_calibration(pairs: usize, seed: Seed) -> CheckReport {
    timed("jbond_calibration", Duration::from_secs(10), || {
        // ten equally likely outcomes with distinct rewards: p_leq(y) = (y + 1) / 10
        let vocab = Vocab::new(10, 1)?;
        let prompts = PromptSet::new(vec![Prompt::new(
            PromptId(0),
            vocab,
            (0..10).map(|y| y as f64).collect(),
        )?])?;
        let anchor = CategoricalPolicy::uniform(&prompts)?;
        let quantiles = exact_quantiles(&anchor.distribution(0), prompts.at(0).rewards())?;
        let mut rng: BondRng = seed.rng();
        let mut ok = true;
        let mut notes = Vec::new();
        for y in [0usize, 4, 8] {
            let p = quantiles[y].p_leq;
            let mut total = 0.0;
            for _ in 0..pairs {
                let a = anchor.draw(0, &mut rng, 2);
                total += jbond_reward(&JBondSample::new(&prompts, 0, y, [a[0], a[1]]));
            }
            let mean = total / pairs as f64;
            let expected = jbond_reward_expectation(p);
            let q = (1.0 - p).powi(2);
            let sigma = crate::jbond::JBOND_PENALTY * (q * (1.0 - q) / pairs as f64).sqrt();
            let z = (mean - expected).abs() / sigma;
            ok &= z <= 3.0;
            notes.push(format!(
                "p_leq={p:.1}: {mean:.5} vs {expected:.5} ({z:.2} sigma)"
            ));
        }
        let at_half = (jbond_reward_expectation(0.5) - 0.5f64.ln()).abs();
        ok &= at_half <= f64::EPSILON;
        notes.push(format!("|E(0.5) - log 0.5| = {at_half:.1e}"));
        Ok((ok, notes.join(", ")))
    })
}

/// Every check, in order.
pub fn run_all(seed: Seed) -> Vec<CheckReport> {
    let instances = random_instances(200, seed.labeled("instances"));
    vec![
        check_bon_law(&instances),
        check_tilt_equivalence(&instances),
        check_composition(&instances),
        check_gradient_identities(seed.labeled("gradients")),
        check_distillation(seed.labeled("distillation")),
        check_jbond_calibration(100_000, seed.labeled("calibration")),
    ]
}

/// Seed of the default suite.
pub const DEFAULT_SEED: Seed = Seed(20_240_722);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_include_ties_and_every_n() {
        let inst = random_instances(200, Seed(1));
        assert!(inst.iter().any(|i| i.n == 1) && inst.iter().any(|i| i.n == 4));
        assert!(inst.iter().all(|i| (2..=6).contains(&i.base.len())));
        assert!(
            inst.iter()
                .filter(|i| i.rewards.iter().any(|r| r.fract() == 0.0))
                .count()
                > 50
        );
    }

    #[test]
    fn fast_checks_pass() {
        let inst = random_instances(120, Seed(2));
        for r in [
            check_bon_law(&inst),
            check_tilt_equivalence(&inst),
            check_composition(&inst),
            check_gradient_identities(Seed(3)),
            check_jbond_calibration(20_000, Seed(4)),
        ] {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn a_broken_oracle_fails() {
        let mut inst = random_instances(100, Seed(5));
        inst[0].base[0] += 1e-3;
        let r = check_bon_law(&inst);
        assert!(!r.passed);
    }
}
