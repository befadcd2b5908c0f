//! Comparison methods: KL-regularized REINFORCE, its analytic optimum and
//! inference-time Best-of-N sampling.

use serde::{Deserialize, Serialize};

use crate::bon::check_normalized;
use crate::bond::{slot_prompt, GradMode};
use crate::error::{BondError, Result};
use crate::metrics::{Evaluator, MetricsRow};
use crate::optim::{Optimizer, OptimizerKind};
use crate::outcome_space::{strict_winner, PromptSet};
use crate::policy::{ParamVector, Policy};
use crate::rng::{BondRng, Seed};

/// `pi_RL(y) ∝ pi_ref(y) exp(r(y) / beta_rl)`, the maximizer of
/// `E_pi[r] - beta_rl KL(pi || pi_ref)`.
pub fn analytic_rl_solution(reference: &[f64], rewards: &[f64], beta_rl: f64) -> Result<Vec<f64>> {
    if beta_rl.is_nan() || beta_rl <= 0.0 {
        return Err(BondError::invalid("beta_rl", "must be > 0"));
    }
    if reference.len() != rewards.len() {
        return Err(BondError::ShapeMismatch {
            expected: reference.len(),
            found: rewards.len(),
        });
    }
    check_normalized(reference)?;
    let logits: Vec<f64> = reference
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + r / beta_rl)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Exact gradient of `E_pi[r] - beta (KL(pi || reference))` for one prompt,
/// written in REINFORCE form `E_pi[score (r - beta (log pi - log ref))]`.
pub fn regularized_objective_grad<P: Policy>(
    policy: &P,
    reference_log_probs: &[f64],
    rewards: &[f64],
    prompt: usize,
    beta: f64,
) -> ParamVector {
    let log_pi = policy.log_distribution(prompt);
    let weights: Vec<f64> = log_pi
        .iter()
        .zip(reference_log_probs)
        .zip(rewards)
        .map(|((lp, lr), r)| lp.exp() * (r - beta * (lp - lr)))
        .collect();
    let mut g = ParamVector::zeros(policy.params().len());
    policy.add_expected_score(prompt, &weights, &mut g);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub beta_rl: f64,
    pub samples_per_prompt: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Prompts per step in sampled mode.
    pub batch_size: usize,
    pub grad_mode: GradMode,
    pub optimizer: OptimizerKind,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            beta_rl: 0.1,
            samples_per_prompt: 2,
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 16,
            grad_mode: GradMode::Sampled,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl ReinforceConfig {
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.beta_rl > 0.0 && self.beta_rl.is_finite()) {
            bad.push("beta_rl");
        }
        if self.samples_per_prompt < 2 {
            bad.push("samples_per_prompt");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if self.batch_size < 1 {
            bad.push("batch_size");
        }
        bad.into_iter().map(String::from).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let keys = self.invalid_keys();
        if keys.is_empty() {
            Ok(())
        } else {
            Err(BondError::InvalidConfig { keys })
        }
    }
}

/// Owns one REINFORCE run starting at the reference.
#[derive(Debug, Clone)]
pub struct ReinforceTrainer<P: Policy> {
    config: ReinforceConfig,
    prompts: PromptSet,
    evaluator: Evaluator,
    reference_log_probs: Vec<Vec<f64>>,
    policy: P,
    optimizer: Optimizer,
    step: u64,
    seed: Seed,
}

impl<P: Policy> ReinforceTrainer<P> {
    pub fn new(
        config: ReinforceConfig,
        prompts: &PromptSet,
        reference: P,
        seed: Seed,
    ) -> Result<Self> {
        config.validate()?;
        let evaluator = Evaluator::new(prompts, &reference)?;
        let reference_log_probs = (0..prompts.len())
            .map(|i| reference.log_distribution(i))
            .collect();
        let optimizer = Optimizer::new(config.optimizer, reference.params().len());
        Ok(ReinforceTrainer {
            config,
            prompts: prompts.clone(),
            evaluator,
            reference_log_probs,
            policy: reference,
            optimizer,
            step: 0,
            seed,
        })
    }

    pub fn config(&self) -> &ReinforceConfig {
        &self.config
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut P {
        &mut self.policy
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Descent direction (negated objective gradient) at the current policy.
    pub fn gradient(&self) -> ParamVector {
        let cfg = &self.config;
        let mut g = ParamVector::zeros(self.policy.params().len());
        match cfg.grad_mode {
            GradMode::Exact => {
                let w = 1.0 / self.prompts.len() as f64;
                for (i, prompt) in self.prompts.iter().enumerate() {
                    let ascent = regularized_objective_grad(
                        &self.policy,
                        &self.reference_log_probs[i],
                        prompt.rewards(),
                        i,
                        cfg.beta_rl,
                    );
                    g.axpy(-w, &ascent);
                }
            }
            GradMode::Sampled => {
                let step_seed = self.seed.child(self.step);
                let k = cfg.samples_per_prompt;
                let w = 1.0 / (cfg.batch_size * k) as f64;
                for j in 0..cfg.batch_size {
                    let prompt = slot_prompt(self.step, cfg.batch_size, j, &self.prompts);
                    let draws = self.policy.draw(
                        prompt,
                        &mut step_seed.child(j as u64).labeled("policy").rng(),
                        k,
                    );
                    let rewards = self.prompts.at(prompt).rewards();
                    let returns: Vec<f64> = draws
                        .iter()
                        .map(|&y| {
                            let ratio = self.policy.log_prob_at(prompt, y)
                                - self.reference_log_probs[prompt][y];
                            rewards[y] - cfg.beta_rl * ratio
                        })
                        .collect();
                    let total: f64 = returns.iter().sum();
                    for (&y, ret) in draws.iter().zip(&returns) {
                        let advantage = ret - (total - ret) / (k - 1) as f64;
                        self.policy.add_score(prompt, y, -w * advantage, &mut g);
                    }
                }
            }
        }
        g
    }

    pub fn step(&mut self) -> ParamVector {
        let g = self.gradient();
        self.optimizer
            .step(self.policy.params_mut(), &g, self.config.learning_rate);
        self.step += 1;
        g
    }

    /// Exact metrics; the BoN and anchor columns are undefined here.
    pub fn metrics(&self) -> Result<MetricsRow> {
        self.evaluator.evaluate(self.step, &self.policy, None, None)
    }

    pub fn step_logged(&mut self) -> Result<(ParamVector, MetricsRow)> {
        let g = self.step();
        Ok((g, self.metrics()?))
    }

    /// Runs `steps` updates, logging after every `eval_every`-th and the last.
    pub fn run(
        &mut self,
        steps: usize,
        eval_every: usize,
        mut log: impl FnMut(&Self, MetricsRow) -> Result<()>,
    ) -> Result<()> {
        let eval_every = eval_every.max(1);
        for i in 1..=steps {
            self.step();
            if i % eval_every == 0 || i == steps {
                let row = self.metrics()?;
                log(self, row)?;
            }
        }
        Ok(())
    }
}

/// Draws `n` reference samples and returns the strict-order winner.
pub fn best_of_n_sampler<P: Policy>(
    reference: &P,
    prompts: &PromptSet,
    prompt: usize,
    n: usize,
    rng: &mut BondRng,
) -> Result<usize> {
    if n < 1 {
        return Err(BondError::InvalidN { n, min: 1 });
    }
    if prompt >= prompts.len() {
        return Err(BondError::OutcomeOutOfRange {
            index: prompt,
            len: prompts.len(),
        });
    }
    let draws = reference.draw(prompt, rng, n);
    Ok(strict_winner(prompts.at(prompt).rewards(), &draws).expect("n >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bon::bon_distribution;
    use crate::divergence::exact_kl;
    use crate::outcome_space::{Prompt, PromptId, Vocab};
    use crate::policy::CategoricalPolicy;
    use proptest::prelude::*;

    fn set(rewards: Vec<f64>) -> PromptSet {
        let vocab = Vocab::new(rewards.len(), 1).unwrap();
        PromptSet::new(vec![Prompt::new(PromptId(0), vocab, rewards).unwrap()]).unwrap()
    }

    #[test]
    fn analytic_examples() {
        let pi = analytic_rl_solution(&[0.3, 0.7], &[0.0, 1.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((pi[1] - 0.7 * e / (0.3 + 0.7 * e)).abs() < 1e-15);
        assert!((pi[0] - 0.13620).abs() < 1e-5 && (pi[1] - 0.86380).abs() < 1e-5);
        let flat = analytic_rl_solution(&[0.3, 0.7], &[0.0, 1.0], 1e6).unwrap();
        assert!((flat[0] - 0.3).abs() + (flat[1] - 0.7).abs() < 1e-5);
        assert!(analytic_rl_solution(&[0.3, 0.7], &[0.0, 1.0], 0.0).is_err());
        // huge rewards do not overflow
        let big = analytic_rl_solution(&[0.5, 0.5], &[1e6, 0.0], 1e-3).unwrap();
        assert_eq!(big, vec![1.0, 0.0]);
    }

    #[test]
    fn tilt_by_bond_reward_is_best_of_n() {
        let r = vec![0.3, 0.1, 0.9, 0.5, 0.2];
        let base = vec![0.1, 0.3, 0.2, 0.15, 0.25];
        for n in 2..6 {
            let bd = bon_distribution(&base, &r, n).unwrap();
            let tilted =
                analytic_rl_solution(&base, &bd.bond_rewards().unwrap(), bd.beta_bond().unwrap())
                    .unwrap();
            for (a, b) in tilted.iter().zip(&bd.probs) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_samples_give_zero_gradient() {
        let ps = set(vec![0.0, 1.0]);
        let point = CategoricalPolicy::from_logits(&ps, vec![vec![0.0, 800.0]]).unwrap();
        let cfg = ReinforceConfig {
            batch_size: 3,
            samples_per_prompt: 4,
            ..Default::default()
        };
        let t = ReinforceTrainer::new(cfg, &ps, point, Seed(0)).unwrap();
        assert!(t.gradient().max_abs() == 0.0);
    }

    #[test]
    fn exact_gradient_vanishes_at_the_analytic_solution() {
        let ps = set(vec![0.2, 0.9, 0.4, 0.6]);
        let reference = CategoricalPolicy::random(&ps, 1.0, &mut Seed(1).rng()).unwrap();
        let opt =
            analytic_rl_solution(&reference.distribution(0), ps.at(0).rewards(), 0.3).unwrap();
        let policy = CategoricalPolicy::from_distributions(&ps, &[opt]).unwrap();
        let g = regularized_objective_grad(
            &policy,
            &reference.log_distribution(0),
            ps.at(0).rewards(),
            0,
            0.3,
        );
        assert!(g.max_abs() <= 1e-10);
    }

    #[test]
    fn exact_mode_converges_to_the_analytic_solution() {
        let ps = set(vec![0.2, 0.9, 0.4, 0.6]);
        let reference = CategoricalPolicy::random(&ps, 1.0, &mut Seed(2).rng()).unwrap();
        let cfg = ReinforceConfig {
            beta_rl: 0.5,
            grad_mode: GradMode::Exact,
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut t = ReinforceTrainer::new(cfg, &ps, reference.clone(), Seed(0)).unwrap();
        for _ in 0..20_000 {
            t.step();
        }
        let opt =
            analytic_rl_solution(&reference.distribution(0), ps.at(0).rewards(), 0.5).unwrap();
        assert!(exact_kl(&opt, &t.policy().distribution(0)).unwrap() <= 1e-6);
    }

    #[test]
    fn sampler_examples() {
        let ps = set(vec![0.0, 1.0]);
        let reference = CategoricalPolicy::from_distributions(&ps, &[vec![0.3, 0.7]]).unwrap();
        let mut rng = Seed(5).rng();
        let draws = 100_000;
        let wins = (0..draws)
            .filter(|_| best_of_n_sampler(&reference, &ps, 0, 2, &mut rng).unwrap() == 1)
            .count() as f64
            / draws as f64;
        let sigma = (0.91f64 * 0.09 / draws as f64).sqrt();
        assert!((wins - 0.91).abs() <= 3.0 * sigma);
        let point = CategoricalPolicy::from_logits(&ps, vec![vec![800.0, 0.0]]).unwrap();
        for _ in 0..100 {
            assert_eq!(best_of_n_sampler(&point, &ps, 0, 5, &mut rng).unwrap(), 0);
        }
        assert!(best_of_n_sampler(&reference, &ps, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn sampler_with_n1_follows_the_reference() {
        let ps = set(vec![0.5, 0.1, 0.3]);
        let reference = CategoricalPolicy::from_distributions(&ps, &[vec![0.2, 0.5, 0.3]]).unwrap();
        let mut a = Seed(7).rng();
        let mut b = Seed(7).rng();
        for _ in 0..1000 {
            assert_eq!(
                best_of_n_sampler(&reference, &ps, 0, 1, &mut a).unwrap(),
                reference.draw(0, &mut b, 1)[0]
            );
        }
    }

    proptest! {
        #[test]
        fn reward_shift_leaves_the_solution_unchanged(c in -50.0f64..50.0, beta in 0.05f64..5.0) {
            let base = [0.1, 0.2, 0.3, 0.4];
            let r = [0.3, -0.2, 0.9, 0.1];
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let a = analytic_rl_solution(&base, &r, beta).unwrap();
            let b = analytic_rl_solution(&base, &shifted, beta).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
