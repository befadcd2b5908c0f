//! J-BOND: Jeffreys distillation of Best-of-2 of a moving anchor with one
//! policy sample and two anchor samples per prompt, the calibrated
//! `-log 16` reward, an EMA anchor and extra KL regularization toward it.

use serde::{Deserialize, Serialize};

use crate::bon::{bon_distribution, exact_quantiles};
use crate::bond::slot_prompt;
use crate::error::{BondError, Result};
use crate::metrics::{BonTarget, Evaluator, MetricsRow};
use crate::optim::{Optimizer, OptimizerKind};
use crate::outcome_space::{strict_winner, PromptSet};
use crate::policy::{ema_blend, ParamVector, Policy};
use crate::rng::Seed;

/// `log 16`, the penalty for losing to both anchor samples.
pub const JBOND_PENALTY: f64 = 2.772_588_722_239_781;

/// How the policy sample is compared with the worse anchor sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardComparison {
    /// Penalize when `r(y) < min(r(y1), r(y2))`.
    #[default]
    Strict,
    /// Penalize when `r(y) <= min(r(y1), r(y2))`.
    NonStrict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JBondConfig {
    pub beta: f64,
    /// EMA rate of the anchor.
    pub eta: f64,
    /// Strength of the extra `KL(pi || anchor)` term.
    pub gamma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub use_baseline: bool,
    pub optimizer: OptimizerKind,
    /// Hard anchor reset period, replacing the EMA (which then needs `eta = 0`).
    pub anchor_update_period: Option<usize>,
    pub reward_comparison: RewardComparison,
}

impl Default for JBondConfig {
    fn default() -> Self {
        JBondConfig {
            beta: 0.5,
            eta: 0.02,
            gamma: 0.0,
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 32,
            use_baseline: true,
            optimizer: OptimizerKind::Adam,
            anchor_update_period: None,
            reward_comparison: RewardComparison::Strict,
        }
    }
}

impl JBondConfig {
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.beta) {
            bad.push("beta");
        }
        if !(0.0..=1.0).contains(&self.eta)
            || (self.anchor_update_period.is_some() && self.eta != 0.0)
        {
            bad.push("eta");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            bad.push("gamma");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if self.batch_size < 1 {
            bad.push("batch_size");
        }
        if self.anchor_update_period == Some(0) {
            bad.push("anchor_update_period");
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

/// One policy sample and two anchor samples for a prompt, with rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JBondSample {
    pub prompt: usize,
    pub y: usize,
    pub anchors: [usize; 2],
    pub reward: f64,
    pub anchor_rewards: [f64; 2],
}

impl JBondSample {
    pub fn new(prompts: &PromptSet, prompt: usize, y: usize, anchors: [usize; 2]) -> Self {
        let r = prompts.at(prompt).rewards();
        JBondSample {
            prompt,
            y,
            anchors,
            reward: r[y],
            anchor_rewards: [r[anchors[0]], r[anchors[1]]],
        }
    }
}

/// `-log 16` when the policy sample is strictly worse than both anchor samples, else 0.
pub fn jbond_reward(sample: &JBondSample) -> f64 {
    jbond_reward_with(sample, RewardComparison::Strict)
}

pub fn jbond_reward_with(sample: &JBondSample, comparison: RewardComparison) -> f64 {
    let floor = sample.anchor_rewards[0].min(sample.anchor_rewards[1]);
    let loses = match comparison {
        RewardComparison::Strict => sample.reward < floor,
        RewardComparison::NonStrict => sample.reward <= floor,
    };
    if loses {
        -JBOND_PENALTY
    } else {
        0.0
    }
}

/// `-log 16 (1 - p_leq)^2`, the mean of [`jbond_reward`] over two anchor draws.
pub fn jbond_reward_expectation(p_leq: f64) -> f64 {
    -JBOND_PENALTY * (1.0 - p_leq).powi(2)
}

/// The three stochastic gradient terms and their combination
/// `(1 - beta) forward + beta backward + gamma regularizer`.
#[derive(Debug, Clone, PartialEq)]
pub struct JBondGradient {
    pub forward_term: ParamVector,
    pub backward_term: ParamVector,
    pub regularizer: ParamVector,
    pub combined: ParamVector,
}

impl JBondGradient {
    fn combine(
        forward_term: ParamVector,
        backward_term: ParamVector,
        regularizer: ParamVector,
        cfg: &JBondConfig,
    ) -> Self {
        let mut combined = ParamVector::zeros(forward_term.len());
        combined.axpy(1.0 - cfg.beta, &forward_term);
        combined.axpy(cfg.beta, &backward_term);
        combined.axpy(cfg.gamma, &regularizer);
        JBondGradient {
            forward_term,
            backward_term,
            regularizer,
            combined,
        }
    }
}

/// Full-space expectation of the J-BOND gradient for the given policy and
/// anchor, averaged uniformly over prompts (the baseline has zero mean).
pub fn jbond_expected_gradient<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    cfg: &JBondConfig,
) -> Result<JBondGradient> {
    let len = policy.params().len();
    let (mut fwd, mut bwd, mut reg) = (
        ParamVector::zeros(len),
        ParamVector::zeros(len),
        ParamVector::zeros(len),
    );
    let w = 1.0 / prompts.len() as f64;
    for (i, prompt) in prompts.iter().enumerate() {
        let anchor_dist = anchor.distribution(i);
        let bo2 = bon_distribution(&anchor_dist, prompt.rewards(), 2)?;
        let fw: Vec<f64> = bo2.probs.iter().map(|p| -w * p).collect();
        policy.add_expected_score(i, &fw, &mut fwd);

        let quantiles = exact_quantiles(&anchor_dist, prompt.rewards())?;
        let log_pi = policy.log_distribution(i);
        let log_anchor = anchor.log_distribution(i);
        let mut bw = Vec::with_capacity(log_pi.len());
        let mut rg = Vec::with_capacity(log_pi.len());
        for y in 0..log_pi.len() {
            let p = quantiles[y];
            let expected_reward = match cfg.reward_comparison {
                RewardComparison::Strict => jbond_reward_expectation(p.p_leq),
                RewardComparison::NonStrict => jbond_reward_expectation(p.p_less),
            };
            let ratio = log_pi[y] - log_anchor[y];
            let pi = log_pi[y].exp();
            bw.push(-w * pi * (expected_reward - ratio));
            rg.push(w * pi * ratio);
        }
        policy.add_expected_score(i, &bw, &mut bwd);
        policy.add_expected_score(i, &rg, &mut reg);
    }
    Ok(JBondGradient::combine(fwd, bwd, reg, cfg))
}

/// Owns one J-BOND run. The anchor starts at the reference.
#[derive(Debug, Clone)]
pub struct JBondTrainer<P: Policy> {
    config: JBondConfig,
    prompts: PromptSet,
    evaluator: Evaluator,
    policy: P,
    anchor: P,
    optimizer: Optimizer,
    step: u64,
    seed: Seed,
}

impl<P: Policy> JBondTrainer<P> {
    pub fn new(config: JBondConfig, prompts: &PromptSet, reference: P, seed: Seed) -> Result<Self> {
        config.validate()?;
        let evaluator = Evaluator::new(prompts, &reference)?;
        let optimizer = Optimizer::new(config.optimizer, reference.params().len());
        Ok(JBondTrainer {
            config,
            prompts: prompts.clone(),
            evaluator,
            policy: reference.clone(),
            anchor: reference,
            optimizer,
            step: 0,
            seed,
        })
    }

    pub fn config(&self) -> &JBondConfig {
        &self.config
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn anchor(&self) -> &P {
        &self.anchor
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Draws the batch for the current step.
    pub fn draw_batch(&self) -> Vec<JBondSample> {
        let step_seed = self.seed.child(self.step);
        (0..self.config.batch_size)
            .map(|j| {
                let prompt = slot_prompt(self.step, self.config.batch_size, j, &self.prompts);
                let seed = step_seed.child(j as u64);
                let y = self
                    .policy
                    .draw(prompt, &mut seed.labeled("policy").rng(), 1)[0];
                let a = self
                    .anchor
                    .draw(prompt, &mut seed.labeled("anchor").rng(), 2);
                JBondSample::new(&self.prompts, prompt, y, [a[0], a[1]])
            })
            .collect()
    }

    /// Stochastic gradient on a given batch.
    pub fn gradient_on(&self, batch: &[JBondSample]) -> JBondGradient {
        let len = self.policy.params().len();
        let (mut fwd, mut bwd, mut reg) = (
            ParamVector::zeros(len),
            ParamVector::zeros(len),
            ParamVector::zeros(len),
        );
        let w = 1.0 / batch.len() as f64;
        let mut returns = Vec::with_capacity(batch.len());
        for s in batch {
            let rewards = self.prompts.at(s.prompt).rewards();
            let winner = strict_winner(rewards, &s.anchors).expect("two anchor samples");
            self.policy.add_score(s.prompt, winner, -w, &mut fwd);
            let ratio =
                self.policy.log_prob_at(s.prompt, s.y) - self.anchor.log_prob_at(s.prompt, s.y);
            self.policy.add_score(s.prompt, s.y, w * ratio, &mut reg);
            returns.push(jbond_reward_with(s, self.config.reward_comparison) - ratio);
        }
        let total: f64 = returns.iter().sum();
        let use_baseline = self.config.use_baseline && batch.len() >= 2;
        for (s, ret) in batch.iter().zip(&returns) {
            let baseline = if use_baseline {
                (total - ret) / (batch.len() - 1) as f64
            } else {
                0.0
            };
            self.policy
                .add_score(s.prompt, s.y, -w * (ret - baseline), &mut bwd);
        }
        JBondGradient::combine(fwd, bwd, reg, &self.config)
    }

    /// One update followed by the anchor update.
    pub fn step(&mut self) -> Result<JBondGradient> {
        let grad = self.gradient_on(&self.draw_batch());
        self.optimizer.step(
            self.policy.params_mut(),
            &grad.combined,
            self.config.learning_rate,
        );
        self.step += 1;
        match self.config.anchor_update_period {
            Some(period) => {
                if self.step.is_multiple_of(period as u64) {
                    self.anchor = self.policy.clone();
                }
            }
            None => {
                let blended =
                    ema_blend(self.anchor.params(), self.policy.params(), self.config.eta)?;
                self.anchor.set_params(&blended)?;
            }
        }
        Ok(grad)
    }

    /// Exact metrics; the BoN columns refer to Best-of-2 of the live anchor.
    pub fn metrics(&self) -> Result<MetricsRow> {
        self.evaluator.evaluate(
            self.step,
            &self.policy,
            Some(&self.anchor),
            Some(BonTarget {
                n: 2,
                beta: self.config.beta,
            }),
        )
    }

    pub fn step_logged(&mut self) -> Result<(JBondGradient, MetricsRow)> {
        let grad = self.step()?;
        Ok((grad, self.metrics()?))
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
            self.step()?;
            if i % eval_every == 0 || i == steps {
                let row = self.metrics()?;
                log(self, row)?;
            }
        }
        Ok(())
    }
}

/// Runs `config.steps` updates from the reference and returns one row per step.
pub fn run_jbond<P: Policy>(
    config: &JBondConfig,
    prompts: &PromptSet,
    reference: P,
    seed: Seed,
) -> Result<Vec<MetricsRow>> {
    let mut trainer = JBondTrainer::new(config.clone(), prompts, reference, seed)?;
    let mut rows = Vec::with_capacity(config.steps);
    trainer.run(config.steps, 1, |_, r| {
        rows.push(r);
        Ok(())
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::exact_kl;
    use crate::outcome_space::{Prompt, PromptId, Vocab};
    use crate::policy::CategoricalPolicy;
    use proptest::prelude::*;

    fn sample(r: f64, a: f64, b: f64) -> JBondSample {
        JBondSample {
            prompt: 0,
            y: 0,
            anchors: [1, 2],
            reward: r,
            anchor_rewards: [a, b],
        }
    }

    fn random_set(m: usize, prompts: usize, seed: u64) -> (PromptSet, CategoricalPolicy) {
        let vocab = Vocab::new(m, 1).unwrap();
        let mut rng = Seed(seed).rng();
        let set = PromptSet::new(
            (0..prompts)
                .map(|i| {
                    let r = (0..m).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                    Prompt::new(PromptId(i as u32), vocab, r).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let reference = CategoricalPolicy::random(&set, 1.0, &mut rng).unwrap();
        (set, reference)
    }

    #[test]
    fn reward_examples() {
        assert_eq!(jbond_reward(&sample(0.1, 0.5, 0.9)), -(16f64).ln());
        assert_eq!(jbond_reward(&sample(0.7, 0.5, 0.9)), 0.0);
        assert_eq!(jbond_reward(&sample(0.5, 0.5, 0.9)), 0.0);
        assert_eq!(
            jbond_reward_with(&sample(0.5, 0.5, 0.9), RewardComparison::NonStrict),
            -JBOND_PENALTY
        );
    }

    #[test]
    fn expectation_examples() {
        assert!((jbond_reward_expectation(0.5) - 0.5f64.ln()).abs() <= 1e-15);
        assert_eq!(jbond_reward_expectation(1.0), 0.0);
        assert_eq!(jbond_reward_expectation(0.0), -(16f64).ln());
    }

    #[test]
    fn zero_steps_keep_the_reference() {
        let (set, reference) = random_set(4, 2, 1);
        let cfg = JBondConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(run_jbond(&cfg, &set, reference.clone(), Seed(0))
            .unwrap()
            .is_empty());
        let t = JBondTrainer::new(cfg, &set, reference.clone(), Seed(0)).unwrap();
        assert_eq!(t.policy(), &reference);
    }

    #[test]
    fn runs_are_deterministic() {
        let (set, reference) = random_set(4, 3, 2);
        let cfg = JBondConfig {
            steps: 30,
            batch_size: 4,
            ..Default::default()
        };
        let a = run_jbond(&cfg, &set, reference.clone(), Seed(9)).unwrap();
        let b = run_jbond(&cfg, &set, reference, Seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_config_shrinks_kl_to_the_anchor() {
        // equal rewards never trigger the strict penalty
        let vocab = Vocab::new(4, 1).unwrap();
        let set =
            PromptSet::new(vec![Prompt::new(PromptId(0), vocab, vec![0.5; 4]).unwrap()]).unwrap();
        let reference =
            CategoricalPolicy::from_logits(&set, vec![vec![0.0, 1.0, -1.0, 0.5]]).unwrap();
        let cfg = JBondConfig {
            beta: 1.0,
            eta: 0.0,
            gamma: 0.0,
            learning_rate: 0.05,
            batch_size: 8,
            ..Default::default()
        };
        let mut t = JBondTrainer::new(cfg, &set, reference.clone(), Seed(4)).unwrap();
        let start = CategoricalPolicy::from_logits(&set, vec![vec![2.0, -1.0, 0.0, 1.0]]).unwrap();
        t.policy = start;
        let kl = |t: &JBondTrainer<CategoricalPolicy>| {
            exact_kl(&t.policy().distribution(0), &t.anchor().distribution(0)).unwrap()
        };
        let before = kl(&t);
        for _ in 0..100 {
            t.step().unwrap();
        }
        assert_eq!(t.anchor(), &reference);
        assert!(kl(&t) < before * 0.5, "{} vs {before}", kl(&t));
    }

    #[test]
    fn anchor_stays_in_the_envelope_of_past_iterates() {
        let (set, reference) = random_set(3, 2, 3);
        let cfg = JBondConfig {
            eta: 0.1,
            gamma: 0.5,
            batch_size: 4,
            ..Default::default()
        };
        let mut t = JBondTrainer::new(cfg, &set, reference.clone(), Seed(1)).unwrap();
        let mut lo = reference.params().to_vec();
        let mut hi = lo.clone();
        for _ in 0..200 {
            t.step().unwrap();
            for (i, &x) in t.policy().params().iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
            for (i, &a) in t.anchor().params().iter().enumerate() {
                assert!(a >= lo[i] - 1e-12 && a <= hi[i] + 1e-12);
            }
        }
    }

    #[test]
    fn regularizer_descends_kl_to_the_anchor() {
        let (set, reference) = random_set(4, 1, 5);
        let policy = CategoricalPolicy::random(&set, 1.0, &mut Seed(6).rng()).unwrap();
        let cfg = JBondConfig::default();
        let g = jbond_expected_gradient(&policy, &reference, &set, &cfg).unwrap();
        let kl = |p: &CategoricalPolicy| {
            exact_kl(&p.distribution(0), &reference.distribution(0)).unwrap()
        };
        let mut moved = policy.clone();
        moved.params_mut().axpy(-1e-3, &g.regularizer);
        assert!(kl(&moved) < kl(&policy));
    }

    #[test]
    fn sampled_gradient_is_unbiased() {
        let (set, reference) = random_set(4, 1, 7);
        let policy = CategoricalPolicy::random(&set, 1.0, &mut Seed(8).rng()).unwrap();
        let cfg = JBondConfig {
            eta: 0.0,
            gamma: 0.0,
            batch_size: 1,
            use_baseline: false,
            ..Default::default()
        };
        let mut t = JBondTrainer::new(cfg.clone(), &set, reference.clone(), Seed(0)).unwrap();
        t.policy = policy.clone();
        let exact = jbond_expected_gradient(&policy, &reference, &set, &cfg)
            .unwrap()
            .combined;
        let draws = 100_000u64;
        let len = exact.len();
        let (mut sum, mut sq) = (vec![0.0; len], vec![0.0; len]);
        for d in 0..draws {
            t.step = d;
            let g = t.gradient_on(&t.draw_batch()).combined;
            for i in 0..len {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..len {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let sigma = (var / draws as f64).sqrt();
            assert!(
                (mean - exact[i]).abs() <= 3.0 * sigma + 1e-12,
                "{i}: {mean} vs {}",
                exact[i]
            );
        }
    }

    #[test]
    fn invalid_configs_are_listed() {
        let cfg = JBondConfig {
            beta: -0.1,
            eta: 0.5,
            anchor_update_period: Some(10),
            gamma: -1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(BondError::InvalidConfig { keys }) => {
                assert_eq!(keys, vec!["beta", "eta", "gamma"])
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn calibration_holds_for_any_quantile(p in 0.0f64..=1.0) {
            // P(both anchor rewards beat y) = (1 - p_leq)^2 on tie-free rewards
            let e = jbond_reward_expectation(p);
            prop_assert!((-JBOND_PENALTY..=0.0).contains(&e));
            prop_assert!((e - (-JBOND_PENALTY * (1.0 - p) * (1.0 - p))).abs() < 1e-15);
        }
    }
}
