//! BOND: distilling the Best-of-N law of an anchor policy by minimizing
//! the Jeffreys divergence `(1 - beta) KL(pi_BoN || pi) + beta KL(pi || pi_BoN)`.
//!
//! The forward term is a supervised loss on Best-of-N draws of the anchor.
//! The backward term is a policy gradient with reward `r_BOND` and
//! regularization `1 / (n - 1)` toward the anchor. Both come in an exact
//! (full-space expectation) and a sampled flavour. Iterative BOND hard-resets
//! the anchor to the current policy every `anchor_update_period` steps.

use serde::{Deserialize, Serialize};

use crate::bon::bon_distribution;
use crate::error::{BondError, Result};
use crate::metrics::{BonTarget, Evaluator, MetricsRow};
use crate::optim::{Optimizer, OptimizerKind};
use crate::outcome_space::{strict_winner, PromptSet};
use crate::policy::{ParamVector, Policy};
use crate::quantile::{mc_quantile, QuantileExample, QuantileModel};
use crate::rng::{BondRng, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Exact,
    Sampled,
}

/// Reward fed to the sampled backward term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `log p_leq_hat(y)`
    LogQuantile,
    /// `p_leq_hat(y)`
    RawQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    None,
    /// Mean return of the other generations in the batch.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileSource {
    /// `k_mc` fresh anchor draws per policy sample.
    Mc,
    /// Tabular BCE model fed one anchor draw per policy sample.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BondConfig {
    pub n: usize,
    pub beta: f64,
    pub k_mc: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub grad_mode: GradMode,
    pub reward_form: RewardForm,
    pub baseline: BaselineKind,
    /// Hard anchor reset period; `None` keeps the anchor at the reference.
    pub anchor_update_period: Option<usize>,
    pub optimizer: OptimizerKind,
    pub quantile_source: QuantileSource,
    pub quantile_learning_rate: f64,
}

impl Default for BondConfig {
    fn default() -> Self {
        BondConfig {
            n: 8,
            beta: 0.5,
            k_mc: 16,
            batch_size: 32,
            learning_rate: 0.1,
            steps: 1000,
            grad_mode: GradMode::Exact,
            reward_form: RewardForm::LogQuantile,
            baseline: BaselineKind::BatchMean,
            anchor_update_period: None,
            optimizer: OptimizerKind::Adam,
            quantile_source: QuantileSource::Mc,
            quantile_learning_rate: 0.05,
        }
    }
}

impl BondConfig {
    /// Names of every field holding an invalid value.
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.n < 2 {
            bad.push("n");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            bad.push("beta");
        }
        if self.k_mc < 1 {
            bad.push("k_mc");
        }
        if self.batch_size < 1 {
            bad.push("batch_size");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if self.anchor_update_period == Some(0) {
            bad.push("anchor_update_period");
        }
        if self.grad_mode == GradMode::Sampled
            && self.baseline == BaselineKind::BatchMean
            && self.batch_size < 2
        {
            bad.push("baseline");
        }
        if self.quantile_learning_rate.is_nan() || self.quantile_learning_rate <= 0.0 {
            bad.push("quantile_learning_rate");
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

    /// `1 / (n - 1)`
    pub fn beta_bond(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }
}

/// How a gradient term is estimated.
pub enum Estimator<'a> {
    Exact,
    Sampled(&'a mut BondRng),
}

/// The two Jeffreys terms and their combination `(1 - beta) fwd + beta bwd`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub forward_term: ParamVector,
    pub backward_term: ParamVector,
    pub combined: ParamVector,
}

impl GradientBatch {
    fn combine(forward_term: ParamVector, backward_term: ParamVector, beta: f64) -> Self {
        let mut combined = ParamVector::zeros(forward_term.len());
        combined.axpy(1.0 - beta, &forward_term);
        combined.axpy(beta, &backward_term);
        GradientBatch {
            forward_term,
            backward_term,
            combined,
        }
    }
}

/// `grad += scale * (-sum_y pi_BoN(y) score(y))`, the exact forward-KL gradient.
pub(crate) fn add_exact_forward<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    n: usize,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let bd = bon_distribution(
        &anchor.distribution(prompt),
        prompts.at(prompt).rewards(),
        n,
    )?;
    let weights: Vec<f64> = bd.probs.iter().map(|p| -scale * p).collect();
    policy.add_expected_score(prompt, &weights, grad);
    Ok(())
}

/// `grad += scale * sum_y pi(y) score(y) (log pi(y) - log pi_BoN(y))`,
/// the exact backward-KL gradient written directly from its definition.
pub(crate) fn add_exact_backward<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    n: usize,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let bd = bon_distribution(
        &anchor.distribution(prompt),
        prompts.at(prompt).rewards(),
        n,
    )?;
    let log_bon = bd.log_probs();
    let weights: Vec<f64> = policy
        .log_distribution(prompt)
        .iter()
        .zip(&log_bon)
        .map(|(lp, lq)| scale * lp.exp() * (lp - lq))
        .collect();
    policy.add_expected_score(prompt, &weights, grad);
    Ok(())
}

/// Prompt served by batch slot `slot` at `step`; consecutive steps rotate
/// through the prompt set.
pub(crate) fn slot_prompt(step: u64, batch_size: usize, slot: usize, prompts: &PromptSet) -> usize {
    ((step as usize).wrapping_mul(batch_size).wrapping_add(slot)) % prompts.len()
}

/// Draws `n` anchor samples and returns their strict-order winner.
pub(crate) fn draw_best_of<P: Policy>(
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    n: usize,
    rng: &mut BondRng,
) -> usize {
    let draws = anchor.draw(prompt, rng, n);
    strict_winner(prompts.at(prompt).rewards(), &draws).expect("n >= 1")
}

/// Gradient of `KL(pi_BoN(anchor) || pi)` for one prompt.
///
/// Sampled: `-score(y)` at one Best-of-`n` draw of the anchor.
pub fn forward_kl_grad<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    n: usize,
    estimator: Estimator<'_>,
) -> Result<ParamVector> {
    if n < 1 {
        return Err(BondError::InvalidN { n, min: 1 });
    }
    let mut g = ParamVector::zeros(policy.params().len());
    match estimator {
        Estimator::Exact => add_exact_forward(policy, anchor, prompts, prompt, n, 1.0, &mut g)?,
        Estimator::Sampled(rng) => {
            let winner = draw_best_of(anchor, prompts, prompt, n, rng);
            policy.add_score(prompt, winner, -1.0, &mut g);
        }
    }
    Ok(g)
}

/// Settings of the sampled backward-KL estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardSettings {
    pub n: usize,
    pub k_mc: usize,
    pub reward_form: RewardForm,
    pub baseline: BaselineKind,
}

/// One policy sample of the sampled backward estimator.
struct BackwardSlot {
    prompt: usize,
    y: usize,
    ret: f64,
}

/// Computes the return `reward - beta_BOND (log pi(y) - log anchor(y))` of a
/// fresh policy sample, with the quantile from MC draws or the learned model.
fn backward_slot<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    settings: BackwardSettings,
    model: Option<(&mut QuantileModel, f64)>,
    seed: Seed,
) -> Result<BackwardSlot> {
    let y = policy.draw(prompt, &mut seed.labeled("policy").rng(), 1)[0];
    let rewards = prompts.at(prompt).rewards();
    let mut qrng = seed.labeled("quantile").rng();
    let p_hat = match model {
        None => {
            let refs = anchor.draw(prompt, &mut qrng, settings.k_mc);
            mc_quantile(rewards, y, &refs)?.value
        }
        Some((model, lr)) => {
            let y_ref = anchor.draw(prompt, &mut qrng, 1)[0];
            model.update(prompts, QuantileExample { prompt, y, y_ref }, lr);
            model.predict(prompt, y)
        }
    };
    let reward = match settings.reward_form {
        RewardForm::LogQuantile => p_hat.ln(),
        RewardForm::RawQuantile => p_hat,
    };
    let beta_bond = 1.0 / (settings.n - 1) as f64;
    let ret = reward - beta_bond * (policy.log_prob_at(prompt, y) - anchor.log_prob_at(prompt, y));
    Ok(BackwardSlot { prompt, y, ret })
}

/// `grad += scale * mean_i [-(n - 1) score(y_i) (R_i - B_i)]`.
fn accumulate_backward<P: Policy>(
    policy: &P,
    slots: &[BackwardSlot],
    settings: BackwardSettings,
    scale: f64,
    grad: &mut [f64],
) {
    let count = slots.len() as f64;
    let total: f64 = slots.iter().map(|s| s.ret).sum();
    for s in slots {
        let baseline = match settings.baseline {
            BaselineKind::BatchMean if slots.len() > 1 => (total - s.ret) / (count - 1.0),
            _ => 0.0,
        };
        let weight = -((settings.n - 1) as f64) * (s.ret - baseline) / count;
        policy.add_score(s.prompt, s.y, scale * weight, grad);
    }
}

/// Gradient of `KL(pi || pi_BoN(anchor))` for one prompt.
///
/// Exact: the full-space expectation including the correction term.
/// Sampled: `samples` policy draws, each with its own `k_mc` anchor draws
/// for the quantile; the correction term is dropped.
pub fn backward_kl_grad<P: Policy>(
    policy: &P,
    anchor: &P,
    prompts: &PromptSet,
    prompt: usize,
    settings: BackwardSettings,
    samples: usize,
    estimator: Estimator<'_>,
) -> Result<ParamVector> {
    if settings.n < 2 {
        return Err(BondError::InvalidN {
            n: settings.n,
            min: 2,
        });
    }
    let mut g = ParamVector::zeros(policy.params().len());
    match estimator {
        Estimator::Exact => {
            add_exact_backward(policy, anchor, prompts, prompt, settings.n, 1.0, &mut g)?
        }
        Estimator::Sampled(rng) => {
            if samples == 0 || settings.k_mc == 0 {
                return Err(BondError::EmptySamples);
            }
            let slots = (0..samples)
                .map(|_| {
                    let seed = Seed(rand::Rng::random(rng));
                    backward_slot(policy, anchor, prompts, prompt, settings, None, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            accumulate_backward(policy, &slots, settings, 1.0, &mut g);
        }
    }
    Ok(g)
}

/// Policy, anchor, frozen reference, optimizer moments and step counter.
#[derive(Debug, Clone)]
pub struct TrainState<P: Policy> {
    pub policy: P,
    pub anchor: P,
    pub reference: P,
    pub optimizer: Optimizer,
    pub step: u64,
    pub quantile_model: Option<QuantileModel>,
}

impl<P: Policy> TrainState<P> {
    /// Policy and anchor start at the reference.
    pub fn new(reference: P, optimizer: OptimizerKind) -> Self {
        let len = reference.params().len();
        TrainState {
            policy: reference.clone(),
            anchor: reference.clone(),
            reference,
            optimizer: Optimizer::new(optimizer, len),
            step: 0,
            quantile_model: None,
        }
    }
}

/// Owns one BOND (or iterative BOND) run.
#[derive(Debug, Clone)]
pub struct BondTrainer<P: Policy> {
    config: BondConfig,
    prompts: PromptSet,
    evaluator: Evaluator,
    state: TrainState<P>,
    seed: Seed,
}

impl<P: Policy> BondTrainer<P> {
    pub fn new(config: BondConfig, prompts: &PromptSet, reference: P, seed: Seed) -> Result<Self> {
        config.validate()?;
        let evaluator = Evaluator::new(prompts, &reference)?;
        let mut state = TrainState::new(reference, config.optimizer);
        if config.quantile_source == QuantileSource::Learned {
            state.quantile_model = Some(QuantileModel::new(prompts));
        }
        Ok(BondTrainer {
            config,
            prompts: prompts.clone(),
            evaluator,
            state,
            seed,
        })
    }

    pub fn config(&self) -> &BondConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState<P> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState<P> {
        &mut self.state
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Jeffreys gradient at the current state, averaged over the batch.
    pub fn gradient(&mut self) -> Result<GradientBatch> {
        let cfg = &self.config;
        let len = self.state.policy.params().len();
        let mut fwd = ParamVector::zeros(len);
        let mut bwd = ParamVector::zeros(len);
        let (policy, anchor) = (&self.state.policy, &self.state.anchor);
        match cfg.grad_mode {
            GradMode::Exact => {
                let w = 1.0 / self.prompts.len() as f64;
                for prompt in 0..self.prompts.len() {
                    add_exact_forward(policy, anchor, &self.prompts, prompt, cfg.n, w, &mut fwd)?;
                    add_exact_backward(policy, anchor, &self.prompts, prompt, cfg.n, w, &mut bwd)?;
                }
            }
            GradMode::Sampled => {
                let step_seed = self.seed.child(self.state.step);
                let settings = BackwardSettings {
                    n: cfg.n,
                    k_mc: cfg.k_mc,
                    reward_form: cfg.reward_form,
                    baseline: cfg.baseline,
                };
                let b = cfg.batch_size;
                let w = 1.0 / b as f64;
                let mut slots = Vec::with_capacity(b);
                for j in 0..b {
                    let prompt = slot_prompt(self.state.step, b, j, &self.prompts);
                    let slot_seed = step_seed.child(j as u64);
                    let winner = draw_best_of(
                        anchor,
                        &self.prompts,
                        prompt,
                        cfg.n,
                        &mut slot_seed.labeled("forward").rng(),
                    );
                    policy.add_score(prompt, winner, -w, &mut fwd);
                    let model = self
                        .state
                        .quantile_model
                        .as_mut()
                        .map(|m| (m, cfg.quantile_learning_rate));
                    slots.push(backward_slot(
                        policy,
                        anchor,
                        &self.prompts,
                        prompt,
                        settings,
                        model,
                        slot_seed,
                    )?);
                }
                accumulate_backward(policy, &slots, settings, 1.0, &mut bwd);
            }
        }
        Ok(GradientBatch::combine(fwd, bwd, cfg.beta))
    }

    /// One optimizer update, then the periodic anchor reset if due.
    pub fn step(&mut self) -> Result<GradientBatch> {
        let batch = self.gradient()?;
        let lr = self.config.learning_rate;
        let state = &mut self.state;
        state
            .optimizer
            .step(state.policy.params_mut(), &batch.combined, lr);
        state.step += 1;
        if let Some(period) = self.config.anchor_update_period {
            if state.step.is_multiple_of(period as u64) {
                state.anchor = state.policy.clone();
            }
        }
        Ok(batch)
    }

    /// Exact metrics of the current state against Best-of-`n` of the anchor.
    pub fn metrics(&self) -> Result<MetricsRow> {
        self.evaluator.evaluate(
            self.state.step,
            &self.state.policy,
            Some(&self.state.anchor),
            Some(BonTarget {
                n: self.config.n,
                beta: self.config.beta,
            }),
        )
    }

    /// [`step`](Self::step) followed by [`metrics`](Self::metrics).
    pub fn step_logged(&mut self) -> Result<(GradientBatch, MetricsRow)> {
        let batch = self.step()?;
        Ok((batch, self.metrics()?))
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

    /// Runs `total_steps` updates and returns one metrics row per step.
    pub fn iterative_bond(&mut self, total_steps: usize) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::with_capacity(total_steps);
        self.run(total_steps, 1, |_, r| {
            rows.push(r);
            Ok(())
        })?;
        Ok(rows)
    }
}
