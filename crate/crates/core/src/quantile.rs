//! Stochastic reward-quantile estimation.
//!
//! [`mc_quantile`] counts reference samples that are no better than `y`.
//! [`QuantileModel`] is a tabular binary classifier trained with binary
//! cross-entropy on single reference draws.

use crate::bon::QuantilePair;
use crate::error::{BondError, Result};
use crate::outcome_space::PromptSet;

/// Logits of the learned model are clamped to `[-cap, cap]`.
pub const QUANTILE_LOGIT_CAP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McQuantileEstimate {
    /// `max(raw_count, 1) / k`
    pub value: f64,
    pub k: usize,
    pub raw_count: usize,
}

/// Monte-Carlo estimate of `p_leq(y)` from reference draws.
///
/// The estimate is floored at `1/k` so that its logarithm stays finite.
pub fn mc_quantile(rewards: &[f64], y: usize, ref_samples: &[usize]) -> Result<McQuantileEstimate> {
    if ref_samples.is_empty() {
        return Err(BondError::EmptySamples);
    }
    let ry = *rewards.get(y).ok_or(BondError::OutcomeOutOfRange {
        index: y,
        len: rewards.len(),
    })?;
    let raw_count = ref_samples.iter().filter(|&&s| rewards[s] <= ry).count();
    let k = ref_samples.len();
    Ok(McQuantileEstimate {
        value: raw_count.max(1) as f64 / k as f64,
        k,
        raw_count,
    })
}

/// One BCE training example: prompt position, scored outcome `y`, and a
/// reference draw `y_ref`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantileExample {
    pub prompt: usize,
    pub y: usize,
    pub y_ref: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One logit per (prompt, outcome); prediction is `sigmoid(theta)`.
///
/// Training runs constant-step SGD on a raw iterate and reports the
/// Polyak average of that iterate over the entry's updates, which removes
/// the stationary SGD jitter without a step-size schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    offsets: Vec<usize>,
    theta: Vec<f64>,
    iterate: Vec<f64>,
    visits: Vec<u64>,
}

impl QuantileModel {
    /// All logits zero (every prediction 0.5).
    pub fn new(prompts: &PromptSet) -> Self {
        let mut offsets = vec![0];
        for p in prompts.iter() {
            offsets.push(offsets.last().unwrap() + p.num_outcomes());
        }
        let total = *offsets.last().unwrap();
        QuantileModel {
            offsets,
            theta: vec![0.0; total],
            iterate: vec![0.0; total],
            visits: vec![0; total],
        }
    }

    fn slot(&self, prompt: usize, y: usize) -> usize {
        debug_assert!(self.offsets[prompt] + y < self.offsets[prompt + 1]);
        self.offsets[prompt] + y
    }

    pub fn theta(&self, prompt: usize, y: usize) -> f64 {
        self.theta[self.slot(prompt, y)]
    }

    pub fn predict(&self, prompt: usize, y: usize) -> f64 {
        sigmoid(self.theta(prompt, y))
    }

    pub fn predictions(&self, prompt: usize) -> Vec<f64> {
        self.theta[self.offsets[prompt]..self.offsets[prompt + 1]]
            .iter()
            .map(|&t| sigmoid(t))
            .collect()
    }

    /// One stochastic BCE step on a single reference draw.
    pub fn update(&mut self, prompts: &PromptSet, ex: QuantileExample, learning_rate: f64) {
        let rewards = prompts.at(ex.prompt).rewards();
        let label = if rewards[ex.y_ref] <= rewards[ex.y] {
            1.0
        } else {
            0.0
        };
        let s = self.slot(ex.prompt, ex.y);
        // d/dtheta of -[z log s(theta) + (1 - z) log(1 - s(theta))] = s(theta) - z
        let grad = sigmoid(self.iterate[s]) - label;
        self.iterate[s] =
            (self.iterate[s] - learning_rate * grad).clamp(-QUANTILE_LOGIT_CAP, QUANTILE_LOGIT_CAP);
        self.visits[s] += 1;
        self.theta[s] += (self.iterate[s] - self.theta[s]) / self.visits[s] as f64;
    }
}

/// Runs one BCE step per example of `stream`.
pub fn train_quantile_model(
    model: &mut QuantileModel,
    prompts: &PromptSet,
    stream: impl IntoIterator<Item = QuantileExample>,
    learning_rate: f64,
) -> Result<()> {
    if learning_rate.is_nan() || learning_rate <= 0.0 {
        return Err(BondError::invalid(
            "learning_rate",
            format!("must be > 0, got {learning_rate}"),
        ));
    }
    for ex in stream {
        if ex.prompt >= prompts.len() {
            return Err(BondError::OutcomeOutOfRange {
                index: ex.prompt,
                len: prompts.len(),
            });
        }
        let m = prompts.at(ex.prompt).num_outcomes();
        for idx in [ex.y, ex.y_ref] {
            if idx >= m {
                return Err(BondError::OutcomeOutOfRange { index: idx, len: m });
            }
        }
        model.update(prompts, ex, learning_rate);
    }
    Ok(())
}

/// `sum_y w(y) |prediction(y) - p_leq(y)|` with weights normalized to one.
pub fn quantile_abs_error(
    model: &QuantileModel,
    prompt: usize,
    exact: &[QuantilePair],
    weights: &[f64],
) -> f64 {
    let total: f64 = weights.iter().sum();
    exact
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(y, (pair, w))| w * (model.predict(prompt, y) - pair.p_leq).abs())
        .sum::<f64>()
        / total
}
