//! Exact Best-of-N analytics.
//!
//! For a base distribution `q` and n i.i.d. draws, the winner under the
//! strict reward order is `y` with probability
//!
//! ```text
//! q(y) * p_leq(y)^(n-1) * sum_{i=1..n} (p_less(y) / p_leq(y))^(i-1)
//! ```
//!
//! where `p_less` / `p_leq` are the base masses strictly below / up to and
//! including `y`. The sum (the correction factor) lies in `[1, n]`.
//!
//! Quantiles come in two flavours. [`exact_quantiles`] compares raw rewards
//! and pools tied outcomes into `p_leq`; this is what a Monte-Carlo count
//! `#{r(y_i) <= r(y)} / k` estimates. [`strict_quantiles`] uses the
//! tie-broken order, so `p_leq - p_less = q(y)` always; the Best-of-N law
//! of the strict-order winner is built from these.

use crate::error::{BondError, Result};
use crate::outcome_space::compare_outcomes;

/// Default bound on `|Y|^n` for the brute-force oracle.
pub const DEFAULT_TUPLE_CAP: u128 = 10_000_000;
/// Default bound on `n^m` accepted by [`compose_bon`].
pub const DEFAULT_COMPOSE_CAP: u128 = 1 << 30;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantilePair {
    pub p_less: f64,
    pub p_leq: f64,
}

pub(crate) fn check_normalized(base: &[f64]) -> Result<()> {
    let sum: f64 = base.iter().sum();
    if base.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(BondError::Unnormalized { sum });
    }
    Ok(())
}

fn check_shapes(base: &[f64], rewards: &[f64]) -> Result<()> {
    if base.len() != rewards.len() {
        return Err(BondError::ShapeMismatch {
            expected: rewards.len(),
            found: base.len(),
        });
    }
    if base.is_empty() {
        return Err(BondError::EmptySamples);
    }
    Ok(())
}

/// Outcome indices sorted worst to best under the strict order.
pub(crate) fn strict_ranking(rewards: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| compare_outcomes(rewards, a, b));
    order
}

/// Raw-reward quantiles of every outcome; tied outcomes share `p_leq`.
pub fn exact_quantiles(base: &[f64], rewards: &[f64]) -> Result<Vec<QuantilePair>> {
    check_shapes(base, rewards)?;
    check_normalized(base)?;
    let order = strict_ranking(rewards);
    let mut out = vec![
        QuantilePair {
            p_less: 0.0,
            p_leq: 0.0
        };
        base.len()
    ];
    let mut below = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group = 0.0;
        while j < order.len() && rewards[order[j]] == rewards[order[i]] {
            group += base[order[j]];
            j += 1;
        }
        let upto = below + group;
        for &y in &order[i..j] {
            out[y] = QuantilePair {
                p_less: below,
                p_leq: upto,
            };
        }
        below = upto;
        i = j;
    }
    Ok(out)
}

/// Quantiles under the tie-broken strict order.
pub fn strict_quantiles(base: &[f64], rewards: &[f64]) -> Result<Vec<QuantilePair>> {
    check_shapes(base, rewards)?;
    check_normalized(base)?;
    Ok(strict_quantiles_unchecked(base, rewards))
}

fn strict_quantiles_unchecked(base: &[f64], rewards: &[f64]) -> Vec<QuantilePair> {
    let mut out = vec![
        QuantilePair {
            p_less: 0.0,
            p_leq: 0.0
        };
        base.len()
    ];
    let mut below = 0.0;
    for y in strict_ranking(rewards) {
        let upto = below + base[y];
        out[y] = QuantilePair {
            p_less: below,
            p_leq: upto,
        };
        below = upto;
    }
    out
}

/// `sum_{i=1..n} rho^(i-1)` with `rho = 1 - gap`, evaluated as
/// `(1 - rho^n) / (1 - rho)` through `expm1`/`ln_1p` so that a gap near
/// zero keeps full relative precision.
pub fn correction_factor(gap: f64, n: usize) -> f64 {
    if gap <= 0.0 {
        return n as f64;
    }
    if n == 1 {
        return 1.0;
    }
    -(n as f64 * (-gap).ln_1p()).exp_m1() / gap
}

/// Exact law of the Best-of-N winner.
#[derive(Debug, Clone, PartialEq)]
pub struct BonDistribution {
    pub n: usize,
    pub base: Vec<f64>,
    pub probs: Vec<f64>,
    /// Strict-order quantiles of every outcome.
    pub quantiles: Vec<QuantilePair>,
    /// Correction factor (term B), in `[1, n]`.
    pub correction: Vec<f64>,
}

/// Best-of-`n` distribution of `base` under `rewards`.
pub fn bon_distribution(base: &[f64], rewards: &[f64], n: usize) -> Result<BonDistribution> {
    if n < 1 {
        return Err(BondError::InvalidN { n, min: 1 });
    }
    check_shapes(base, rewards)?;
    check_normalized(base)?;
    let quantiles = strict_quantiles_unchecked(base, rewards);
    let mut probs = Vec::with_capacity(base.len());
    let mut correction = Vec::with_capacity(base.len());
    for (&q, pair) in base.iter().zip(&quantiles) {
        // p_leq - p_less is exactly q(y) under the strict order
        let gap = if q > 0.0 { q / pair.p_leq } else { 0.0 };
        let c = correction_factor(gap, n);
        probs.push(q * pair.p_leq.powi(n as i32 - 1) * c);
        correction.push(c);
    }
    Ok(BonDistribution {
        n,
        base: base.to_vec(),
        probs,
        quantiles,
        correction,
    })
}

impl BonDistribution {
    /// Regularization strength under which this law is the optimal
    /// KL-regularized policy: `1 / (n - 1)`.
    pub fn beta_bond(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(BondError::InvalidN { n: self.n, min: 2 });
        }
        Ok(1.0 / (self.n - 1) as f64)
    }

    /// `log p_leq(y) + log(correction(y)) / (n - 1)`.
    pub fn bond_reward(&self, y: usize) -> Result<f64> {
        if self.n < 2 {
            return Err(BondError::InvalidN { n: self.n, min: 2 });
        }
        let len = self.probs.len();
        let pair = self
            .quantiles
            .get(y)
            .ok_or(BondError::OutcomeOutOfRange { index: y, len })?;
        Ok(pair.p_leq.ln() + self.correction[y].ln() / (self.n - 1) as f64)
    }

    pub fn bond_rewards(&self) -> Result<Vec<f64>> {
        (0..self.probs.len()).map(|y| self.bond_reward(y)).collect()
    }

    /// `log probs`, assembled from the factors so tiny masses stay accurate.
    pub fn log_probs(&self) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.quantiles)
            .zip(&self.correction)
            .map(|((q, pair), c)| q.ln() + (self.n - 1) as f64 * pair.p_leq.ln() + c.ln())
            .collect()
    }
}

/// Enumerates every `n`-tuple of draws and credits its strict-order winner.
pub fn brute_force_bon(base: &[f64], rewards: &[f64], n: usize) -> Result<Vec<f64>> {
    brute_force_bon_capped(base, rewards, n, DEFAULT_TUPLE_CAP)
}

pub fn brute_force_bon_capped(
    base: &[f64],
    rewards: &[f64],
    n: usize,
    cap: u128,
) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(BondError::InvalidN { n, min: 1 });
    }
    check_shapes(base, rewards)?;
    let tuples = (base.len() as u128)
        .checked_pow(n as u32)
        .unwrap_or(u128::MAX);
    if tuples > cap {
        return Err(BondError::TupleCapExceeded { tuples, cap });
    }
    let mut out = vec![0.0; base.len()];
    fn recurse(
        base: &[f64],
        rewards: &[f64],
        left: usize,
        weight: f64,
        winner: Option<usize>,
        out: &mut [f64],
    ) {
        if left == 0 {
            out[winner.expect("n >= 1")] += weight;
            return;
        }
        for (y, &q) in base.iter().enumerate() {
            let w = match winner {
                Some(cur) if compare_outcomes(rewards, cur, y).is_gt() => cur,
                _ => y,
            };
            recurse(base, rewards, left - 1, weight * q, Some(w), out);
        }
    }
    recurse(base, rewards, n, 1.0, None, &mut out);
    Ok(out)
}

/// Max abs deviation between `normalize(base * exp(r_BOND / beta_BOND))`
/// and the Best-of-`n` law.
pub fn tilt_equivalence_check(base: &[f64], rewards: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(BondError::InvalidN { n, min: 2 });
    }
    let bd = bon_distribution(base, rewards, n)?;
    let beta = bd.beta_bond()?;
    let r_bond = bd.bond_rewards()?;
    let logits: Vec<f64> = base
        .iter()
        .zip(&r_bond)
        .map(|(q, r)| {
            if *q > 0.0 {
                q.ln() + r / beta
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let tilted = crate::policy::softmax(&logits);
    Ok(tilted
        .iter()
        .zip(&bd.probs)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

/// Applies Best-of-`n` `m` times, each time to the previous output.
pub fn compose_bon(base: &[f64], rewards: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(BondError::invalid("m", "must be >= 1"));
    }
    let total = (n as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if total > DEFAULT_COMPOSE_CAP {
        return Err(BondError::TupleCapExceeded {
            tuples: total,
            cap: DEFAULT_COMPOSE_CAP,
        });
    }
    let mut current = base.to_vec();
    for _ in 0..m {
        current = bon_distribution(&current, rewards, n)?.probs;
    }
    Ok(current)
}
