//! Forward, backward and Jeffreys divergences (nats).

use crate::bon::BonDistribution;
use crate::error::{BondError, Result};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMode {
    Exact,
    Sampled,
}

/// Both KL directions between a policy `p` and a target `q`, and their
/// Jeffreys combination `(1 - beta) KL(q||p) + beta KL(p||q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceReport {
    /// `KL(q || p)`
    pub forward_kl: f64,
    /// `KL(p || q)`
    pub backward_kl: f64,
    pub jeffreys_beta: f64,
    pub jeffreys: f64,
    pub mode: DivergenceMode,
    pub sample_count: usize,
}

/// `KL(p || q) = sum_y p(y) (log p(y) - log q(y))`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(BondError::ShapeMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(BondError::InfiniteDivergence { index: i });
        }
        total += a * (a.ln() - b.ln());
    }
    // rounding can leave -1e-17 for identical inputs
    Ok(total.max(0.0))
}

/// KL between tables given in log space; `p` weights come from `exp(log_p)`.
pub fn exact_kl_log(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(BondError::ShapeMismatch {
            expected: log_p.len(),
            found: log_q.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in log_p.iter().zip(log_q).enumerate() {
        let w = a.exp();
        if w == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(BondError::InfiniteDivergence { index: i });
        }
        total += w * (a - b);
    }
    Ok(total.max(0.0))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(BondError::invalid(
            "beta",
            format!("must lie in [0, 1], got {beta}"),
        ));
    }
    Ok(())
}

/// Exact Jeffreys report between policy table `p` and target `q`.
pub fn jeffreys(p: &[f64], q: &[f64], beta: f64) -> Result<DivergenceReport> {
    check_beta(beta)?;
    let forward_kl = exact_kl(q, p)?;
    let backward_kl = exact_kl(p, q)?;
    Ok(report(forward_kl, backward_kl, beta))
}

/// [`jeffreys`] on log-space tables.
pub fn jeffreys_log(log_p: &[f64], log_q: &[f64], beta: f64) -> Result<DivergenceReport> {
    check_beta(beta)?;
    let forward_kl = exact_kl_log(log_q, log_p)?;
    let backward_kl = exact_kl_log(log_p, log_q)?;
    Ok(report(forward_kl, backward_kl, beta))
}

fn report(forward_kl: f64, backward_kl: f64, beta: f64) -> DivergenceReport {
    let jeffreys = if beta == 0.0 {
        forward_kl
    } else if beta == 1.0 {
        backward_kl
    } else {
        (1.0 - beta) * forward_kl + beta * backward_kl
    };
    DivergenceReport {
        forward_kl,
        backward_kl,
        jeffreys_beta: beta,
        jeffreys,
        mode: DivergenceMode::Exact,
        sample_count: 0,
    }
}

/// Monte-Carlo `KL(pi || pi_BoN)` from policy draws of prompt `prompt`:
/// the mean of `log pi(y) - log pi_BoN(y)`.
pub fn sampled_backward_kl<P: Policy>(
    policy: &P,
    prompt: usize,
    bon: &BonDistribution,
    samples: &[usize],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(BondError::EmptySamples);
    }
    let log_bon = bon.log_probs();
    let total: f64 = samples
        .iter()
        .map(|&y| policy.log_prob_at(prompt, y) - log_bon[y])
        .sum();
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bon::bon_distribution;
    use crate::outcome_space::{Prompt, PromptId, PromptSet, Vocab};
    use crate::policy::CategoricalPolicy;
    use crate::rng::Seed;
    use proptest::prelude::*;

    const P: [f64; 2] = [0.5, 0.5];
    const Q: [f64; 2] = [0.75, 0.25];

    #[test]
    fn two_point_kl() {
        assert_eq!(exact_kl(&P, &P).unwrap(), 0.0);
        let pq = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        let qp = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((exact_kl(&P, &Q).unwrap() - pq).abs() < 1e-15);
        assert!((exact_kl(&Q, &P).unwrap() - qp).abs() < 1e-15);
        assert!((pq - 0.143_841).abs() < 1e-6);
        assert!((qp - 0.130_812).abs() < 1e-6);
        assert!(matches!(
            exact_kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(BondError::InfiniteDivergence { index: 1 })
        ));
        assert_eq!(exact_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn jeffreys_endpoints_and_midpoint() {
        let r0 = jeffreys(&P, &Q, 0.0).unwrap();
        assert_eq!(r0.jeffreys, r0.forward_kl);
        let r1 = jeffreys(&P, &Q, 1.0).unwrap();
        assert_eq!(r1.jeffreys, r1.backward_kl);
        let half = jeffreys(&P, &Q, 0.5).unwrap();
        assert!((half.jeffreys - 0.5 * (0.143_841 + 0.130_812)).abs() < 1e-6);
        assert!((half.jeffreys - 0.5 * (half.forward_kl + half.backward_kl)).abs() < 1e-12);
        assert!(jeffreys(&P, &Q, 1.5).is_err());
    }

    fn two_outcome_policy(dist: &[f64]) -> (PromptSet, CategoricalPolicy) {
        let set = PromptSet::new(vec![Prompt::new(
            PromptId(0),
            Vocab::new(2, 1).unwrap(),
            vec![0.0, 1.0],
        )
        .unwrap()])
        .unwrap();
        let pol = CategoricalPolicy::from_distributions(&set, &[dist.to_vec()]).unwrap();
        (set, pol)
    }

    #[test]
    fn sampled_backward_kl_is_zero_at_the_target() {
        let bd = bon_distribution(&[0.3, 0.7], &[0.0, 1.0], 2).unwrap();
        let (_, pol) = two_outcome_policy(&bd.probs);
        let est = sampled_backward_kl(&pol, 0, &bd, &[0, 1, 1, 0, 1]).unwrap();
        assert!(est.abs() < 1e-12);
        assert!(sampled_backward_kl(&pol, 0, &bd, &[]).is_err());
        assert!(sampled_backward_kl(&pol, 0, &bd, &[1]).unwrap().is_finite());
    }

    #[test]
    fn sampled_backward_kl_is_unbiased() {
        let bd = bon_distribution(&[0.3, 0.7], &[0.0, 1.0], 2).unwrap();
        let (_, pol) = two_outcome_policy(&[0.4, 0.6]);
        let exact = exact_kl(&pol.distribution(0), &bd.probs).unwrap();
        let mut rng = Seed(4).rng();
        // 10k draws: CLT bound from the empirical variance of the log ratio
        let draws = pol.draw(0, &mut rng, 10_000);
        let log_bon = bd.log_probs();
        let terms: Vec<f64> = draws
            .iter()
            .map(|&y| pol.log_prob_at(0, y) - log_bon[y])
            .collect();
        let mean = terms.iter().sum::<f64>() / terms.len() as f64;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (terms.len() - 1) as f64;
        let est = sampled_backward_kl(&pol, 0, &bd, &draws).unwrap();
        assert!((est - mean).abs() < 1e-12);
        assert!((est - exact).abs() <= 3.0 * (var / terms.len() as f64).sqrt());

        // 1000 independent 16-sample estimates
        let estimates: Vec<f64> = (0..1000)
            .map(|_| sampled_backward_kl(&pol, 0, &bd, &pol.draw(0, &mut rng, 16)).unwrap())
            .collect();
        let m = estimates.iter().sum::<f64>() / 1000.0;
        let v = estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 999.0;
        assert!((m - exact).abs() <= 3.0 * (v / 1000.0).sqrt());
    }

    proptest! {
        #[test]
        fn gibbs_inequality(
            a in proptest::collection::vec(0.01f64..1.0, 2..8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let sa: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let b = &b[..p.len()];
            let sb: f64 = b.iter().sum();
            let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
            prop_assert!(exact_kl(&p, &q).unwrap() >= 0.0);
            prop_assert!(exact_kl(&p, &p).unwrap() <= 1e-12);
            let r = jeffreys(&p, &q, 0.3).unwrap();
            prop_assert!((r.jeffreys - (0.7 * r.forward_kl + 0.3 * r.backward_kl)).abs() <= 1e-12);
            let maxdiff = p.iter().zip(&q).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if maxdiff > 1e-3 {
                prop_assert!(exact_kl(&p, &q).unwrap() > 0.0);
            }
        }
    }
}
