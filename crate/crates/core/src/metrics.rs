//! Exact per-step training metrics.

use std::fmt::Write as _;

use crate::bon::{bon_distribution, exact_quantiles};
use crate::divergence::{exact_kl_log, jeffreys_log};
use crate::error::Result;
use crate::outcome_space::PromptSet;
use crate::policy::Policy;

/// Bit-exact header of the metrics CSV.
pub const METRICS_HEADER: &str =
    "step,reward_mean,log_quantile_mean,kl_to_ref,fwd_kl_to_bon,bwd_kl_to_bon,jeffreys,kl_to_anchor";

/// One logged evaluation. Every value is a uniform average over prompts;
/// quantiles are taken against the reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub reward_mean: f64,
    pub log_quantile_mean: f64,
    pub kl_to_ref: f64,
    /// `KL(pi_BoN(anchor) || pi)`
    pub fwd_kl_to_bon: Option<f64>,
    /// `KL(pi || pi_BoN(anchor))`
    pub bwd_kl_to_bon: Option<f64>,
    pub jeffreys: Option<f64>,
    pub kl_to_anchor: Option<f64>,
}

impl MetricsRow {
    /// CSV line without terminator; undefined fields are empty.
    pub fn to_csv_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{}",
            self.step, self.reward_mean, self.log_quantile_mean, self.kl_to_ref
        )
        .unwrap();
        for v in [
            self.fwd_kl_to_bon,
            self.bwd_kl_to_bon,
            self.jeffreys,
            self.kl_to_anchor,
        ] {
            s.push(',');
            if let Some(v) = v {
                write!(s, "{v}").unwrap();
            }
        }
        s
    }
}

/// The Best-of-`n` target of the anchor and the Jeffreys weight to report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonTarget {
    pub n: usize,
    pub beta: f64,
}

/// Caches everything that depends only on the frozen reference.
#[derive(Debug, Clone)]
pub struct Evaluator {
    prompts: PromptSet,
    ref_log_dists: Vec<Vec<f64>>,
    ref_log_quantiles: Vec<Vec<f64>>,
}

impl Evaluator {
    pub fn new<P: Policy>(prompts: &PromptSet, reference: &P) -> Result<Self> {
        let mut ref_log_dists = Vec::with_capacity(prompts.len());
        let mut ref_log_quantiles = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let q = exact_quantiles(&reference.distribution(i), p.rewards())?;
            ref_log_quantiles.push(q.iter().map(|x| x.p_leq.ln()).collect());
            ref_log_dists.push(reference.log_distribution(i));
        }
        Ok(Evaluator {
            prompts: prompts.clone(),
            ref_log_dists,
            ref_log_quantiles,
        })
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Metrics of `policy`. The BoN columns need `anchor` and `target`;
    /// `kl_to_anchor` needs `anchor`.
    pub fn evaluate<P: Policy>(
        &self,
        step: u64,
        policy: &P,
        anchor: Option<&P>,
        target: Option<BonTarget>,
    ) -> Result<MetricsRow> {
        let count = self.prompts.len() as f64;
        let mut reward = 0.0;
        let mut log_q = 0.0;
        let mut kl_ref = 0.0;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        let mut jeff = 0.0;
        let mut kl_anchor = 0.0;
        for (i, prompt) in self.prompts.iter().enumerate() {
            let log_pi = policy.log_distribution(i);
            for (y, lp) in log_pi.iter().enumerate() {
                let w = lp.exp();
                reward += w * prompt.rewards()[y];
                log_q += w * self.ref_log_quantiles[i][y];
            }
            kl_ref += exact_kl_log(&log_pi, &self.ref_log_dists[i])?;
            if let Some(anchor) = anchor {
                kl_anchor += exact_kl_log(&log_pi, &anchor.log_distribution(i))?;
                if let Some(t) = target {
                    let bd = bon_distribution(&anchor.distribution(i), prompt.rewards(), t.n)?;
                    let r = jeffreys_log(&log_pi, &bd.log_probs(), t.beta)?;
                    fwd += r.forward_kl;
                    bwd += r.backward_kl;
                    jeff += r.jeffreys;
                }
            }
        }
        let with_target = anchor.is_some() && target.is_some();
        Ok(MetricsRow {
            step,
            reward_mean: reward / count,
            log_quantile_mean: log_q / count,
            kl_to_ref: kl_ref / count,
            fwd_kl_to_bon: with_target.then_some(fwd / count),
            bwd_kl_to_bon: with_target.then_some(bwd / count),
            jeffreys: with_target.then_some(jeff / count),
            kl_to_anchor: anchor.map(|_| kl_anchor / count),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outcome_space::{Prompt, PromptId, Vocab};
    use crate::policy::CategoricalPolicy;

    #[test]
    fn csv_line_leaves_undefined_fields_empty() {
        let row = MetricsRow {
            step: 3,
            reward_mean: 0.5,
            log_quantile_mean: -0.25,
            kl_to_ref: 0.0,
            fwd_kl_to_bon: None,
            bwd_kl_to_bon: None,
            jeffreys: None,
            kl_to_anchor: Some(1e-3),
        };
        assert_eq!(row.to_csv_line(), "3,0.5,-0.25,0,,,,0.001");
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }

    #[test]
    fn reference_against_itself() {
        let set = PromptSet::new(vec![Prompt::new(
            PromptId(0),
            Vocab::new(2, 1).unwrap(),
            vec![0.0, 1.0],
        )
        .unwrap()])
        .unwrap();
        let reference = CategoricalPolicy::from_distributions(&set, &[vec![0.3, 0.7]]).unwrap();
        let ev = Evaluator::new(&set, &reference).unwrap();
        let row = ev
            .evaluate(
                0,
                &reference,
                Some(&reference),
                Some(BonTarget { n: 2, beta: 0.5 }),
            )
            .unwrap();
        assert!((row.reward_mean - 0.7).abs() < 1e-12);
        assert!((row.log_quantile_mean - (0.3 * 0.3f64.ln())).abs() < 1e-12);
        assert_eq!(row.kl_to_ref, 0.0);
        assert_eq!(row.kl_to_anchor, Some(0.0));
        let expected_bwd = 0.3 * (0.3f64 / 0.09).ln() + 0.7 * (0.7f64 / 0.91).ln();
        assert!((row.bwd_kl_to_bon.unwrap() - expected_bwd).abs() < 1e-12);
        let plain = ev.evaluate(0, &reference, None, None).unwrap();
        assert_eq!(plain.fwd_kl_to_bon, None);
        assert_eq!(plain.kl_to_anchor, None);
    }
}
