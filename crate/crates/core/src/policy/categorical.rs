use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use super::{
    fill_from_rows, fmt_checkpoint_row, log_sum_exp, parse_checkpoint, prompt_layout, softmax,
    CdfSampler, ParamVector, Policy, PolicyKind, CHECKPOINT_HEADER,
};
use crate::error::{BondError, Result};
use crate::outcome_space::{PromptId, PromptSet, Vocab, DEFAULT_ENUMERATION_CAP};
use crate::rng::BondRng;

/// One free logit per outcome of every prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    ids: Vec<PromptId>,
    vocabs: Vec<Vocab>,
    offsets: Vec<usize>,
    params: ParamVector,
}

impl CategoricalPolicy {
    /// All-zero logits: the uniform distribution over every space.
    pub fn uniform(prompts: &PromptSet) -> Result<Self> {
        for p in prompts.iter() {
            p.vocab().checked_outcome_count(DEFAULT_ENUMERATION_CAP)?;
        }
        let (ids, vocabs, offsets) = prompt_layout(prompts, |v| v.outcome_count() as usize);
        let params = ParamVector::zeros(*offsets.last().unwrap());
        Ok(CategoricalPolicy {
            ids,
            vocabs,
            offsets,
            params,
        })
    }

    /// Builds a policy from one logit vector per prompt, in prompt-set order.
    pub fn from_logits(prompts: &PromptSet, logits: Vec<Vec<f64>>) -> Result<Self> {
        let mut policy = Self::uniform(prompts)?;
        if logits.len() != prompts.len() {
            return Err(BondError::ShapeMismatch {
                expected: prompts.len(),
                found: logits.len(),
            });
        }
        for (i, row) in logits.into_iter().enumerate() {
            let range = policy.param_range(i);
            if row.len() != range.len() {
                return Err(BondError::ShapeMismatch {
                    expected: range.len(),
                    found: row.len(),
                });
            }
            policy.params[range].copy_from_slice(&row);
        }
        Ok(policy)
    }

    /// Logits `ln p` for strictly positive tables.
    pub fn from_distributions(prompts: &PromptSet, dists: &[Vec<f64>]) -> Result<Self> {
        let logits = dists
            .iter()
            .map(|d| {
                if d.iter().any(|&p| p <= 0.0) {
                    return Err(BondError::invalid(
                        "distribution",
                        "softmax policies need strictly positive mass",
                    ));
                }
                Ok(d.iter().map(|p| p.ln()).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::from_logits(prompts, logits)
    }

    /// Logits drawn i.i.d. uniform in `[-scale, scale]`.
    pub fn random(prompts: &PromptSet, scale: f64, rng: &mut BondRng) -> Result<Self> {
        let mut policy = Self::uniform(prompts)?;
        for x in policy.params.iter_mut() {
            *x = rng.random_range(-scale..=scale);
        }
        Ok(policy)
    }

    pub fn logits(&self, prompt: usize) -> &[f64] {
        &self.params[self.param_range(prompt)]
    }

    pub fn load_checkpoint(path: &Path, prompts: &PromptSet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BondError::io(path, e))?;
        Self::parse_checkpoint(&text, &path.display().to_string(), prompts)
    }

    pub fn parse_checkpoint(text: &str, source: &str, prompts: &PromptSet) -> Result<Self> {
        let rows = parse_checkpoint(text, source, PolicyKind::Categorical)?;
        fill_from_rows(
            Self::uniform(prompts)?,
            rows,
            source,
            |p, prompt, index, token| {
                let range = p.param_range(prompt);
                (token.is_none() && index < range.len()).then(|| range.start + index)
            },
        )
    }
}

impl Policy for CategoricalPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Categorical
    }

    fn prompt_ids(&self) -> &[PromptId] {
        &self.ids
    }

    fn vocab(&self, prompt: usize) -> Vocab {
        self.vocabs[prompt]
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn param_range(&self, prompt: usize) -> Range<usize> {
        self.offsets[prompt]..self.offsets[prompt + 1]
    }

    fn log_prob_at(&self, prompt: usize, y: usize) -> f64 {
        let logits = self.logits(prompt);
        logits[y] - log_sum_exp(logits)
    }

    fn log_distribution(&self, prompt: usize) -> Vec<f64> {
        let logits = self.logits(prompt);
        let lse = log_sum_exp(logits);
        logits.iter().map(|l| l - lse).collect()
    }

    fn distribution(&self, prompt: usize) -> Vec<f64> {
        softmax(self.logits(prompt))
    }

    fn draw(&self, prompt: usize, rng: &mut BondRng, count: usize) -> Vec<usize> {
        let sampler = CdfSampler::new(&self.distribution(prompt));
        (0..count).map(|_| sampler.draw(rng)).collect()
    }

    fn add_score(&self, prompt: usize, y: usize, scale: f64, grad: &mut [f64]) {
        let range = self.param_range(prompt);
        let probs = softmax(&self.params[range.clone()]);
        let block = &mut grad[range];
        for (g, p) in block.iter_mut().zip(&probs) {
            *g -= scale * p;
        }
        block[y] += scale;
    }

    fn add_expected_score(&self, prompt: usize, weights: &[f64], grad: &mut [f64]) {
        let range = self.param_range(prompt);
        let probs = softmax(&self.params[range.clone()]);
        let total: f64 = weights.iter().sum();
        for ((g, p), w) in grad[range].iter_mut().zip(&probs).zip(weights) {
            *g += w - total * p;
        }
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "# kind={}", self.kind())?;
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        for (i, &id) in self.ids.iter().enumerate() {
            for (y, &l) in self.logits(i).iter().enumerate() {
                fmt_checkpoint_row(out, id, y, None, l)?;
            }
        }
        Ok(())
    }
}
