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

/// Per-step softmax over the next token given every proper prefix.
///
/// Prefixes are ranked level by level: the empty prefix is 0, prefixes
/// of length 1 follow, and so on, each level in lexicographic order.
/// The logits of prefix `k` occupy `k * size .. (k + 1) * size` of the
/// prompt's block.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressivePolicy {
    ids: Vec<PromptId>,
    vocabs: Vec<Vocab>,
    offsets: Vec<usize>,
    params: ParamVector,
}

/// Number of proper prefixes (lengths `0..max_len`).
fn prefix_count(v: Vocab) -> usize {
    (0..v.max_len()).map(|l| v.size().pow(l as u32)).sum()
}

fn level_offset(v: Vocab, level: usize) -> usize {
    (0..level).map(|l| v.size().pow(l as u32)).sum()
}

impl AutoregressivePolicy {
    pub fn uniform(prompts: &PromptSet) -> Result<Self> {
        for p in prompts.iter() {
            p.vocab().checked_outcome_count(DEFAULT_ENUMERATION_CAP)?;
        }
        let (ids, vocabs, offsets) = prompt_layout(prompts, |v| prefix_count(v) * v.size());
        let params = ParamVector::zeros(*offsets.last().unwrap());
        Ok(AutoregressivePolicy {
            ids,
            vocabs,
            offsets,
            params,
        })
    }

    pub fn random(prompts: &PromptSet, scale: f64, rng: &mut BondRng) -> Result<Self> {
        let mut policy = Self::uniform(prompts)?;
        for x in policy.params.iter_mut() {
            *x = rng.random_range(-scale..=scale);
        }
        Ok(policy)
    }

    /// Represents full-sequence tables exactly: each next-token logit is the
    /// log of the mass below the corresponding child prefix.
    pub fn from_distributions(prompts: &PromptSet, dists: &[Vec<f64>]) -> Result<Self> {
        let mut policy = Self::uniform(prompts)?;
        if dists.len() != prompts.len() {
            return Err(BondError::ShapeMismatch {
                expected: prompts.len(),
                found: dists.len(),
            });
        }
        for (p, dist) in dists.iter().enumerate() {
            let v = policy.vocabs[p];
            let t = v.size();
            if dist.len() != v.outcome_count() as usize {
                return Err(BondError::ShapeMismatch {
                    expected: v.outcome_count() as usize,
                    found: dist.len(),
                });
            }
            if dist.iter().any(|&x| x <= 0.0) {
                return Err(BondError::invalid(
                    "distribution",
                    "softmax policies need strictly positive mass",
                ));
            }
            let start = policy.offsets[p];
            let mut mass = dist.clone();
            for level in (0..v.max_len()).rev() {
                let nodes = t.pow(level as u32);
                let base = start + level_offset(v, level) * t;
                for node in 0..nodes {
                    for tok in 0..t {
                        policy.params[base + node * t + tok] = mass[node * t + tok].ln();
                    }
                }
                mass = (0..nodes)
                    .map(|n| mass[n * t..(n + 1) * t].iter().sum())
                    .collect();
            }
        }
        Ok(policy)
    }

    /// Next-token logits after the first `level` tokens of prefix value `node`.
    pub fn step_logits(&self, prompt: usize, level: usize, node: usize) -> &[f64] {
        let v = self.vocabs[prompt];
        let t = v.size();
        let start = self.offsets[prompt] + (level_offset(v, level) + node) * t;
        &self.params[start..start + t]
    }

    pub fn load_checkpoint(path: &Path, prompts: &PromptSet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BondError::io(path, e))?;
        Self::parse_checkpoint(&text, &path.display().to_string(), prompts)
    }

    pub fn parse_checkpoint(text: &str, source: &str, prompts: &PromptSet) -> Result<Self> {
        let rows = parse_checkpoint(text, source, PolicyKind::Autoregressive)?;
        fill_from_rows(
            Self::uniform(prompts)?,
            rows,
            source,
            |p, prompt, prefix, token| {
                let v = p.vocabs[prompt];
                let token = token?;
                (token < v.size() && prefix < prefix_count(v))
                    .then(|| p.offsets[prompt] + prefix * v.size() + token)
            },
        )
    }

    /// Calls `f(level, node, token)` for each step of outcome `y`.
    fn walk(&self, prompt: usize, y: usize, mut f: impl FnMut(usize, usize, usize)) {
        let v = self.vocabs[prompt];
        let t = v.size();
        let len = v.max_len();
        for level in 0..len {
            let below = t.pow((len - level) as u32);
            let node = y / below;
            let token = (y / (below / t)) % t;
            f(level, node, token);
        }
    }
}

impl Policy for AutoregressivePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Autoregressive
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
        let mut total = 0.0;
        self.walk(prompt, y, |level, node, token| {
            let logits = self.step_logits(prompt, level, node);
            total += logits[token] - log_sum_exp(logits);
        });
        total
    }

    fn log_distribution(&self, prompt: usize) -> Vec<f64> {
        let v = self.vocabs[prompt];
        let t = v.size();
        let mut current = vec![0.0];
        for level in 0..v.max_len() {
            let mut next = Vec::with_capacity(current.len() * t);
            for (node, &lp) in current.iter().enumerate() {
                let logits = self.step_logits(prompt, level, node);
                let lse = log_sum_exp(logits);
                next.extend(logits.iter().map(|l| lp + l - lse));
            }
            current = next;
        }
        current
    }

    fn draw(&self, prompt: usize, rng: &mut BondRng, count: usize) -> Vec<usize> {
        let v = self.vocabs[prompt];
        (0..count)
            .map(|_| {
                let mut node = 0;
                for level in 0..v.max_len() {
                    let probs = softmax(self.step_logits(prompt, level, node));
                    node = node * v.size() + CdfSampler::new(&probs).draw(rng);
                }
                node
            })
            .collect()
    }

    fn add_score(&self, prompt: usize, y: usize, scale: f64, grad: &mut [f64]) {
        let v = self.vocabs[prompt];
        let t = v.size();
        self.walk(prompt, y, |level, node, token| {
            let probs = softmax(self.step_logits(prompt, level, node));
            let start = self.offsets[prompt] + (level_offset(v, level) + node) * t;
            for (k, p) in probs.iter().enumerate() {
                grad[start + k] -= scale * p;
            }
            grad[start + token] += scale;
        });
    }

    fn add_expected_score(&self, prompt: usize, weights: &[f64], grad: &mut [f64]) {
        let v = self.vocabs[prompt];
        let t = v.size();
        // subtree weights, bottom-up
        let mut below = weights.to_vec();
        for level in (0..v.max_len()).rev() {
            let nodes = t.pow(level as u32);
            let mut here = Vec::with_capacity(nodes);
            for node in 0..nodes {
                let children = &below[node * t..(node + 1) * t];
                let total: f64 = children.iter().sum();
                let probs = softmax(self.step_logits(prompt, level, node));
                let start = self.offsets[prompt] + (level_offset(v, level) + node) * t;
                for k in 0..t {
                    grad[start + k] += children[k] - total * probs[k];
                }
                here.push(total);
            }
            below = here;
        }
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "# kind={}", self.kind())?;
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        for (i, &id) in self.ids.iter().enumerate() {
            let t = self.vocabs[i].size();
            for (k, &l) in self.params[self.param_range(i)].iter().enumerate() {
                fmt_checkpoint_row(out, id, k / t, Some(k % t), l)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outcome_space::Prompt;
    use crate::policy::CategoricalPolicy;
    use crate::rng::Seed;

    fn prompts(size: usize, len: usize) -> PromptSet {
        let vocab = Vocab::new(size, len).unwrap();
        let m = vocab.outcome_count() as usize;
        PromptSet::new(vec![
            Prompt::new(PromptId(0), vocab, vec![0.0; m]).unwrap(),
            Prompt::new(PromptId(4), vocab, vec![1.0; m]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn uniform_product_of_steps() {
        let ps = prompts(2, 2);
        let pol = AutoregressivePolicy::uniform(&ps).unwrap();
        for y in 0..4 {
            assert!((pol.log_prob_at(0, y) - 0.25f64.ln()).abs() < 1e-15);
        }
        assert_eq!(pol.params().len(), 2 * 3 * 2);
    }

    #[test]
    fn log_distribution_matches_log_prob_and_normalizes() {
        let ps = prompts(3, 3);
        let pol = AutoregressivePolicy::random(&ps, 2.0, &mut Seed(1).rng()).unwrap();
        for p in 0..2 {
            let ld = pol.log_distribution(p);
            assert_eq!(ld.len(), 27);
            let total: f64 = ld.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (y, l) in ld.iter().enumerate() {
                assert!((l - pol.log_prob_at(p, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn represents_a_categorical_table() {
        let ps = prompts(3, 2);
        let cat = CategoricalPolicy::random(&ps, 2.0, &mut Seed(2).rng()).unwrap();
        let dists: Vec<Vec<f64>> = (0..2).map(|p| cat.distribution(p)).collect();
        let ar = AutoregressivePolicy::from_distributions(&ps, &dists).unwrap();
        for p in 0..2 {
            for y in 0..9 {
                assert!((ar.log_prob_at(p, y) - cat.log_prob_at(p, y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn expected_score_matches_explicit_sum() {
        let ps = prompts(2, 3);
        let pol = AutoregressivePolicy::random(&ps, 1.0, &mut Seed(3).rng()).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut fast = vec![0.0; pol.params().len()];
        pol.add_expected_score(1, &weights, &mut fast);
        let mut slow = vec![0.0; pol.params().len()];
        for (y, w) in weights.iter().enumerate() {
            pol.add_score(1, y, *w, &mut slow);
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        // block of prompt 0 untouched
        assert!(fast[pol.param_range(0)].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sampling_walks_the_tree() {
        let ps = prompts(2, 2);
        let mut pol = AutoregressivePolicy::uniform(&ps).unwrap();
        // force first token 1, then token 0
        let r = pol.param_range(0).start;
        pol.params_mut()[r + 1] = 40.0;
        pol.params_mut()[r + 2 * 2] = 40.0;
        let draws = pol.sample(PromptId(0), Seed(8), 200).unwrap();
        assert!(draws.iter().all(|o| o.tokens == vec![1, 0] && o.index == 2));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ps = prompts(3, 2);
        let pol = AutoregressivePolicy::random(&ps, 4.0, &mut Seed(6).rng()).unwrap();
        let mut buf = Vec::new();
        pol.write_checkpoint(&mut buf).unwrap();
        let back =
            AutoregressivePolicy::parse_checkpoint(&String::from_utf8(buf).unwrap(), "mem", &ps)
                .unwrap();
        assert_eq!(back, pol);
    }
}
