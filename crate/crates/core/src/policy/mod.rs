//! Softmax policies over enumerable outcome spaces.
//!
//! Two parameterizations share the [`Policy`] trait: a flat categorical
//! with one free logit per outcome, and an autoregressive policy with one
//! logit per (prefix, next token). Parameters of all prompts live in one
//! flat [`ParamVector`]; each prompt owns a contiguous block of it.

mod autoregressive;
mod categorical;

use std::fmt;
use std::io::Write;
use std::ops::{Deref, DerefMut, Range};
use std::path::Path;

use rand::Rng;

use crate::error::{BondError, Result};
use crate::outcome_space::{Outcome, PromptId, PromptSet, Vocab};
use crate::rng::{BondRng, Seed};

pub use autoregressive::AutoregressivePolicy;
pub use categorical::CategoricalPolicy;

/// Header row of the checkpoint file format.
pub const CHECKPOINT_HEADER: &str = "prompt_id,prefix_or_flat_index,token_index,logit";

/// Flat view of all logits of a policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        ParamVector(v)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (x, y) in self.0.iter_mut().zip(other) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.0 {
            *x *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// `(1 - eta) * target + eta * source`, element-wise.
pub fn ema_blend(target: &ParamVector, source: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(BondError::invalid(
            "eta",
            format!("must lie in [0, 1], got {eta}"),
        ));
    }
    if target.len() != source.len() {
        return Err(BondError::ShapeMismatch {
            expected: target.len(),
            found: source.len(),
        });
    }
    Ok(ParamVector(
        target
            .iter()
            .zip(source.iter())
            .map(|(t, s)| (1.0 - eta) * t + eta * s)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Categorical,
    Autoregressive,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Categorical => "categorical",
            PolicyKind::Autoregressive => "autoregressive",
        })
    }
}

/// A softmax-parameterized distribution over the outcomes of each prompt.
///
/// Prompts are addressed by their position in the policy (which mirrors
/// the [`PromptSet`] it was built from) and outcomes by lexicographic
/// index. The checked, id-based entry points are provided methods.
pub trait Policy: Clone + Send + Sync + fmt::Debug {
    fn kind(&self) -> PolicyKind;
    fn prompt_ids(&self) -> &[PromptId];
    fn vocab(&self, prompt: usize) -> Vocab;
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;
    /// Parameter block owned by `prompt`.
    fn param_range(&self, prompt: usize) -> Range<usize>;

    fn log_prob_at(&self, prompt: usize, y: usize) -> f64;
    /// Log-probabilities of every outcome, in lexicographic order.
    fn log_distribution(&self, prompt: usize) -> Vec<f64>;
    /// Draws `count` i.i.d. outcome indices.
    fn draw(&self, prompt: usize, rng: &mut BondRng, count: usize) -> Vec<usize>;
    /// `grad += scale * d log pi(y) / d logits`
    fn add_score(&self, prompt: usize, y: usize, scale: f64, grad: &mut [f64]);

    /// `grad += sum_y weights[y] * d log pi(y) / d logits`
    fn add_expected_score(&self, prompt: usize, weights: &[f64], grad: &mut [f64]) {
        for (y, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                self.add_score(prompt, y, w, grad);
            }
        }
    }

    fn num_prompts(&self) -> usize {
        self.prompt_ids().len()
    }

    fn num_outcomes(&self, prompt: usize) -> usize {
        let v = self.vocab(prompt);
        v.size().pow(v.max_len() as u32)
    }

    fn distribution(&self, prompt: usize) -> Vec<f64> {
        self.log_distribution(prompt)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        let own = self.params_mut();
        if own.len() != params.len() {
            return Err(BondError::ShapeMismatch {
                expected: own.len(),
                found: params.len(),
            });
        }
        own.copy_from_slice(params);
        Ok(())
    }

    fn position(&self, id: PromptId) -> Result<usize> {
        self.prompt_ids()
            .iter()
            .position(|&p| p == id)
            .ok_or(BondError::UnknownPrompt(id))
    }

    fn checked(&self, id: PromptId, y: &Outcome) -> Result<usize> {
        let prompt = self.position(id)?;
        let index = self.vocab(prompt).index_of(&y.tokens)?;
        if index != y.index {
            return Err(BondError::OutcomeOutOfRange {
                index: y.index,
                len: self.num_outcomes(prompt),
            });
        }
        Ok(prompt)
    }

    /// Exact log-probability of `y` under prompt `id`.
    fn log_prob(&self, id: PromptId, y: &Outcome) -> Result<f64> {
        let prompt = self.checked(id, y)?;
        Ok(self.log_prob_at(prompt, y.index))
    }

    /// Gradient of `log pi(y)` with respect to every parameter.
    fn score(&self, id: PromptId, y: &Outcome) -> Result<ParamVector> {
        let prompt = self.checked(id, y)?;
        let mut g = ParamVector::zeros(self.params().len());
        self.add_score(prompt, y.index, 1.0, &mut g);
        Ok(g)
    }

    /// `count` i.i.d. draws, deterministic in `seed`.
    fn sample(&self, id: PromptId, seed: Seed, count: usize) -> Result<Vec<Outcome>> {
        if count == 0 {
            return Err(BondError::invalid("count", "must be >= 1"));
        }
        let prompt = self.position(id)?;
        let vocab = self.vocab(prompt);
        let mut rng = seed.rng();
        self.draw(prompt, &mut rng, count)
            .into_iter()
            .map(|i| vocab.outcome(i))
            .collect()
    }

    /// Writes the checkpoint file. Loading it reproduces every logit bit-exactly.
    fn write_checkpoint(&self, out: &mut dyn Write) -> std::io::Result<()>;

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| BondError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| BondError::io(path, e))
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Inverse-CDF sampler over a fixed probability table.
#[derive(Debug, Clone)]
pub struct CdfSampler {
    cumulative: Vec<f64>,
}

impl CdfSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        CdfSampler { cumulative }
    }

    pub fn draw(&self, rng: &mut BondRng) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.cumulative.len() - 1)
    }
}

fn fmt_checkpoint_row(
    out: &mut dyn Write,
    id: PromptId,
    index: usize,
    token: Option<usize>,
    logit: f64,
) -> std::io::Result<()> {
    match token {
        Some(t) => writeln!(out, "{id},{index},{t},{logit}"),
        None => writeln!(out, "{id},{index},,{logit}"),
    }
}

/// Parsed checkpoint row: prompt, index, optional token, logit.
type CheckpointRow = (PromptId, usize, Option<usize>, f64);

fn parse_checkpoint(text: &str, source: &str, kind: PolicyKind) -> Result<Vec<CheckpointRow>> {
    let perr = |line: usize, message: String| BondError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let expected_kind = format!("# kind={kind}");
    match lines.next() {
        Some((_, l)) if l.trim() == expected_kind => {}
        Some((_, l)) => return Err(perr(1, format!("expected `{expected_kind}`, found `{l}`"))),
        None => return Err(perr(1, "empty checkpoint".into())),
    }
    match lines.next() {
        Some((_, l)) if crate::outcome_space::normalize_header(l) == CHECKPOINT_HEADER => {}
        _ => return Err(perr(2, format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(perr(
                i + 1,
                format!("expected 4 columns, found {}", f.len()),
            ));
        }
        let id = f[0]
            .parse()
            .map(PromptId)
            .map_err(|_| perr(i + 1, format!("bad prompt id `{}`", f[0])))?;
        let index = f[1]
            .parse()
            .map_err(|_| perr(i + 1, format!("bad index `{}`", f[1])))?;
        let token = if f[2].is_empty() {
            None
        } else {
            Some(
                f[2].parse()
                    .map_err(|_| perr(i + 1, format!("bad token index `{}`", f[2])))?,
            )
        };
        let logit = f[3]
            .parse()
            .map_err(|_| perr(i + 1, format!("bad logit `{}`", f[3])))?;
        rows.push((id, index, token, logit));
    }
    Ok(rows)
}

/// Fills a zeroed policy from checkpoint rows, requiring every parameter exactly once.
fn fill_from_rows<P: Policy>(
    mut policy: P,
    rows: Vec<CheckpointRow>,
    source: &str,
    locate: impl Fn(&P, usize, usize, Option<usize>) -> Option<usize>,
) -> Result<P> {
    let mut seen = vec![false; policy.params().len()];
    for (id, index, token, logit) in rows {
        let prompt = policy.position(id)?;
        let slot = locate(&policy, prompt, index, token).ok_or_else(|| BondError::Parse {
            path: source.to_string(),
            line: 0,
            message: format!("row ({id}, {index}, {token:?}) does not address a parameter"),
        })?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(BondError::Parse {
                path: source.to_string(),
                line: 0,
                message: format!("duplicate row ({id}, {index}, {token:?})"),
            });
        }
        policy.params_mut()[slot] = logit;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(BondError::Parse {
            path: source.to_string(),
            line: 0,
            message: format!("checkpoint is missing parameter {missing}"),
        });
    }
    Ok(policy)
}

fn prompt_layout(
    prompts: &PromptSet,
    block: impl Fn(Vocab) -> usize,
) -> (Vec<PromptId>, Vec<Vocab>, Vec<usize>) {
    let ids = prompts.ids();
    let vocabs: Vec<Vocab> = prompts.iter().map(|p| p.vocab()).collect();
    let mut offsets = Vec::with_capacity(vocabs.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for v in &vocabs {
        acc += block(*v);
        offsets.push(acc);
    }
    (ids, vocabs, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let t = ParamVector::from_vec(vec![0.0, 0.0]);
        let s = ParamVector::from_vec(vec![1.0, 3.0]);
        assert_eq!(ema_blend(&t, &s, 0.0).unwrap(), t);
        assert_eq!(ema_blend(&t, &s, 1.0).unwrap(), s);
        assert_eq!(&*ema_blend(&t, &s, 0.25).unwrap(), &[0.25, 0.75]);
        assert!(ema_blend(&t, &ParamVector::zeros(3), 0.5).is_err());
        assert!(ema_blend(&t, &s, 1.5).is_err());
    }

    #[test]
    fn cdf_sampler_skips_zero_mass() {
        let s = CdfSampler::new(&[0.0, 0.5, 0.0, 0.5, 0.0]);
        let mut rng = Seed(3).rng();
        for _ in 0..1000 {
            let i = s.draw(&mut rng);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
