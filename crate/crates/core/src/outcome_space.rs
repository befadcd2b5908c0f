//! Prompts, fixed-length outcome spaces and reward tables.
//!
//! Every prompt owns an outcome space of `size^max_len` token sequences,
//! enumerated in lexicographic order, and a reward table indexed by the
//! position of each sequence in that order. Rewards induce a total strict
//! order once ties are broken by outcome index (lower index is worse).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BondError, Result};

/// Default upper bound on the number of outcomes a space may enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 65_536;

/// Header of the reward table file format.
pub const REWARD_TABLE_HEADER: &str = "prompt_id,outcome_index,reward";

/// Token alphabet and sequence length of an outcome space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    max_len: usize,
}

impl Vocab {
    pub fn new(size: usize, max_len: usize) -> Result<Self> {
        if size < 2 {
            return Err(BondError::invalid(
                "vocab_size",
                format!("must be >= 2, got {size}"),
            ));
        }
        if max_len < 1 {
            return Err(BondError::invalid(
                "max_len",
                format!("must be >= 1, got {max_len}"),
            ));
        }
        Ok(Vocab { size, max_len })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `size^max_len`, without overflow.
    pub fn outcome_count(&self) -> u128 {
        (self.size as u128).saturating_pow(self.max_len as u32)
    }

    /// Outcome count if it fits under `cap`.
    pub fn checked_outcome_count(&self, cap: usize) -> Result<usize> {
        let count = self.outcome_count();
        if count > cap as u128 {
            return Err(BondError::EnumerationTooLarge { count, cap });
        }
        Ok(count as usize)
    }

    /// Decodes the lexicographic rank `index` into its tokens.
    pub fn outcome(&self, index: usize) -> Result<Outcome> {
        let len = self.outcome_count();
        if index as u128 >= len {
            return Err(BondError::OutcomeOutOfRange {
                index,
                len: len.min(usize::MAX as u128) as usize,
            });
        }
        let mut tokens = vec![0; self.max_len];
        let mut rest = index;
        for slot in tokens.iter_mut().rev() {
            *slot = rest % self.size;
            rest /= self.size;
        }
        Ok(Outcome { tokens, index })
    }

    /// Lexicographic rank of a token sequence.
    pub fn index_of(&self, tokens: &[usize]) -> Result<usize> {
        if tokens.len() != self.max_len || tokens.iter().any(|&t| t >= self.size) {
            return Err(BondError::InvalidTokens {
                tokens: tokens.to_vec(),
                size: self.size,
                max_len: self.max_len,
            });
        }
        Ok(tokens.iter().fold(0, |acc, &t| acc * self.size + t))
    }
}

/// A token sequence together with its lexicographic rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Outcome {
    pub tokens: Vec<usize>,
    pub index: usize,
}

/// Lists every outcome of `vocab` in lexicographic order.
pub fn enumerate_outcomes(vocab: Vocab) -> Result<Vec<Outcome>> {
    enumerate_outcomes_capped(vocab, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_outcomes_capped(vocab: Vocab, cap: usize) -> Result<Vec<Outcome>> {
    let count = vocab.checked_outcome_count(cap)?;
    let mut out = Vec::with_capacity(count);
    let mut tokens = vec![0; vocab.max_len];
    for index in 0..count {
        out.push(Outcome {
            tokens: tokens.clone(),
            index,
        });
        // odometer increment
        for slot in tokens.iter_mut().rev() {
            *slot += 1;
            if *slot < vocab.size {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptId(pub u32);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Compares outcomes `a` and `b` under the tie-broken reward order.
///
/// Callers must pass distinct, in-range indices.
#[inline]
pub fn compare_outcomes(rewards: &[f64], a: usize, b: usize) -> Ordering {
    rewards[a].total_cmp(&rewards[b]).then(a.cmp(&b))
}

/// Index of the best outcome among `candidates` under the strict order.
pub fn strict_winner(rewards: &[f64], candidates: &[usize]) -> Option<usize> {
    candidates
        .iter()
        .copied()
        .max_by(|&a, &b| compare_outcomes(rewards, a, b))
}

/// One prompt: its outcome space and reward for every outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    id: PromptId,
    vocab: Vocab,
    rewards: Vec<f64>,
}

impl Prompt {
    pub fn new(id: PromptId, vocab: Vocab, rewards: Vec<f64>) -> Result<Self> {
        let count = vocab.checked_outcome_count(DEFAULT_ENUMERATION_CAP)?;
        if rewards.len() != count {
            return Err(BondError::ShapeMismatch {
                expected: count,
                found: rewards.len(),
            });
        }
        if let Some(bad) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(BondError::invalid(
                "reward",
                format!("non-finite reward at outcome {bad}"),
            ));
        }
        Ok(Prompt { id, vocab, rewards })
    }

    pub fn id(&self) -> PromptId {
        self.id
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn num_outcomes(&self) -> usize {
        self.rewards.len()
    }

    pub fn reward(&self, y: &Outcome) -> Result<f64> {
        self.check(y)?;
        Ok(self.rewards[y.index])
    }

    fn check(&self, y: &Outcome) -> Result<()> {
        let expected = self.vocab.index_of(&y.tokens)?;
        if expected != y.index {
            return Err(BondError::OutcomeOutOfRange {
                index: y.index,
                len: self.rewards.len(),
            });
        }
        Ok(())
    }

    /// Strict total order: by reward, then by ascending outcome index.
    pub fn strict_order(&self, a: &Outcome, b: &Outcome) -> Result<Ordering> {
        self.check(a)?;
        self.check(b)?;
        if a.index == b.index {
            return Err(BondError::SameOutcome(a.index));
        }
        Ok(compare_outcomes(&self.rewards, a.index, b.index))
    }

    /// Same prompt with every reward passed through `f`.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Result<Prompt> {
        Prompt::new(
            self.id,
            self.vocab,
            self.rewards.iter().map(|&r| f(r)).collect(),
        )
    }
}

/// A non-empty collection of prompts with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    positions: HashMap<PromptId, usize>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(BondError::invalid(
                "prompts",
                "prompt set must be non-empty",
            ));
        }
        let mut positions = HashMap::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            if positions.insert(p.id, i).is_some() {
                return Err(BondError::invalid(
                    "prompts",
                    format!("duplicate prompt id {}", p.id),
                ));
            }
        }
        Ok(PromptSet { prompts, positions })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prompt> {
        self.prompts.iter()
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn ids(&self) -> Vec<PromptId> {
        self.prompts.iter().map(|p| p.id).collect()
    }

    pub fn position(&self, id: PromptId) -> Result<usize> {
        self.positions
            .get(&id)
            .copied()
            .ok_or(BondError::UnknownPrompt(id))
    }

    pub fn get(&self, id: PromptId) -> Result<&Prompt> {
        Ok(&self.prompts[self.position(id)?])
    }

    /// Prompt at position `i`. Panics when out of range.
    pub fn at(&self, i: usize) -> &Prompt {
        &self.prompts[i]
    }

    pub fn strict_order(&self, id: PromptId, a: &Outcome, b: &Outcome) -> Result<Ordering> {
        self.get(id)?.strict_order(a, b)
    }

    pub fn map_rewards(&self, f: impl Fn(f64) -> f64 + Copy) -> Result<PromptSet> {
        PromptSet::new(
            self.prompts
                .iter()
                .map(|p| p.map_rewards(f))
                .collect::<Result<_>>()?,
        )
    }

    /// Writes the reward table (`prompt_id,outcome_index,reward`).
    pub fn write_reward_table(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{REWARD_TABLE_HEADER}")?;
        for p in &self.prompts {
            for (i, r) in p.rewards.iter().enumerate() {
                writeln!(out, "{},{},{}", p.id, i, r)?;
            }
        }
        Ok(())
    }

    pub fn save_reward_table(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| BondError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_reward_table(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| BondError::io(path, e))
    }

    /// Loads a reward table in which every prompt shares `vocab`.
    pub fn load_reward_table(path: &Path, vocab: Vocab) -> Result<PromptSet> {
        let text = std::fs::read_to_string(path).map_err(|e| BondError::io(path, e))?;
        Self::parse_reward_table(&text, &path.display().to_string(), vocab)
    }

    pub fn parse_reward_table(text: &str, source: &str, vocab: Vocab) -> Result<PromptSet> {
        let count = vocab.checked_outcome_count(DEFAULT_ENUMERATION_CAP)?;
        let perr = |line: usize, message: String| BondError::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if normalize_header(h) == REWARD_TABLE_HEADER => {}
            Some((_, h)) => {
                return Err(perr(
                    1,
                    format!("expected header `{REWARD_TABLE_HEADER}`, found `{h}`"),
                ))
            }
            None => return Err(perr(1, "empty reward table".into())),
        }
        let mut tables: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
        let mut order = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(perr(
                    lineno,
                    format!("expected 3 columns, found {}", fields.len()),
                ));
            }
            let pid: u32 = fields[0]
                .parse()
                .map_err(|_| perr(lineno, format!("bad prompt id `{}`", fields[0])))?;
            let idx: usize = fields[1]
                .parse()
                .map_err(|_| perr(lineno, format!("bad outcome index `{}`", fields[1])))?;
            let r: f64 = fields[2]
                .parse()
                .map_err(|_| perr(lineno, format!("bad reward `{}`", fields[2])))?;
            if idx >= count {
                return Err(perr(
                    lineno,
                    format!("outcome index {idx} outside space of {count}"),
                ));
            }
            let table = tables.entry(pid).or_insert_with(|| {
                order.push(pid);
                vec![None; count]
            });
            if table[idx].replace(r).is_some() {
                return Err(perr(
                    lineno,
                    format!("duplicate row for prompt {pid}, outcome {idx}"),
                ));
            }
        }
        let prompts = order
            .into_iter()
            .map(|pid| {
                let table = tables.remove(&pid).expect("prompt registered");
                let rewards: Option<Vec<f64>> = table.into_iter().collect();
                let rewards = rewards.ok_or_else(|| {
                    perr(
                        0,
                        format!("prompt {pid} does not define a reward for every outcome"),
                    )
                })?;
                Prompt::new(PromptId(pid), vocab, rewards)
            })
            .collect::<Result<Vec<_>>>()?;
        PromptSet::new(prompts)
    }
}

pub(crate) fn normalize_header(h: &str) -> String {
    h.split(',').map(str::trim).collect::<Vec<_>>().join(",")
}
