//! Posterior providers `p_{1|t}(x^i | z)`.
//!
//! [`ExactOracle`] enumerates a known target distribution; [`LogitsTable`]
//! replays precomputed logits, e.g. dumped from an externally trained model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{check_token, PathFamily, Pmf};
use crate::path::ConditionalPath;

/// Largest joint support the exact oracle enumerates.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// Supplies per-position posteriors over clean tokens for one codebook.
pub trait PosteriorProvider: Sync {
    /// `tokens` holds the current tokens of codebook `codebook` at the target
    /// positions only. Returns one pmf over the `target_count` clean tokens
    /// per position.
    fn posteriors(&self, codebook: usize, tokens: &[usize], t: f64, path: &ConditionalPath) -> Result<Vec<Pmf>>;
}

/// Known distribution of clean target sequences for one codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "pmf", rename_all = "kebab-case")]
pub enum TargetDistribution {
    /// Pmf over `[s]^N`, position 0 most significant.
    Joint(Pmf),
    /// Independent per-position pmfs.
    Factorized(Vec<Pmf>),
}

fn joint_size(vocab: usize, length: usize) -> u128 {
    (0..length).fold(1u128, |acc, _| acc.saturating_mul(vocab as u128))
}

impl TargetDistribution {
    pub fn validate(&self, length: usize, vocab: usize) -> Result<()> {
        match self {
            TargetDistribution::Joint(q) => {
                let needed = joint_size(vocab, length);
                if needed > ENUMERATION_BUDGET {
                    return Err(Error::BudgetExceeded { needed, budget: ENUMERATION_BUDGET });
                }
                if q.len() as u128 != needed {
                    return Err(Error::SizeMismatch { expected: needed as usize, actual: q.len() });
                }
            }
            TargetDistribution::Factorized(qs) => {
                if qs.len() != length {
                    return Err(Error::SizeMismatch { expected: length, actual: qs.len() });
                }
                if let Some(q) = qs.iter().find(|q| q.len() != vocab) {
                    return Err(Error::SizeMismatch { expected: vocab, actual: q.len() });
                }
            }
        }
        Ok(())
    }

    /// The joint pmf over `[s]^N`.
    pub fn joint(&self, length: usize, vocab: usize) -> Result<Pmf> {
        self.validate(length, vocab)?;
        let needed = joint_size(vocab, length);
        if needed > ENUMERATION_BUDGET {
            return Err(Error::BudgetExceeded { needed, budget: ENUMERATION_BUDGET });
        }
        match self {
            TargetDistribution::Joint(q) => Ok(q.clone()),
            TargetDistribution::Factorized(qs) => {
                let mut joint = vec![1.0];
                for q in qs {
                    joint = joint.iter().flat_map(|a| q.probs().iter().map(move |b| a * b)).collect();
                }
                Pmf::normalized(joint)
            }
        }
    }

    /// Per-position marginals.
    pub fn marginals(&self, length: usize, vocab: usize) -> Result<Vec<Pmf>> {
        self.validate(length, vocab)?;
        match self {
            TargetDistribution::Factorized(qs) => Ok(qs.clone()),
            TargetDistribution::Joint(q) => {
                let mut out = vec![vec![0.0; vocab]; length];
                for (idx, &w) in q.probs().iter().enumerate() {
                    let mut rest = idx;
                    for j in (0..length).rev() {
                        out[j][rest % vocab] += w;
                        rest /= vocab;
                    }
                }
                out.into_iter().map(Pmf::normalized).collect()
            }
        }
    }
}

/// `log p_t(z_j | v)` for every position `j` and clean token `v`.
fn log_likelihoods(path: &ConditionalPath, t: f64, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let s = path.target_count();
    for &z in tokens {
        check_token(z, path.state_count())?;
    }
    let mut by_target = Vec::with_capacity(s);
    for v in 0..s {
        let (param, _) = path.parameter(t, v)?;
        by_target.push(param);
    }
    let mut out = vec![vec![0.0; s]; tokens.len()];
    match path.family() {
        PathFamily::MetricInduced { distances } => {
            for (v, &beta) in by_target.iter().enumerate() {
                let col = distances.to_target(v);
                let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                let log_z = -beta * min + col.iter().map(|d| (-beta * (d - min)).exp()).sum::<f64>().ln();
                for (row, &z) in out.iter_mut().zip(tokens) {
                    row[v] = -beta * col[z] - log_z;
                }
            }
        }
        PathFamily::Mixture { source, .. } => {
            for (v, &kappa) in by_target.iter().enumerate() {
                let kappa = kappa.min(1.0);
                for (row, &z) in out.iter_mut().zip(tokens) {
                    let hit = if z == v { kappa } else { 0.0 };
                    row[v] = ((1.0 - kappa) * source.get(z) + hit).ln();
                }
            }
        }
    }
    Ok(out)
}

fn factorized_posteriors(marginals: &[Pmf], loglik: &[Vec<f64>]) -> Result<Vec<Pmf>> {
    marginals
        .iter()
        .zip(loglik)
        .enumerate()
        .map(|(j, (q, ll))| {
            let lw: Vec<f64> = q.probs().iter().zip(ll).map(|(q, l)| q.ln() + l).collect();
            Pmf::from_log_weights(&lw).map_err(|_| Error::Posterior(format!("zero evidence at position {j}")))
        })
        .collect()
}

/// Exact per-position posteriors for one codebook by enumeration.
///
/// For a joint target with zero evidence (the current tokens are impossible
/// under every sequence in the support of `q`) the result falls back to the
/// posteriors of the factorized marginals of `q`.
pub fn exact_posterior(target: &TargetDistribution, path: &ConditionalPath, tokens: &[usize], t: f64) -> Result<Vec<Pmf>> {
    let length = tokens.len();
    let s = path.target_count();
    target.validate(length, s)?;
    let loglik = log_likelihoods(path, t, tokens)?;
    let q = match target {
        TargetDistribution::Factorized(qs) => return factorized_posteriors(qs, &loglik),
        TargetDistribution::Joint(q) => q,
    };
    let mut digits = vec![0usize; length];
    let mut weights = Vec::with_capacity(q.len());
    let mut max = f64::NEG_INFINITY;
    for (idx, &qx) in q.probs().iter().enumerate() {
        if idx > 0 {
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < s {
                    break;
                }
                *d = 0;
            }
        }
        let lw = if qx > 0.0 { qx.ln() + digits.iter().zip(&loglik).map(|(&v, ll)| ll[v]).sum::<f64>() } else { f64::NEG_INFINITY };
        max = max.max(lw);
        weights.push(lw);
    }
    if max == f64::NEG_INFINITY {
        return factorized_posteriors(&target.marginals(length, s)?, &loglik);
    }
    let mut post = vec![vec![0.0; s]; length];
    digits.iter_mut().for_each(|d| *d = 0);
    for (idx, lw) in weights.into_iter().enumerate() {
        if idx > 0 {
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < s {
                    break;
                }
                *d = 0;
            }
        }
        if lw > f64::NEG_INFINITY {
            let w = (lw - max).exp();
            for (row, &v) in post.iter_mut().zip(&digits) {
                row[v] += w;
            }
        }
    }
    post.into_iter().map(Pmf::normalized).collect()
}

/// Exact posterior provider over known per-codebook targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactOracle {
    length: usize,
    vocab: usize,
    targets: Vec<TargetDistribution>,
}

impl ExactOracle {
    pub fn new(length: usize, vocab: usize, targets: Vec<TargetDistribution>) -> Result<Self> {
        if targets.is_empty() {
            return Err(invalid("exact oracle needs at least one codebook target"));
        }
        for target in &targets {
            target.validate(length, vocab)?;
        }
        Ok(Self { length, vocab, targets })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn targets(&self) -> &[TargetDistribution] {
        &self.targets
    }
}

impl PosteriorProvider for ExactOracle {
    fn posteriors(&self, codebook: usize, tokens: &[usize], t: f64, path: &ConditionalPath) -> Result<Vec<Pmf>> {
        let target = self
            .targets
            .get(codebook)
            .ok_or_else(|| Error::Posterior(format!("no target for codebook {codebook}")))?;
        if tokens.len() != self.length {
            return Err(Error::SizeMismatch { expected: self.length, actual: tokens.len() });
        }
        if path.target_count() != self.vocab {
            return Err(Error::SizeMismatch { expected: self.vocab, actual: path.target_count() });
        }
        exact_posterior(target, path, tokens, t)
    }
}

/// One row of a logits table: logits for every target position of
/// `codebook` given its current `tokens` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsEntry {
    pub codebook: usize,
    pub t: f64,
    pub tokens: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
}

/// Times closer than this match the same entry.
const TIME_MATCH: f64 = 1e-9;

/// Posterior provider replaying precomputed logits.
#[derive(Debug, Clone, Default)]
pub struct LogitsTable {
    index: HashMap<(usize, Vec<usize>), Vec<(f64, Vec<Pmf>)>>,
}

impl LogitsTable {
    pub fn new(entries: Vec<LogitsEntry>) -> Result<Self> {
        let mut index: HashMap<(usize, Vec<usize>), Vec<(f64, Vec<Pmf>)>> = HashMap::new();
        for entry in entries {
            if entry.logits.len() != entry.tokens.len() {
                return Err(Error::SizeMismatch { expected: entry.tokens.len(), actual: entry.logits.len() });
            }
            let pmfs = entry.logits.iter().map(|l| Pmf::from_log_weights(l)).collect::<Result<Vec<_>>>()?;
            let slot = index.entry((entry.codebook, entry.tokens)).or_default();
            if slot.iter().any(|(t, _)| (t - entry.t).abs() <= TIME_MATCH) {
                return Err(Error::Format(format!("duplicate logits entry at t = {}", entry.t)));
            }
            slot.push((entry.t, pmfs));
        }
        Ok(Self { index })
    }

    pub fn len(&self) -> usize {
        self.index.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

impl PosteriorProvider for LogitsTable {
    fn posteriors(&self, codebook: usize, tokens: &[usize], t: f64, path: &ConditionalPath) -> Result<Vec<Pmf>> {
        let missing = || Error::Posterior(format!("no logits for codebook {codebook}, t = {t}, tokens {tokens:?}"));
        let rows = self.index.get(&(codebook, tokens.to_vec())).ok_or_else(missing)?;
        let (_, pmfs) = rows.iter().find(|(at, _)| (at - t).abs() <= TIME_MATCH).ok_or_else(missing)?;
        if let Some(p) = pmfs.iter().find(|p| p.len() != path.target_count()) {
            return Err(Error::SizeMismatch { expected: path.target_count(), actual: p.len() });
        }
        Ok(pmfs.clone())
    }
}
