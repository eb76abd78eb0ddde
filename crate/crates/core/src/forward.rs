//! Training-side utilities: prediction masks, forward corruption of clean
//! tokens along the metric-induced path, codebook loss weights and the
//! weighted masked negative log-likelihood.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::geometry::{check_token, DistanceSet};
use crate::rng::{Purpose, StreamKey};
use crate::sampler::gumbel_max_sample;
use crate::scheduler::{Averaging, KoSchedule, TableKind};

/// Upper end of the prompt-ratio range used during training.
pub const MAX_PROMPT_RATIO: f64 = 0.3;

/// `M_i = 1[i >= m]`: the first `m` positions are prompt, the rest target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMask {
    bits: Vec<bool>,
    prompt_count: usize,
}

impl PredictionMask {
    pub fn new(len: usize, prompt_count: usize) -> Result<Self> {
        if prompt_count > len {
            return Err(invalid(format!("prompt count {prompt_count} exceeds length {len}")));
        }
        Ok(Self { bits: (0..len).map(|i| i >= prompt_count).collect(), prompt_count })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Mask with `m = round(r N)` prompt positions, rounding half away from zero.
/// In strict mode `r` must lie in `[0, 0.3]`; otherwise in `[0, 1]`.
pub fn build_prediction_mask(len: usize, r: f64, strict: bool) -> Result<PredictionMask> {
    if len == 0 {
        return Err(invalid("sequence length must be at least 1"));
    }
    ensure_finite("r", r)?;
    let upper = if strict { MAX_PROMPT_RATIO } else { 1.0 };
    if !(0.0..=upper).contains(&r) {
        return Err(invalid(format!("prompt ratio {r} outside [0, {upper}]")));
    }
    PredictionMask::new(len, (r * len as f64).round() as usize)
}

/// `w_c = 1 - c / C` for zero-based `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookWeights(Vec<f64>);

impl CodebookWeights {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    /// Arbitrary positive weights, e.g. rescaled ones.
    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid("codebook weights must be a nonempty list of positive numbers"));
        }
        Ok(Self(weights))
    }
}

pub fn codebook_weights(codebooks: usize) -> Result<CodebookWeights> {
    if codebooks == 0 {
        return Err(invalid("need at least one codebook"));
    }
    let c = codebooks as f64;
    Ok(CodebookWeights((0..codebooks).map(|i| 1.0 - i as f64 / c).collect()))
}

/// Corrupts clean tokens `x1` (position-major, `N x C`) to time `t`: each
/// target cell is drawn from `p_t(· | x1^{i,c})` of its codebook, prompt
/// cells are copied. `sample` selects an independent draw for the same seed.
pub fn sample_corruption(
    x1: &[usize],
    t: f64,
    schedule: &KoSchedule,
    ds: &DistanceSet,
    mask: &PredictionMask,
    seed: u64,
    sample: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must lie in [0, 1], got {t}")));
    }
    let c = ds.num_codebooks();
    let expected = mask.len() * c;
    if x1.len() != expected {
        return Err(Error::SizeMismatch { expected, actual: x1.len() });
    }
    let tables = match schedule.averaging {
        Averaging::Shared => 1,
        Averaging::PerCodebook => c,
    };
    if schedule.tables.len() != tables {
        return Err(Error::SizeMismatch { expected: tables, actual: schedule.tables.len() });
    }
    if schedule.tables.iter().any(|t| t.kind != TableKind::MetricKo) {
        return Err(invalid("corruption needs inverse-temperature tables"));
    }
    for &x in x1 {
        check_token(x, ds.vocab_size())?;
    }
    let betas: Vec<f64> = (0..c).map(|k| schedule.table_for(k).interp(t).map(|v| v.0)).collect::<Result<_>>()?;
    let key = StreamKey::new(seed, Purpose::Corruption).trial(sample);
    x1.par_iter()
        .enumerate()
        .map(|(cell, &target)| {
            let (i, k) = (cell / c, cell % c);
            if !mask.bits()[i] {
                return Ok(target);
            }
            let lw: Vec<f64> = ds.get(k).to_target(target).iter().map(|d| -betas[k] * d).collect();
            gumbel_max_sample(&lw, &mut key.cell(i, k).stream())
        })
        .collect()
}

/// Tolerance on `logsumexp` of each cell's log-probabilities.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// `sum M_i w_c (-log p_{i,c}(x1)) / sum M_i w_c` over an `N x C x s` array of
/// log-probabilities (position, then codebook, then token).
pub fn weighted_masked_nll(
    log_probs: &[f64],
    targets: &[usize],
    vocab: usize,
    mask: &PredictionMask,
    weights: &CodebookWeights,
) -> Result<f64> {
    let c = weights.weights().len();
    let cells = mask.len() * c;
    if targets.len() != cells {
        return Err(Error::SizeMismatch { expected: cells, actual: targets.len() });
    }
    if log_probs.len() != cells * vocab {
        return Err(Error::SizeMismatch { expected: cells * vocab, actual: log_probs.len() });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (cell, (&x, row)) in targets.iter().zip(log_probs.chunks_exact(vocab)).enumerate() {
        check_token(x, vocab)?;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::InvalidPmf(format!("log-probabilities of cell {cell} sum to exp({lse})")));
        }
        if mask.bits()[cell / c] {
            let w = weights.weights()[cell % c];
            num += w * -row[x];
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("no target positions: loss weight sum is zero".into()));
    }
    Ok(num / den)
}
