//! Token geometry and the probability paths built on it.
//!
//! A [`DistanceMatrix`] holds `d(x, x1)`, the distance of token `x` from a
//! target token `x1`. The metric-induced conditional path is the Gibbs
//! distribution `p(x | x1; beta) = softmax_x(-beta * d(x, x1))`; the mixture
//! path interpolates a source pmf towards `delta_{x1}`.
//!
//! Fisher–Rao quantities use the categorical metric
//! `||p_dot||^2 = sum_x p_dot(x)^2 / p(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};

/// A probability mass function over `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Pmf(Vec<f64>);

impl Pmf {
    /// Absolute tolerance on `|sum - 1|` accepted by [`Pmf::new`].
    pub const SUM_TOLERANCE: f64 = 1e-12;

    /// Validates `weights` as-is. Rejects negative, NaN or infinite entries and
    /// sums further than [`Pmf::SUM_TOLERANCE`] from one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidPmf(format!("sums to {sum}")));
        }
        Ok(Self(weights))
    }

    /// Divides `weights` by their sum.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidPmf(format!("cannot normalize total mass {sum}")));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self(weights))
    }

    /// Normalizes `exp(log_weights)` with max-subtraction.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::INFINITY || max.is_nan() {
            return Err(Error::InvalidPmf(format!("log weights contain {max}")));
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidPmf("all log weights are -inf".into()));
        }
        Self::normalized(log_weights.iter().map(|&l| (l - max).exp()).collect())
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(invalid("uniform pmf needs at least one state"));
        }
        Ok(Self(vec![1.0 / size as f64; size]))
    }

    pub fn delta(size: usize, at: usize) -> Result<Self> {
        check_token(at, size)?;
        let mut w = vec![0.0; size];
        w[at] = 1.0;
        Ok(Self(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, x: usize) -> f64 {
        self.0[x]
    }

    /// `E_p[f]` for a vector of per-state values.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Pmf {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Pmf::new(value)
    }
}

impl From<Pmf> for Vec<f64> {
    fn from(p: Pmf) -> Self {
        p.0
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidPmf("empty".into()));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidPmf(format!("entry {i} is {w}")));
    }
    Ok(())
}

pub(crate) fn check_token(token: usize, size: usize) -> Result<()> {
    if token < size {
        Ok(())
    } else {
        Err(Error::TokenOutOfRange { token, size })
    }
}

/// Pairwise token distances `d(x, x1)` with `d(x, x1) = 0` iff `x == x1`.
///
/// Stored both row-major (`d(x, ·)`) and by target column (`d(·, x1)`), since
/// every path computation walks a target column.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    rows: Vec<f64>,
    columns: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds from row-major entries `entries[x * size + x1] = d(x, x1)`.
    pub fn new(size: usize, entries: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidDistances(format!("need at least 2 tokens, got {size}")));
        }
        if entries.len() != size * size {
            return Err(Error::SizeMismatch { expected: size * size, actual: entries.len() });
        }
        for x in 0..size {
            for x1 in 0..size {
                let d = entries[x * size + x1];
                if !d.is_finite() {
                    return Err(Error::InvalidDistances(format!("d({x}, {x1}) = {d} is not finite")));
                }
                if x == x1 && d != 0.0 {
                    return Err(Error::InvalidDistances(format!("nonzero diagonal d({x}, {x}) = {d}")));
                }
                if x != x1 && !(d > 0.0) {
                    return Err(Error::InvalidDistances(format!(
                        "off-diagonal d({x}, {x1}) = {d} must be positive"
                    )));
                }
            }
        }
        let mut columns = vec![0.0; size * size];
        for x in 0..size {
            for x1 in 0..size {
                columns[x1 * size + x] = entries[x * size + x1];
            }
        }
        Ok(Self { size, rows: entries, columns })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != size) {
            return Err(Error::SizeMismatch { expected: size, actual: bad.len() });
        }
        Self::new(size, rows.concat())
    }

    /// Squared Euclidean distances between embeddings, optionally
    /// l2-normalizing each embedding first.
    pub fn from_embeddings(embeddings: &[Vec<f64>], normalize: bool) -> Result<Self> {
        let size = embeddings.len();
        let dim = embeddings.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(invalid("embeddings must be non-empty vectors"));
        }
        let mut vecs = Vec::with_capacity(size);
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::SizeMismatch { expected: dim, actual: e.len() });
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("embedding {i} has non-finite entries")));
            }
            if normalize {
                let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(invalid(format!("embedding {i} has zero norm")));
                }
                vecs.push(e.iter().map(|v| v / norm).collect::<Vec<_>>());
            } else {
                vecs.push(e.clone());
            }
        }
        let mut entries = vec![0.0; size * size];
        for x in 0..size {
            for y in 0..size {
                if x != y {
                    entries[x * size + y] =
                        vecs[x].iter().zip(&vecs[y]).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
        }
        Self::new(size, entries)
    }

    /// Number of tokens `s`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, x1: usize) -> f64 {
        self.rows[x * self.size + x1]
    }

    /// `d(·, x1)`, the distances of every token to `x1`.
    pub fn to_target(&self, x1: usize) -> &[f64] {
        &self.columns[x1 * self.size..(x1 + 1) * self.size]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.rows
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows.chunks(self.size).map(<[f64]>::to_vec).collect()
    }
}

/// One distance matrix per codebook, all over the same vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSet {
    codebooks: Vec<DistanceMatrix>,
}

impl DistanceSet {
    pub fn new(codebooks: Vec<DistanceMatrix>) -> Result<Self> {
        let first = codebooks.first().ok_or_else(|| invalid("distance set needs at least one codebook"))?;
        let s = first.size();
        if let Some(bad) = codebooks.iter().find(|d| d.size() != s) {
            return Err(Error::SizeMismatch { expected: s, actual: bad.size() });
        }
        Ok(Self { codebooks })
    }

    pub fn single(d: DistanceMatrix) -> Self {
        Self { codebooks: vec![d] }
    }

    pub fn codebooks(&self) -> &[DistanceMatrix] {
        &self.codebooks
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn get(&self, c: usize) -> &DistanceMatrix {
        &self.codebooks[c]
    }
}

/// Geometric curve on the simplex, before a scheduler is attached.
#[derive(Debug, Clone, PartialEq)]
pub enum PathFamily {
    /// `softmax(-beta * d(·, x1))`.
    MetricInduced { distances: DistanceMatrix },
    /// `(1 - kappa) * source + kappa * delta_{x1}`. With `mask` set, the source
    /// is the point mass on that state and targets never include it.
    Mixture { source: Pmf, mask: Option<usize> },
}

impl PathFamily {
    pub fn metric(distances: DistanceMatrix) -> Self {
        PathFamily::MetricInduced { distances }
    }

    /// Uniform-source mixture over `vocab` tokens.
    pub fn uniform_mixture(vocab: usize) -> Result<Self> {
        Ok(PathFamily::Mixture { source: Pmf::uniform(vocab)?, mask: None })
    }

    /// Masked path over `vocab` tokens plus one mask state at index `vocab`.
    pub fn masked(vocab: usize) -> Result<Self> {
        Ok(PathFamily::Mixture { source: Pmf::delta(vocab + 1, vocab)?, mask: Some(vocab) })
    }

    pub fn validate(&self) -> Result<()> {
        if let PathFamily::Mixture { source, mask: Some(m) } = self {
            check_token(*m, source.len())?;
            if source.get(*m) != 1.0 {
                return Err(invalid("a mask mixture path needs source = delta at the mask state"));
            }
        }
        Ok(())
    }

    /// Number of CTMC states, including a mask state if present.
    pub fn state_count(&self) -> usize {
        match self {
            PathFamily::MetricInduced { distances } => distances.size(),
            PathFamily::Mixture { source, .. } => source.len(),
        }
    }

    /// Number of clean target tokens.
    pub fn target_count(&self) -> usize {
        match self {
            PathFamily::Mixture { mask: Some(_), source } => source.len() - 1,
            _ => self.state_count(),
        }
    }
}

/// Numerically stable softmax of `-beta * d`.
fn neg_scaled_softmax(d: &[f64], beta: f64) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = d.iter().map(|&v| (-beta * (v - min)).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn check_beta(beta: f64) -> Result<()> {
    ensure_finite("beta", beta)?;
    if beta < 0.0 {
        return Err(invalid(format!("beta must be nonnegative, got {beta}")));
    }
    Ok(())
}

/// `p(x | x1; beta) = softmax_x(-beta * d(x, x1))`.
pub fn gibbs_conditional(d: &DistanceMatrix, beta: f64, x1: usize) -> Result<Pmf> {
    check_beta(beta)?;
    check_token(x1, d.size())?;
    Ok(Pmf(neg_scaled_softmax(d.to_target(x1), beta)))
}

/// Time score `phi(x) = d/dt log p_t(x | x1) = beta_dot * (E_p[d] - d(x, x1))`.
pub fn gibbs_log_derivative(d: &DistanceMatrix, beta: f64, beta_dot: f64, x1: usize) -> Result<Vec<f64>> {
    ensure_finite("beta_dot", beta_dot)?;
    let p = gibbs_conditional(d, beta, x1)?;
    let col = d.to_target(x1);
    let mean = p.expect(col);
    Ok(col.iter().map(|&dx| beta_dot * (mean - dx)).collect())
}

/// `(1 - kappa) * source + kappa * delta_{x1}`.
pub fn mixture_conditional(source: &Pmf, kappa: f64, x1: usize) -> Result<Pmf> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(invalid(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    check_token(x1, source.len())?;
    let mut w: Vec<f64> = source.probs().iter().map(|p| (1.0 - kappa) * p).collect();
    w[x1] += kappa;
    Ok(Pmf(w))
}

/// Fisher information of the Gibbs path in `beta`: the variance of
/// `d(x, x1)` under `p(· | x1; beta)`.
pub fn fisher_information_metric(d: &DistanceMatrix, beta: f64, x1: usize) -> Result<f64> {
    let p = gibbs_conditional(d, beta, x1)?;
    Ok(distance_variance(p.probs(), d.to_target(x1)))
}

pub(crate) fn distance_variance(p: &[f64], col: &[f64]) -> f64 {
    let mean: f64 = p.iter().zip(col).map(|(p, d)| p * d).sum();
    // centered form avoids cancellation when the variance is ~eps
    p.iter().zip(col).map(|(p, d)| p * (d - mean) * (d - mean)).sum()
}

/// Fisher information of the mixture path in `kappa` for a target with
/// source mass `p1`: `(1 - p1) / ((1 - kappa) (p1 + (1 - p1) kappa))`.
pub fn fisher_information_mixture(p1: f64, kappa: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p1) {
        return Err(invalid(format!("p1 must lie in [0, 1), got {p1}")));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(invalid(format!("kappa must lie in [0, 1), got {kappa}")));
    }
    if p1 == 0.0 && kappa == 0.0 {
        return Err(Error::Undefined("Fisher information diverges at p1 = 0, kappa = 0".into()));
    }
    Ok((1.0 - p1) / ((1.0 - kappa) * (p1 + (1.0 - p1) * kappa)))
}

/// Fisher–Rao speed `sqrt(sum_x p_dot(x)^2 / p(x))`.
pub fn fr_speed(p: &Pmf, p_dot: &[f64]) -> Result<f64> {
    Ok(fr_speed_squared(p, p_dot)?.sqrt())
}

pub(crate) fn fr_speed_squared(p: &Pmf, p_dot: &[f64]) -> Result<f64> {
    if p_dot.len() != p.len() {
        return Err(Error::SizeMismatch { expected: p.len(), actual: p_dot.len() });
    }
    let mut acc = 0.0;
    for (x, (&px, &dx)) in p.probs().iter().zip(p_dot).enumerate() {
        ensure_finite("p_dot", dx)?;
        if dx == 0.0 {
            continue;
        }
        if px <= 0.0 {
            return Err(Error::ZeroMass(x));
        }
        acc += dx * dx / px;
    }
    Ok(acc)
}

/// Second-order finite-difference derivative of a sampled curve.
///
/// Interior points use the three-point nonuniform central formula, the two
/// boundary points the three-point one-sided formula.
pub(crate) fn finite_difference(times: &[f64], values: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = times.len();
    let dim = values[0].len();
    let mut out = vec![vec![0.0; dim]; n];
    let weights = |k: usize, a: usize, b: usize, c: usize| -> [f64; 3] {
        // Lagrange derivative weights for nodes a, b, c evaluated at node k.
        let (ta, tb, tc, t) = (times[a], times[b], times[c], times[k]);
        [
            ((t - tb) + (t - tc)) / ((ta - tb) * (ta - tc)),
            ((t - ta) + (t - tc)) / ((tb - ta) * (tb - tc)),
            ((t - ta) + (t - tb)) / ((tc - ta) * (tc - tb)),
        ]
    };
    for k in 0..n {
        let (a, b, c) = if k == 0 {
            (0, 1, 2)
        } else if k == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (k - 1, k, k + 1)
        };
        let w = weights(k, a, b, c);
        for x in 0..dim {
            out[k][x] = w[0] * values[a][x] + w[1] * values[b][x] + w[2] * values[c][x];
        }
    }
    out
}

/// Trapezoidal Fisher–Rao length `∫ ||p_dot|| dt` and energy `∫ ||p_dot||^2 dt`
/// of a sampled path, with `p_dot` from finite differences.
pub fn fr_length_and_energy(samples: &[(f64, Pmf)]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(invalid(format!("need at least 3 samples, got {}", samples.len())));
    }
    let s = samples[0].1.len();
    if let Some((_, bad)) = samples.iter().find(|(_, p)| p.len() != s) {
        return Err(Error::SizeMismatch { expected: s, actual: bad.len() });
    }
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(invalid("sample times must be strictly increasing"));
    }
    let times: Vec<f64> = samples.iter().map(|(t, _)| *t).collect();
    let values: Vec<&[f64]> = samples.iter().map(|(_, p)| p.probs()).collect();
    let derivs = finite_difference(&times, &values);
    let speed_sq = samples
        .iter()
        .zip(&derivs)
        .map(|((_, p), dp)| fr_speed_squared(p, dp))
        .collect::<Result<Vec<_>>>()?;
    let mut length = 0.0;
    let mut energy = 0.0;
    for k in 1..samples.len() {
        let dt = times[k] - times[k - 1];
        length += 0.5 * dt * (speed_sq[k].sqrt() + speed_sq[k - 1].sqrt());
        energy += 0.5 * dt * (speed_sq[k] + speed_sq[k - 1]);
    }
    Ok((length, energy))
}
