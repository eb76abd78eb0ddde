//! Time schedulers for conditional probability paths.
//!
//! The kinetic-optimal scheduler reparameterizes a fixed curve `p(x; k)` so
//! that it is traversed at constant Fisher–Rao speed. With `I(k)` the Fisher
//! information of the path parameter and `l(k) = ∫_0^k sqrt(I)`, the optimal
//! schedule is `k*(t) = l^{-1}(t L)` with `k_dot*(t) = L / sqrt(I(k*(t)))`.
//! For metric-induced paths `I` has no closed form, so the arc length is
//! tabulated on a uniform parameter grid and inverted on a uniform time grid
//! ([`build_ko_schedule_metric`]). The same construction over an arbitrary
//! scalar Fisher information is [`build_ko_schedule_generic`].

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::geometry::{distance_variance, DistanceSet};

/// Endpoint tolerance and Fisher-information floor.
pub const DEFAULT_EPS: f64 = 1e-8;
/// Number of uniform parameter grid points.
pub const DEFAULT_GRID_SIZE: usize = 4096;
/// Number of uniform time points in a table.
pub const DEFAULT_TABLE_POINTS: usize = 1024;
pub const DEFAULT_BETA_INIT: f64 = 1.0;
/// Default truncation for mixture paths, whose Fisher information diverges at 1.
pub const DEFAULT_KAPPA_MAX: f64 = 1.0 - 1e-4;

const BISECTION_REL_TOL: f64 = 1e-6;
const MAX_DOUBLINGS: usize = 200;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    /// Inverse temperature of a metric-induced path.
    MetricKo,
    /// Scalar parameter of an arbitrary path.
    GenericKo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// One table from codebook-averaged Fisher information.
    #[default]
    Shared,
    /// One table per codebook.
    PerCodebook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub grid_size: usize,
    pub tolerance: f64,
    pub averaging: Averaging,
    /// Set for per-codebook tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<usize>,
}

/// Lookup table `{t_j, value_j, derivative_j}` on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerTable {
    pub kind: TableKind,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
    /// `beta_max` or `kappa_max`.
    pub param_max: f64,
    /// Fisher–Rao arc length `L` of the whole path.
    pub total_length: f64,
    pub meta: TableMeta,
}

/// Uniform time grid `t_j = j / (n - 1)`.
pub fn uniform_times(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

impl SchedulerTable {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Checks the structural invariants of a constructed or loaded table.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 {
            return Err(invalid(format!("table needs at least 2 points, got {n}")));
        }
        for (name, col) in [("values", &self.values), ("derivatives", &self.derivatives)] {
            if col.len() != n {
                return Err(Error::Format(format!("{name} has {} entries, times has {n}", col.len())));
            }
        }
        if self.times != uniform_times(n) {
            return Err(Error::Format("times are not the uniform grid j/(T-1)".into()));
        }
        if !(self.param_max > 0.0) || !self.param_max.is_finite() {
            return Err(Error::Format(format!("param_max = {} must be positive", self.param_max)));
        }
        if !self.total_length.is_finite() || self.total_length < 0.0 {
            return Err(Error::Format(format!("total_length = {} is invalid", self.total_length)));
        }
        if self.values[0] != 0.0 || (self.values[n - 1] - self.param_max).abs() > 1e-9 {
            return Err(Error::Format("table endpoints must be 0 and param_max".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) || self.values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("values must be finite and nondecreasing".into()));
        }
        if self.derivatives.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Format("derivatives must be finite and positive".into()));
        }
        Ok(())
    }

    /// Piecewise-linear interpolation of `(value, derivative)` at `t`.
    pub fn interp(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("t must lie in [0, 1], got {t}")));
        }
        let last = self.times.len() - 1;
        let pos = t * last as f64;
        let nearest = pos.round();
        if (pos - nearest).abs() <= 1e-9 {
            let j = nearest as usize;
            return Ok((self.values[j], self.derivatives[j]));
        }
        let j = (pos.floor() as usize).min(last - 1);
        let w = pos - j as f64;
        let lerp = |col: &[f64]| col[j] + w * (col[j + 1] - col[j]);
        Ok((lerp(&self.values), lerp(&self.derivatives)))
    }
}

/// See [`SchedulerTable::interp`].
pub fn interp_schedule(table: &SchedulerTable, t: f64) -> Result<(f64, f64)> {
    table.interp(t)
}

/// Result of the metric kinetic-optimal construction: a single shared table
/// or one table per codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoSchedule {
    pub averaging: Averaging,
    pub tables: Vec<SchedulerTable>,
}

impl KoSchedule {
    pub fn table_for(&self, codebook: usize) -> &SchedulerTable {
        match self.averaging {
            Averaging::Shared => &self.tables[0],
            Averaging::PerCodebook => &self.tables[codebook],
        }
    }
}

/// Smallest `p(x1 | x1; beta)` over codebooks and targets.
fn concentration_score(ds: &DistanceSet, beta: f64) -> f64 {
    let mut score = f64::INFINITY;
    for d in ds.codebooks() {
        for x1 in 0..d.size() {
            // d(x1, x1) = 0, so the target's unnormalized weight is 1
            let z: f64 = d.to_target(x1).iter().map(|&v| (-beta * v).exp()).sum();
            score = score.min(1.0 / z);
        }
    }
    score
}

/// Finite endpoint `beta_max`: the smallest inverse temperature at which every
/// target of every codebook holds at least `1 - eps` of its own mass.
///
/// Doubles from `beta_init` until the criterion holds, then bisects to a
/// relative tolerance of 1e-6.
pub fn find_beta_max(ds: &DistanceSet, eps: f64, beta_init: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(invalid(format!("eps must lie in (0, 0.5), got {eps}")));
    }
    if !(beta_init > 0.0) || !beta_init.is_finite() {
        return Err(invalid(format!("beta_init must be positive, got {beta_init}")));
    }
    let target = 1.0 - eps;
    let ok = |beta: f64| concentration_score(ds, beta) >= target;

    let mut hi = beta_init;
    let mut lo = 0.0;
    let mut doublings = 0;
    while !ok(hi) {
        if doublings == MAX_DOUBLINGS || !hi.is_finite() {
            return Err(Error::NoConvergence(format!(
                "concentration score stays below {target} after {doublings} doublings"
            )));
        }
        lo = hi;
        hi *= 2.0;
        doublings += 1;
    }
    for _ in 0..MAX_BISECTIONS {
        if hi - lo <= BISECTION_REL_TOL * hi {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NoConvergence("bisection did not reach tolerance".into()))
}

/// Arc-length inversion shared by both kinetic-optimal constructors.
///
/// `grid` is the uniform parameter grid, `fisher` the Fisher information on it.
/// Returns `(values, derivatives, total_length)`.
fn invert_arc_length(grid: &[f64], fisher: &[f64], points: usize, eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let n = grid.len();
    let root = |v: f64| v.max(eps).sqrt();
    let mut arc = vec![0.0; n];
    for i in 1..n {
        arc[i] = arc[i - 1] + 0.5 * (root(fisher[i]) + root(fisher[i - 1])) * (grid[i] - grid[i - 1]);
    }
    let total = arc[n - 1];

    let times = uniform_times(points);
    let mut values = Vec::with_capacity(points);
    let mut derivs = Vec::with_capacity(points);
    for (j, &t) in times.iter().enumerate() {
        let target = t * total;
        let i = arc.partition_point(|&l| l < target).clamp(1, n - 1);
        let a = (target - arc[i - 1]) / (arc[i] - arc[i - 1] + eps);
        let mut value = grid[i - 1] + a * (grid[i] - grid[i - 1]);
        // the +eps in the weight keeps the final node just short of the grid end
        if j == points - 1 {
            value = grid[n - 1];
        }
        let a_v = (value - grid[i - 1]) / (grid[i] - grid[i - 1] + eps);
        let v = fisher[i - 1] + a_v * (fisher[i] - fisher[i - 1]);
        values.push(value);
        derivs.push(total / root(v));
    }
    (values, derivs, total)
}

fn check_construction(grid_size: usize, points: usize, param_max: f64, eps: f64) -> Result<()> {
    if grid_size < 2 || points < 2 {
        return Err(invalid(format!("grid size ({grid_size}) and table points ({points}) must be >= 2")));
    }
    if !(param_max > 0.0) || !param_max.is_finite() {
        return Err(invalid(format!("parameter maximum must be positive and finite, got {param_max}")));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Target-averaged distance variance for one codebook at each grid point.
fn codebook_fisher(d: &crate::geometry::DistanceMatrix, grid: &[f64]) -> Vec<f64> {
    let s = d.size();
    grid.par_iter()
        .map(|&beta| {
            let mut acc = 0.0;
            let mut p = vec![0.0; s];
            for x1 in 0..s {
                let col = d.to_target(x1);
                let mut z = 0.0;
                for (px, &dx) in p.iter_mut().zip(col) {
                    *px = (-beta * dx).exp();
                    z += *px;
                }
                for px in &mut p {
                    *px /= z;
                }
                acc += distance_variance(&p, col);
            }
            acc / s as f64
        })
        .collect()
}

/// Kinetic-optimal inverse-temperature tables for metric-induced paths.
///
/// With [`Averaging::Shared`] the Fisher information is averaged over targets
/// and codebooks and one table is returned; with
/// [`Averaging::PerCodebook`] each codebook gets its own table built from its
/// target-averaged Fisher information.
pub fn build_ko_schedule_metric(
    ds: &DistanceSet,
    grid_size: usize,
    table_points: usize,
    beta_max: f64,
    eps: f64,
    averaging: Averaging,
) -> Result<KoSchedule> {
    check_construction(grid_size, table_points, beta_max, eps)?;
    let grid: Vec<f64> = (0..grid_size).map(|i| beta_max * i as f64 / (grid_size - 1) as f64).collect();
    let per_codebook: Vec<Vec<f64>> = ds.codebooks().iter().map(|d| codebook_fisher(d, &grid)).collect();

    let make = |fisher: &[f64], codebook: Option<usize>| -> Result<SchedulerTable> {
        if fisher.iter().all(|&v| v <= 0.0) {
            return Err(Error::Undefined("Fisher information is zero on the whole grid".into()));
        }
        let (values, derivatives, total_length) = invert_arc_length(&grid, fisher, table_points, eps);
        let table = SchedulerTable {
            kind: TableKind::MetricKo,
            times: uniform_times(table_points),
            values,
            derivatives,
            param_max: beta_max,
            total_length,
            meta: TableMeta { grid_size, tolerance: eps, averaging, codebook },
        };
        table.validate()?;
        Ok(table)
    };

    let tables = match averaging {
        Averaging::Shared => {
            let c = per_codebook.len() as f64;
            let mean: Vec<f64> =
                (0..grid_size).map(|i| per_codebook.iter().map(|v| v[i]).sum::<f64>() / c).collect();
            vec![make(&mean, None)?]
        }
        Averaging::PerCodebook => per_codebook
            .iter()
            .enumerate()
            .map(|(c, v)| make(v, Some(c)))
            .collect::<Result<_>>()?,
    };
    Ok(KoSchedule { averaging, tables })
}

/// Kinetic-optimal table for a scalar path parameter with Fisher information
/// `fisher` on `[0, kappa_max]`.
pub fn build_ko_schedule_generic<F>(
    fisher: F,
    kappa_max: f64,
    grid_size: usize,
    table_points: usize,
    eps: f64,
) -> Result<SchedulerTable>
where
    F: Fn(f64) -> f64 + Sync,
{
    check_construction(grid_size, table_points, kappa_max, eps)?;
    let grid: Vec<f64> = (0..grid_size).map(|i| kappa_max * i as f64 / (grid_size - 1) as f64).collect();
    let values: Vec<f64> = grid.par_iter().map(|&k| fisher(k)).collect();
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(invalid(format!("Fisher information at grid point {i} (kappa = {}) is {v}", grid[i])));
    }
    let (vals, derivatives, total_length) = invert_arc_length(&grid, &values, table_points, eps);
    let table = SchedulerTable {
        kind: TableKind::GenericKo,
        times: uniform_times(table_points),
        values: vals,
        derivatives,
        param_max: kappa_max,
        total_length,
        meta: TableMeta { grid_size, tolerance: eps, averaging: Averaging::Shared, codebook: None },
    };
    table.validate()?;
    Ok(table)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(invalid(format!("t must lie in [0, 1], got {t}")))
    }
}

/// Hypersphere-geodesic mixture scheduler
/// `kappa_t = 1 - sin^2((1 - t) W) / sin^2 W`, `W = arccos sqrt(p1)`.
pub fn closed_form_mixture_ko(p1: f64, t: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&p1) {
        return Err(invalid(format!("p1 must lie in [0, 1), got {p1}")));
    }
    check_time(t)?;
    let omega = p1.sqrt().acos();
    let s2 = omega.sin().powi(2);
    let r = (1.0 - t) * omega;
    let kappa = 1.0 - r.sin().powi(2) / s2;
    let kappa_dot = omega * (2.0 * r).sin() / s2;
    Ok((kappa, kappa_dot))
}

/// `beta_t = c (t / (1 - t))^a`, clamped at `cap`. Past the clamp (and at
/// `t = 1`) the derivative is zero.
pub fn heuristic_beta(a: f64, c: f64, t: f64, cap: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) || !(c > 0.0) {
        return Err(invalid(format!("heuristic scheduler needs a > 0 and c > 0, got a = {a}, c = {c}")));
    }
    check_time(t)?;
    if t == 1.0 {
        return Ok((cap, 0.0));
    }
    let r = t / (1.0 - t);
    let beta = c * r.powf(a);
    if beta >= cap {
        return Ok((cap, 0.0));
    }
    let beta_dot = if t == 0.0 {
        if a < 1.0 { f64::INFINITY } else if a == 1.0 { c } else { 0.0 }
    } else {
        c * a * r.powf(a - 1.0) / (1.0 - t).powi(2)
    };
    Ok((beta, beta_dot))
}

/// Fixed mixture schedulers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedKappa {
    /// `sin^2(pi t / 2)`, the mask-source kinetic-optimal scheduler.
    SinSq,
    /// `t^2`.
    Power2,
    /// `sin(pi t / 2)`.
    Sine,
    /// `t`.
    Linear,
}

impl FromStr for NamedKappa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinsq" | "sin2" => Ok(NamedKappa::SinSq),
            "power2" | "t2" => Ok(NamedKappa::Power2),
            "sine" | "sin" => Ok(NamedKappa::Sine),
            "linear" | "t" => Ok(NamedKappa::Linear),
            other => Err(invalid(format!("unknown scheduler kind '{other}'"))),
        }
    }
}

impl fmt::Display for NamedKappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NamedKappa::SinSq => "sinsq",
            NamedKappa::Power2 => "t2",
            NamedKappa::Sine => "sin",
            NamedKappa::Linear => "linear",
        })
    }
}

pub fn named_kappa(kind: NamedKappa, t: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    Ok(match kind {
        NamedKappa::SinSq => {
            let a = FRAC_PI_2 * t;
            (a.sin().powi(2), FRAC_PI_2 * (2.0 * a).sin())
        }
        NamedKappa::Power2 => (t * t, 2.0 * t),
        NamedKappa::Sine => ((FRAC_PI_2 * t).sin(), FRAC_PI_2 * (FRAC_PI_2 * t).cos()),
        NamedKappa::Linear => (t, 1.0),
    })
}

/// A scheduler attached to a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SchedulerSpec {
    /// Tabulated kinetic-optimal scheduler, metric or generic.
    NumericalKo { table: SchedulerTable },
    /// Closed-form mixture scheduler. Without `p1` the source mass of the
    /// target token is used, giving a target-dependent scheduler.
    ClosedMixtureKo { p1: Option<f64> },
    /// `sin^2(pi t / 2)`.
    MaskKo,
    /// `c (t / (1 - t))^a` capped at `cap`.
    Heuristic { a: f64, c: f64, cap: f64 },
    Named { kind: NamedKappa },
}

impl SchedulerSpec {
    pub fn heuristic(a: f64, c: f64, cap: f64) -> Result<Self> {
        if !(a > 0.0) || !(c > 0.0) {
            return Err(invalid(format!("heuristic scheduler needs a > 0 and c > 0, got a = {a}, c = {c}")));
        }
        ensure_finite("cap", cap)?;
        if !(cap > 0.0) {
            return Err(invalid("heuristic cap must be positive"));
        }
        Ok(SchedulerSpec::Heuristic { a, c, cap })
    }

    /// Whether the scheduled parameter is an inverse temperature rather than
    /// a mixture weight.
    pub fn is_inverse_temperature(&self) -> bool {
        matches!(
            self,
            SchedulerSpec::Heuristic { .. } | SchedulerSpec::NumericalKo { table: SchedulerTable { kind: TableKind::MetricKo, .. } }
        )
    }

    /// Value reached at `t = 1`.
    pub fn param_max(&self) -> f64 {
        match self {
            SchedulerSpec::NumericalKo { table } => table.param_max,
            SchedulerSpec::Heuristic { cap, .. } => *cap,
            _ => 1.0,
        }
    }

    /// `(value, derivative)` at `t`. `target_mass` is the source mass of the
    /// target token, needed only by a target-dependent closed-form scheduler.
    pub fn evaluate(&self, t: f64, target_mass: Option<f64>) -> Result<(f64, f64)> {
        match self {
            SchedulerSpec::NumericalKo { table } => table.interp(t),
            SchedulerSpec::ClosedMixtureKo { p1 } => {
                let p1 = p1.or(target_mass).ok_or_else(|| {
                    invalid("target-dependent closed-form scheduler needs the target's source mass")
                })?;
                closed_form_mixture_ko(p1, t)
            }
            SchedulerSpec::MaskKo => named_kappa(NamedKappa::SinSq, t),
            SchedulerSpec::Heuristic { a, c, cap } => heuristic_beta(*a, *c, t, *cap),
            SchedulerSpec::Named { kind } => named_kappa(*kind, t),
        }
    }
}
