//! Per-token CTMC machinery: kinetic-optimal velocities, the jump
//! intensity / destination decomposition, first-order and moment-corrected
//! jump probabilities, and a Kolmogorov forward-equation reference
//! integrator.
//!
//! A step over `[t, t + h]` from state `z` jumps with probability `rho` to a
//! destination drawn from `pi_t(· | z)`. The first-order solver uses
//! `rho = 1 - exp(-h lambda_t)`. The moment correction keeps `pi_t` and picks
//! `rho` so that a scalar statistic `phi` has post-step mean `m_{t+h}`:
//!
//! ```text
//! (1 - rho) phi(z) + rho phi_bar = m   =>   rho* = (phi(z) - m) / (phi(z) - phi_bar)
//! ```
//!
//! `rho*` is used only when it lies in `[0, 1]`; otherwise the step falls
//! back to the first-order probability.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::geometry::{check_token, gibbs_conditional, DistanceMatrix, Pmf};
use crate::path::ConditionalPath;

/// Total jump intensity out of the current state and the normalized law of
/// the jump destination. `destination` is `None` when no jump is possible.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDecomposition {
    pub lambda: f64,
    pub destination: Option<Pmf>,
}

impl JumpDecomposition {
    fn from_rates(rates: Vec<f64>) -> Result<Self> {
        let lambda: f64 = rates.iter().sum();
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self { lambda, destination: Some(Pmf::normalized(rates)?) })
        } else if lambda == 0.0 {
            Ok(Self { lambda: 0.0, destination: None })
        } else {
            Err(invalid(format!("jump intensity {lambda} is not a nonnegative finite number")))
        }
    }
}

/// Inputs of the generic moment correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionInputs {
    /// `phi_t(z)`.
    pub phi_current: f64,
    /// `E_{y ~ pi_t}[phi_t(y)]`.
    pub phi_bar: f64,
    /// Reference moment `m_{t+h}`.
    pub reference_moment: f64,
}

impl CorrectionInputs {
    fn validate(&self) -> Result<()> {
        ensure_finite("phi_current", self.phi_current)?;
        ensure_finite("phi_bar", self.phi_bar)?;
        ensure_finite("reference_moment", self.reference_moment)
    }
}

/// A jump probability and whether it came from the moment correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub rho: f64,
    pub corrected: bool,
}

impl Correction {
    fn fallback(rho: f64) -> Self {
        Self { rho, corrected: false }
    }
}

/// Kinetic-optimal rates `u(x, z)` out of `z` for a path with marginal `p` and
/// time derivative `p_dot`:
/// `u(x, z) = [p(z) p_dot(x) - p_dot(z) p(x)]_+ / p(z)` for `x != z`, zero if
/// `p(z) = 0`, and `u(z, z) = -sum_{x != z} u(x, z)`.
pub fn ko_velocity_general(p: &Pmf, p_dot: &[f64], z: usize) -> Result<Vec<f64>> {
    let s = p.len();
    if p_dot.len() != s {
        return Err(Error::SizeMismatch { expected: s, actual: p_dot.len() });
    }
    check_token(z, s)?;
    for &v in p_dot {
        ensure_finite("p_dot", v)?;
    }
    let pz = p.get(z);
    let mut rates = vec![0.0; s];
    if pz > 0.0 {
        let dz = p_dot[z];
        for x in (0..s).filter(|&x| x != z) {
            rates[x] = ((pz * p_dot[x] - dz * p.get(x)) / pz).max(0.0);
        }
    }
    rates[z] = -rates.iter().sum::<f64>();
    Ok(rates)
}

/// Metric-induced rates `u(x, z | x1) = p_t(x | x1) beta_dot [d(z, x1) - d(x, x1)]_+`
/// decomposed into intensity and destination.
pub fn metric_jump_decomposition(
    d: &DistanceMatrix,
    beta: f64,
    beta_dot: f64,
    z: usize,
    x1_hat: usize,
) -> Result<JumpDecomposition> {
    ensure_finite("beta_dot", beta_dot)?;
    if beta_dot < 0.0 {
        return Err(invalid(format!("beta_dot must be nonnegative, got {beta_dot}")));
    }
    check_token(z, d.size())?;
    let p = gibbs_conditional(d, beta, x1_hat)?;
    let col = d.to_target(x1_hat);
    let dz = col[z];
    let rates = p.probs().iter().zip(col).map(|(px, dx)| px * beta_dot * (dz - dx).max(0.0)).collect();
    JumpDecomposition::from_rates(rates)
}

/// Mixture-path rates `kappa_dot / (1 - kappa) * posterior(x)` for `x != z`.
pub fn mixture_jump_decomposition(kappa: f64, kappa_dot: f64, posterior: &Pmf, z: usize) -> Result<JumpDecomposition> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(invalid(format!("kappa must lie in [0, 1), got {kappa}")));
    }
    ensure_finite("kappa_dot", kappa_dot)?;
    if kappa_dot < 0.0 {
        return Err(invalid(format!("kappa_dot must be nonnegative, got {kappa_dot}")));
    }
    check_token(z, posterior.len())?;
    let scale = kappa_dot / (1.0 - kappa);
    let mut rates: Vec<f64> = posterior.probs().iter().map(|q| scale * q).collect();
    rates[z] = 0.0;
    JumpDecomposition::from_rates(rates)
}

/// First-order jump probability `1 - exp(-h lambda)`.
pub fn base_jump_prob(lambda: f64, h: f64) -> f64 {
    debug_assert!(lambda >= 0.0 && h >= 0.0);
    -(-h * lambda).exp_m1()
}

/// Generic moment-matched jump probability with range fallback.
pub fn corrected_jump_prob_generic(inputs: &CorrectionInputs, fallback: f64) -> Result<Correction> {
    inputs.validate()?;
    if !(0.0..=1.0).contains(&fallback) {
        return Err(invalid(format!("fallback must lie in [0, 1], got {fallback}")));
    }
    let denom = inputs.phi_current - inputs.phi_bar;
    if denom == 0.0 {
        return Ok(Correction::fallback(fallback));
    }
    let rho = (inputs.phi_current - inputs.reference_moment) / denom;
    if (0.0..=1.0).contains(&rho) {
        Ok(Correction { rho, corrected: true })
    } else {
        Ok(Correction::fallback(fallback))
    }
}

/// Post-step moment residual `(1 - rho) phi(z) + rho phi_bar - m`.
pub fn moment_residual(inputs: &CorrectionInputs, rho: f64) -> f64 {
    (1.0 - rho) * inputs.phi_current + rho * inputs.phi_bar - inputs.reference_moment
}

/// Metric-induced moment-matched jump probability.
///
/// With `A = d(z, x1) - E_{p_{t+h}}[d]` and `B = E_pi[d(z, x1) - d]`, the
/// corrected probability is `A / B`. The common factor `beta_dot` cancels, so
/// the gate is on `lambda > 0`, `B != 0` and `A / B` in `[0, 1]` rather than on
/// `phi(z) != phi_bar`; the two agree whenever `beta_dot > 0`.
pub fn corrected_jump_prob_metric(
    d: &DistanceMatrix,
    beta_t: f64,
    beta_th: f64,
    z: usize,
    x1_hat: usize,
    jd: &JumpDecomposition,
    fallback: f64,
) -> Result<Correction> {
    if !(beta_th >= beta_t) || beta_t < 0.0 {
        return Err(invalid(format!("need 0 <= beta_t <= beta_t+h, got {beta_t}, {beta_th}")));
    }
    if !(0.0..=1.0).contains(&fallback) {
        return Err(invalid(format!("fallback must lie in [0, 1], got {fallback}")));
    }
    check_token(z, d.size())?;
    let Some(pi) = jd.destination.as_ref().filter(|_| jd.lambda > 0.0) else {
        return Ok(Correction::fallback(fallback));
    };
    let next = gibbs_conditional(d, beta_th, x1_hat)?;
    let col = d.to_target(x1_hat);
    let dz = col[z];
    let a = dz - next.expect(col);
    let b: f64 = pi.probs().iter().zip(col).map(|(w, dx)| w * (dz - dx)).sum();
    if b.abs() <= 1e-15 * dz.abs().max(1.0) {
        return Ok(Correction::fallback(fallback));
    }
    let rho = a / b;
    if (0.0..=1.0).contains(&rho) {
        Ok(Correction { rho, corrected: true })
    } else {
        Ok(Correction::fallback(fallback))
    }
}

/// Generic-form inputs for the metric correction: the time score
/// `phi_t(x) = beta_dot (E_{p_t}[d] - d(x, x1))`, its destination average and
/// its expectation under `p_{t+h}`.
pub fn metric_correction_inputs(
    d: &DistanceMatrix,
    beta_t: f64,
    beta_dot: f64,
    beta_th: f64,
    z: usize,
    x1_hat: usize,
    jd: &JumpDecomposition,
) -> Result<Option<CorrectionInputs>> {
    let Some(pi) = jd.destination.as_ref() else {
        return Ok(None);
    };
    let col = d.to_target(x1_hat);
    let mean_t = gibbs_conditional(d, beta_t, x1_hat)?.expect(col);
    let mean_th = gibbs_conditional(d, beta_th, x1_hat)?.expect(col);
    let mean_pi = pi.expect(col);
    Ok(Some(CorrectionInputs {
        phi_current: beta_dot * (mean_t - col[z]),
        phi_bar: beta_dot * (mean_t - mean_pi),
        reference_moment: beta_dot * (mean_t - mean_th),
    }))
}

/// Exact finite-step jump probability of the two-point mixture path,
/// `(kappa_{t+h} - kappa_t) / (1 - kappa_t)`.
pub fn mixture_exact_jump_prob(kappa_t: f64, kappa_th: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&kappa_t) || !(kappa_t..=1.0).contains(&kappa_th) {
        return Err(invalid(format!("need 0 <= kappa_t <= kappa_t+h <= 1 and kappa_t < 1, got {kappa_t}, {kappa_th}")));
    }
    Ok((kappa_th - kappa_t) / (1.0 - kappa_t))
}

/// Target-indicator moment inputs for a mixture step from a non-target state:
/// `phi(z) = 0`, `phi_bar = 1`, and the reference moment is the exact
/// probability of sitting at the target after the step.
pub fn mixture_indicator_inputs(kappa_t: f64, kappa_th: f64) -> Result<CorrectionInputs> {
    Ok(CorrectionInputs { phi_current: 0.0, phi_bar: 1.0, reference_moment: mixture_exact_jump_prob(kappa_t, kappa_th)? })
}

/// Tolerance on the simplex for [`forward_equation_reference`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-8;

/// `dp/dt = sum_z u_t(·, z) p(z)` with rates from the analytic path.
fn forward_rhs(path: &ConditionalPath, x1: usize, t: f64, p: &[f64]) -> Result<Vec<f64>> {
    let (pt, dpt) = path.derivative(t, x1)?;
    let mut out = vec![0.0; p.len()];
    for (z, &pz) in p.iter().enumerate() {
        if pz == 0.0 {
            continue;
        }
        let rates = ko_velocity_general(&pt, &dpt, z)?;
        for (o, r) in out.iter_mut().zip(&rates) {
            *o += r * pz;
        }
    }
    Ok(out)
}

/// Fixed-step RK4 integration of the Kolmogorov forward equation for the
/// conditional path towards `x1`, started from `p_{t0}(· | x1)`.
pub fn forward_equation_reference(path: &ConditionalPath, x1: usize, t0: f64, t1: f64, steps: usize) -> Result<Pmf> {
    if !(t0 <= t1) || !(0.0..=1.0).contains(&t0) || !(0.0..=1.0).contains(&t1) {
        return Err(invalid(format!("need 0 <= t0 <= t1 <= 1, got {t0}, {t1}")));
    }
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    let start = path.marginal(t0, x1)?;
    if t1 == t0 {
        return Ok(start);
    }
    let h = (t1 - t0) / steps as f64;
    let mut p = start.into_vec();
    let axpy = |p: &[f64], k: &[f64], a: f64| -> Vec<f64> { p.iter().zip(k).map(|(p, k)| p + a * k).collect() };
    for n in 0..steps {
        let t = t0 + n as f64 * h;
        let k1 = forward_rhs(path, x1, t, &p)?;
        let k2 = forward_rhs(path, x1, t + 0.5 * h, &axpy(&p, &k1, 0.5 * h))?;
        let k3 = forward_rhs(path, x1, t + 0.5 * h, &axpy(&p, &k2, 0.5 * h))?;
        let k4 = forward_rhs(path, x1, (t + h).min(t1), &axpy(&p, &k3, h))?;
        for x in 0..p.len() {
            p[x] += h / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
        }
        let sum: f64 = p.iter().sum();
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || min < -SIMPLEX_TOLERANCE || !sum.is_finite() {
            return Err(Error::NoConvergence(format!(
                "forward integration left the simplex at t = {t} (sum {sum}, min {min}); step too coarse"
            )));
        }
    }
    Pmf::normalized(p.into_iter().map(|v| v.max(0.0)).collect())
}

/// Default reference resolution: steps per unit time.
pub const REFERENCE_STEPS_PER_UNIT: usize = 10_000;

/// [`forward_equation_reference`] with step doubling from
/// [`REFERENCE_STEPS_PER_UNIT`] until two successive results agree within
/// `1e-8` in sup norm. Returns the result and the step count used.
pub fn forward_equation_reference_refined(path: &ConditionalPath, x1: usize, t0: f64, t1: f64) -> Result<(Pmf, usize)> {
    let mut steps = ((REFERENCE_STEPS_PER_UNIT as f64 * (t1 - t0)).ceil() as usize).max(1);
    let mut prev = forward_equation_reference(path, x1, t0, t1, steps)?;
    for _ in 0..8 {
        steps *= 2;
        let next = forward_equation_reference(path, x1, t0, t1, steps)?;
        let gap = prev.probs().iter().zip(next.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap <= 1e-8 {
            return Ok((next, steps));
        }
        prev = next;
    }
    Err(Error::NoConvergence(format!("reference integration not converged at {steps} steps")))
}
