//! Experiment driver: distribution metrics, Monte Carlo simulation of the
//! sampler against a known target, NFE sweeps, Fisher–Rao speed and length
//! diagnostics, seeded fixtures and a self-check suite.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ctmc::{
    corrected_jump_prob_generic, corrected_jump_prob_metric, forward_equation_reference, metric_correction_inputs,
    metric_jump_decomposition, mixture_exact_jump_prob, mixture_indicator_inputs, moment_residual,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{fisher_information_mixture, fr_speed_squared, DistanceMatrix, DistanceSet, PathFamily, Pmf};
use crate::io::{to_tagged_json, REPORT_FORMAT};
use crate::path::ConditionalPath;
use crate::rng::{Purpose, StreamKey};
use crate::sampler::{run_inference, ExactOracle, PosteriorProvider, SamplerConfig, StepStats};
use crate::scheduler::{
    build_ko_schedule_generic, build_ko_schedule_metric, closed_form_mixture_ko, find_beta_max, named_kappa, Averaging,
    NamedKappa, SchedulerSpec, SchedulerTable, DEFAULT_EPS,
};

/// `1/2 sum |p - q|`.
pub fn tv_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch { expected: p.len(), actual: q.len() });
    }
    let tv = 0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// `KL(p || q)`, `None` when infinite.
pub fn kl_divergence(p: &Pmf, q: &Pmf) -> Result<Option<f64>> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch { expected: p.len(), actual: q.len() });
    }
    let mut kl = 0.0;
    for (&a, &b) in p.probs().iter().zip(q.probs()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(None);
        }
        kl += a * (a / b).ln();
    }
    Ok(Some(kl.max(0.0)))
}

/// Averaged squared Fisher–Rao speed `mean_{c, x1} ||p_dot_t(· | x1)||^2`
/// from the analytic derivatives of the paths.
fn mean_speed_squared(paths: &[ConditionalPath], t: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for path in paths {
        for x1 in 0..path.target_count() {
            let (p, dp) = path.derivative(t, x1)?;
            acc += fr_speed_squared(&p, &dp)?;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Averaged speed at the midpoint of each of `steps` uniform steps.
pub fn step_speeds(paths: &[ConditionalPath], steps: usize) -> Result<Vec<f64>> {
    (0..steps).map(|k| mean_speed_squared(paths, (k as f64 + 0.5) / steps as f64).map(f64::sqrt)).collect()
}

/// Trapezoidal length `∫ sqrt(mean ||p_dot||^2) dt` and energy
/// `∫ mean ||p_dot||^2 dt` of a family of paths over `times`.
pub fn averaged_length_energy(paths: &[ConditionalPath], times: &[f64]) -> Result<(f64, f64)> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("need at least two strictly increasing times"));
    }
    let sq: Vec<f64> = times.par_iter().map(|&t| mean_speed_squared(paths, t)).collect::<Result<_>>()?;
    let (mut length, mut energy) = (0.0, 0.0);
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        length += 0.5 * dt * (sq[k].sqrt() + sq[k - 1].sqrt());
        energy += 0.5 * dt * (sq[k] + sq[k - 1]);
    }
    Ok((length, energy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub times: Vec<f64>,
    pub speeds: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the mean; zero for a zero profile.
    pub relative_std: f64,
}

impl SpeedProfile {
    fn from_samples(times: Vec<f64>, speeds: Vec<f64>) -> Self {
        let n = speeds.len() as f64;
        let mean = speeds.iter().sum::<f64>() / n;
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let relative_std = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
        Self { times, speeds, mean, relative_std }
    }
}

/// Step for the central differences of the speed diagnostic.
const SPEED_FD_STEP: f64 = 1e-4;

/// Averaged Fisher–Rao speed at the interior points of a uniform grid of
/// `samples` times, with `p_dot` from central differences of `p_t`.
pub fn speed_profile(paths: &[ConditionalPath], samples: usize) -> Result<SpeedProfile> {
    if samples < 3 {
        return Err(invalid(format!("need at least 3 samples, got {samples}")));
    }
    let times: Vec<f64> = (1..samples - 1).map(|j| j as f64 / (samples - 1) as f64).collect();
    let h = SPEED_FD_STEP.min(0.5 / (samples - 1) as f64);
    let speeds = times
        .par_iter()
        .map(|&t| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for path in paths {
                for x1 in 0..path.target_count() {
                    let p = path.marginal(t, x1)?;
                    let hi = path.marginal(t + h, x1)?;
                    let lo = path.marginal(t - h, x1)?;
                    // cells that underflowed at t contribute p * score^2 -> 0
                    let dp: Vec<f64> = hi
                        .probs()
                        .iter()
                        .zip(lo.probs())
                        .zip(p.probs())
                        .map(|((a, b), &px)| if px > 0.0 { (a - b) / (2.0 * h) } else { 0.0 })
                        .collect();
                    acc += fr_speed_squared(&p, &dp)?;
                    n += 1;
                }
            }
            Ok((acc / n as f64).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeedProfile::from_samples(times, speeds))
}

/// Metric paths for each codebook of `ds` driven by `spec`.
pub fn metric_paths(ds: &DistanceSet, spec: &SchedulerSpec) -> Result<Vec<ConditionalPath>> {
    ds.codebooks().iter().map(|d| ConditionalPath::new(PathFamily::metric(d.clone()), spec.clone())).collect()
}

/// [`speed_profile`] of a metric table applied to every codebook of `ds`.
pub fn speed_diagnostic(table: &SchedulerTable, ds: &DistanceSet, samples: usize) -> Result<SpeedProfile> {
    speed_profile(&metric_paths(ds, &SchedulerSpec::NumericalKo { table: table.clone() })?, samples)
}

/// `sup_x |p_dot_t(x) - sum_z u_t(x, z) p_t(z)|` with `p_dot` from the
/// fourth-order central difference of step `h`.
pub fn kolmogorov_residual(path: &ConditionalPath, x1: usize, t: f64, h: f64) -> Result<f64> {
    if !(t - 2.0 * h >= 0.0 && t + 2.0 * h <= 1.0) {
        return Err(invalid(format!("stencil around t = {t} with h = {h} leaves [0, 1]")));
    }
    let p = path.marginal(t, x1)?;
    let at = |dt: f64| path.marginal(t + dt, x1);
    let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
    let mut flow = vec![0.0; p.len()];
    for z in 0..p.len() {
        let rates = path.rates(t, x1, z)?;
        for (f, r) in flow.iter_mut().zip(&rates) {
            *f += r * p.get(z);
        }
    }
    let mut worst: f64 = 0.0;
    for x in 0..p.len() {
        let fd = (-p2.get(x) + 8.0 * p1.get(x) - 8.0 * m1.get(x) + m2.get(x)) / (12.0 * h);
        worst = worst.max((fd - flow[x]).abs());
    }
    Ok(worst)
}

/// Metrics of one Monte Carlo simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub nfe: usize,
    pub corrector: bool,
    pub trials: u64,
    /// Mean over codebooks of the TV between the empirical joint law of the
    /// generated target sequence and the target.
    pub tv_to_target: f64,
    pub per_codebook_tv: Vec<f64>,
    /// Mean over codebooks of `KL(empirical || target)`; `None` if infinite.
    pub kl_to_target: Option<f64>,
    /// Fraction of generated sequences still holding a mask token.
    pub unresolved_rate: f64,
    /// Averaged Fisher–Rao speed at each step midpoint.
    pub per_step_speed: Vec<f64>,
    /// Largest moment-condition residual per step over corrected cells.
    pub moment_residuals: Vec<f64>,
    /// Corrected cells over cells with a positive jump intensity.
    pub corrector_used_rate: f64,
    /// Jumps over cell updates.
    pub jump_rate: f64,
}

#[derive(Clone)]
struct Tally {
    counts: Vec<Vec<u64>>,
    unresolved: Vec<u64>,
    steps: Vec<StepStats>,
}

impl Tally {
    fn new(codebooks: usize, joint: usize, steps: usize) -> Self {
        Self { counts: vec![vec![0; joint]; codebooks], unresolved: vec![0; codebooks], steps: vec![StepStats::default(); steps] }
    }

    // Every field is an integer count or a max, so merging is exact in any order.
    fn merge(mut self, other: Tally) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.unresolved.iter_mut().zip(&other.unresolved).for_each(|(x, y)| *x += y);
        self.steps.iter_mut().zip(&other.steps).for_each(|(x, y)| x.merge(y));
        self
    }
}

/// Runs `trials` independent sampler trajectories against the known target of
/// `oracle` and compares the empirical joint law of the generated target
/// tokens with it. Trials fan out over the rayon pool; the result does not
/// depend on the number of threads.
pub fn simulate(config: &SamplerConfig, oracle: &ExactOracle, prompt: &[usize], trials: u64) -> Result<SimulationMetrics> {
    simulate_with(config, oracle, oracle, prompt, trials)
}

/// [`simulate`] with a separate posterior provider.
pub fn simulate_with(
    config: &SamplerConfig,
    provider: &dyn PosteriorProvider,
    oracle: &ExactOracle,
    prompt: &[usize],
    trials: u64,
) -> Result<SimulationMetrics> {
    config.validate()?;
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    let c = config.codebooks();
    if oracle.targets().len() != c {
        return Err(Error::SizeMismatch { expected: c, actual: oracle.targets().len() });
    }
    let (n, s) = (oracle.length(), oracle.vocab());
    let targets = oracle.targets().iter().map(|q| q.joint(n, s)).collect::<Result<Vec<_>>>()?;
    let joint = targets[0].len();
    let steps = config.steps;
    let tally = (0..trials)
        .into_par_iter()
        .try_fold(
            || Tally::new(c, joint, steps),
            |mut tally, trial| -> Result<Tally> {
                let out = run_inference(config, provider, prompt, n, trial, false)?;
                for k in 0..c {
                    let mut idx = 0usize;
                    let mut resolved = true;
                    for i in 0..n {
                        let x = out.tokens[i * c + k];
                        resolved &= x < s;
                        idx = idx * s + x.min(s - 1);
                    }
                    if resolved {
                        tally.counts[k][idx] += 1;
                    } else {
                        tally.unresolved[k] += 1;
                    }
                }
                for (acc, rec) in tally.steps.iter_mut().zip(&out.trace) {
                    acc.merge(&rec.stats);
                }
                Ok(tally)
            },
        )
        .try_reduce(|| Tally::new(c, joint, steps), |a, b| Ok(a.merge(b)))?;

    let total = trials as f64;
    let mut per_codebook_tv = Vec::with_capacity(c);
    let mut kl_sum = Some(0.0);
    for k in 0..c {
        let unresolved = tally.unresolved[k] as f64 / total;
        let q = targets[k].probs();
        let emp: Vec<f64> = tally.counts[k].iter().map(|&v| v as f64 / total).collect();
        let tv = 0.5 * (emp.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() + unresolved);
        per_codebook_tv.push(tv.min(1.0));
        kl_sum = match (kl_sum, unresolved > 0.0) {
            (Some(acc), false) => kl_divergence(&Pmf::normalized(emp)?, &targets[k])?.map(|v| acc + v),
            _ => None,
        };
    }
    let cells: usize = tally.steps.iter().map(|s| s.cells).sum();
    let active: usize = tally.steps.iter().map(|s| s.active).sum();
    let corrected: usize = tally.steps.iter().map(|s| s.corrected).sum();
    let jumps: usize = tally.steps.iter().map(|s| s.jumps).sum();
    Ok(SimulationMetrics {
        nfe: steps,
        corrector: config.corrector,
        trials,
        tv_to_target: per_codebook_tv.iter().sum::<f64>() / c as f64,
        per_codebook_tv,
        kl_to_target: kl_sum.map(|v| v / c as f64),
        unresolved_rate: tally.unresolved.iter().sum::<u64>() as f64 / (total * c as f64),
        per_step_speed: step_speeds(&config.paths, steps)?,
        moment_residuals: tally.steps.iter().map(|s| s.max_residual).collect(),
        corrector_used_rate: if active > 0 { corrected as f64 / active as f64 } else { 0.0 },
        jump_rate: if cells > 0 { jumps as f64 / cells as f64 } else { 0.0 },
    })
}

/// One simulation per step count, all with the seed of `base`.
pub fn run_nfe_sweep(base: &SamplerConfig, oracle: &ExactOracle, prompt: &[usize], nfes: &[usize], trials: u64) -> Result<Vec<SimulationMetrics>> {
    if nfes.is_empty() {
        return Err(invalid("need at least one step count"));
    }
    nfes.iter().map(|&k| simulate(&SamplerConfig { steps: k, ..base.clone() }, oracle, prompt, trials)).collect()
}

/// One CSV row per (NFE, corrector) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nfe: usize,
    pub corrector: bool,
    pub trials: u64,
    pub tv_to_target: f64,
    pub kl_to_target: Option<f64>,
    pub corrector_used_rate: f64,
    pub jump_rate: f64,
    pub max_moment_residual: f64,
}

impl From<&SimulationMetrics> for SweepRow {
    fn from(m: &SimulationMetrics) -> Self {
        Self {
            nfe: m.nfe,
            corrector: m.corrector,
            trials: m.trials,
            tv_to_target: m.tv_to_target,
            kl_to_target: m.kl_to_target,
            corrector_used_rate: m.corrector_used_rate,
            jump_rate: m.jump_rate,
            max_moment_residual: m.moment_residuals.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

pub fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output of every CLI command that produces a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    /// Full effective configuration, including the seed.
    pub config: Value,
    pub runs: Vec<SimulationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<CheckResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<SpeedProfile>,
    pub timestamps: Timestamps,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        to_tagged_json(REPORT_FORMAT, self)
    }
}

/// Squared Euclidean distances between `s` random points of dimension `dim`
/// in the unit cube, one matrix per codebook.
pub fn random_distance_set(s: usize, codebooks: usize, dim: usize, seed: u64) -> Result<DistanceSet> {
    let key = StreamKey::new(seed, Purpose::Diagnostic);
    let mats = (0..codebooks)
        .map(|c| {
            let mut rng = key.cell(0, c).stream();
            let points: Vec<Vec<f64>> = (0..s).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
            DistanceMatrix::from_embeddings(&points, false)
        })
        .collect::<Result<_>>()?;
    DistanceSet::new(mats)
}

/// Joint pmf over `[s]^n` with weights uniform in `[0.05, 1]`.
pub fn seeded_joint_target(s: usize, n: usize, seed: u64) -> Result<Pmf> {
    let size = s.checked_pow(n as u32).ok_or_else(|| invalid("joint support too large"))?;
    let mut rng = StreamKey::new(seed, Purpose::Diagnostic).cell(1, 0).stream();
    Pmf::normalized((0..size).map(|_| rng.gen_range(0.05..1.0)).collect())
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

fn sup_error(f: impl Fn(f64) -> Result<f64>, g: impl Fn(f64) -> f64, n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for j in 0..=n {
        let t = j as f64 / n as f64;
        worst = worst.max((f(t)? - g(t)).abs());
    }
    Ok(worst)
}

/// Fast oracle and consistency checks over small fixtures.
pub fn verify_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let binary = DistanceSet::single(DistanceMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0])?);
    let beta = find_beta_max(&binary, DEFAULT_EPS, 1.0)?;
    out.push(check("beta-max-binary", (beta - 18.420_680_733_952_2).abs() <= 1e-4, format!("beta_max = {beta}")));

    let p1 = 0.25;
    let kappa_max = 0.99;
    let table = build_ko_schedule_generic(|k| fisher_information_mixture(p1, k).unwrap_or(f64::NAN), kappa_max, 4096, 1024, DEFAULT_EPS)?;
    let a0 = p1.sqrt().asin();
    let a1 = (p1 + (1.0 - p1) * kappa_max).sqrt().asin();
    let analytic = |t: f64| ((a0 + t * (a1 - a0)).sin().powi(2) - p1) / (1.0 - p1);
    let err = sup_error(|t| table.interp(t).map(|v| v.0), analytic, 2000)?;
    out.push(check("mixture-ko-recovery", err <= 1e-3, format!("sup error {err:.3e}")));

    let (k, _) = closed_form_mixture_ko(0.25, 0.5)?;
    let (m, _) = named_kappa(NamedKappa::SinSq, 0.5)?;
    let (p2, _) = named_kappa(NamedKappa::Power2, 0.5)?;
    let (sn, _) = named_kappa(NamedKappa::Sine, 0.5)?;
    let spot = (k - 2.0 / 3.0).abs().max((m - 0.5).abs()).max((p2 - 0.25).abs()).max((sn - 0.5f64.sqrt()).abs());
    out.push(check("closed-form-spot-values", spot <= 1e-12, format!("max error {spot:.3e}")));

    let mut rng = StreamKey::new(1, Purpose::Diagnostic).stream();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.gen_range(0.0..0.999);
        let b: f64 = rng.gen_range(a..=1.0);
        let exact = mixture_exact_jump_prob(a, b)?;
        let c = corrected_jump_prob_generic(&mixture_indicator_inputs(a, b)?, 0.0)?;
        worst = worst.max((c.rho - exact).abs());
    }
    out.push(check("mixture-corrector-exact", worst <= 1e-14, format!("max error {worst:.3e}")));

    let ds = random_distance_set(6, 1, 3, 11)?;
    let beta_max = find_beta_max(&ds, DEFAULT_EPS, 1.0)?;
    let ko = build_ko_schedule_metric(&ds, 4096, 1024, beta_max, DEFAULT_EPS, Averaging::Shared)?;
    let profile = speed_diagnostic(ko.table_for(0), &ds, 257)?;
    out.push(check("ko-constant-speed", profile.relative_std <= 0.05, format!("relative std {:.3e}", profile.relative_std)));

    let d = ds.get(0);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let x1 = rng.gen_range(0..d.size());
        let z = rng.gen_range(0..d.size());
        let t = rng.gen_range(0.0..0.99);
        let h = rng.gen_range(0.0..(1.0 - t));
        let (b, bd) = ko.table_for(0).interp(t)?;
        let (bh, _) = ko.table_for(0).interp(t + h)?;
        let jd = metric_jump_decomposition(d, b, bd, z, x1)?;
        let c = corrected_jump_prob_metric(d, b, bh, z, x1, &jd, 0.0)?;
        if c.corrected {
            if let Some(inputs) = metric_correction_inputs(d, b, bd, bh, z, x1, &jd)? {
                worst = worst.max(moment_residual(&inputs, c.rho).abs());
            }
        }
    }
    out.push(check("metric-moment-residual", worst <= 1e-12, format!("max residual {worst:.3e}")));

    let metric = ConditionalPath::new(PathFamily::metric(d.clone()), SchedulerSpec::heuristic(5.0, 1.0, beta_max)?)?;
    let mixture = ConditionalPath::new(PathFamily::uniform_mixture(5)?, SchedulerSpec::ClosedMixtureKo { p1: None })?;
    let mut worst: f64 = 0.0;
    for path in [&metric, &mixture] {
        for j in 1..=20 {
            let t = j as f64 / 21.0;
            for x1 in 0..path.target_count() {
                worst = worst.max(kolmogorov_residual(path, x1, t, 1e-4)?);
            }
        }
    }
    out.push(check("kolmogorov-consistency", worst <= 1e-5, format!("sup residual {worst:.3e}")));

    let reference = forward_equation_reference(&mixture, 2, 0.0, 0.5, 5000)?;
    let want = mixture.marginal(0.5, 2)?;
    let gap = tv_distance(&reference, &want)?;
    out.push(check("forward-reference-mixture", gap <= 1e-8, format!("tv {gap:.3e}")));

    Ok(out)
}
