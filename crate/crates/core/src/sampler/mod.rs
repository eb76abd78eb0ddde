//! Multi-position, multi-codebook CTMC inference.
//!
//! Each step, every (target position, codebook) cell independently
//!
//! 1. samples a clean-token estimate `x1_hat` from the temperature-scaled
//!    posterior by Gumbel-max,
//! 2. forms the jump intensity and destination of the conditional velocity
//!    towards `x1_hat`,
//! 3. computes the jump probability, first-order or moment-corrected,
//! 4. jumps to a destination draw with that probability.
//!
//! Prompt positions never change. All draws of a cell in a step come from
//! one keyed stream, so runs are reproducible under any thread count.

mod posterior;

pub use posterior::{exact_posterior, ExactOracle, LogitsEntry, LogitsTable, PosteriorProvider, TargetDistribution, ENUMERATION_BUDGET};

use rand::distributions::Open01;
use rand::Rng;

use crate::ctmc::{
    base_jump_prob, corrected_jump_prob_generic, corrected_jump_prob_metric, metric_correction_inputs,
    metric_jump_decomposition, mixture_indicator_inputs, mixture_jump_decomposition, moment_residual, Correction,
    JumpDecomposition,
};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::geometry::{check_token, PathFamily, Pmf};
use crate::path::ConditionalPath;
use crate::rng::{Purpose, StreamKey};

/// Default number of steps (function evaluations).
pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.6;

/// Tokens of an `N x C` sequence, stored position-major, with a frozen prefix
/// of `prompt_len` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    tokens: Vec<usize>,
    codebooks: usize,
    prompt_len: usize,
    time: f64,
}

impl SequenceState {
    pub fn new(tokens: Vec<usize>, codebooks: usize, prompt_len: usize, time: f64) -> Result<Self> {
        if codebooks == 0 {
            return Err(invalid("need at least one codebook"));
        }
        if !tokens.len().is_multiple_of(codebooks) {
            return Err(invalid(format!("{} tokens do not split into {codebooks} codebooks", tokens.len())));
        }
        if prompt_len > tokens.len() / codebooks {
            return Err(invalid("prompt longer than the sequence"));
        }
        if !(0.0..=1.0).contains(&time) {
            return Err(invalid(format!("time must lie in [0, 1], got {time}")));
        }
        Ok(Self { tokens, codebooks, prompt_len, time })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.codebooks
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, position: usize, codebook: usize) -> usize {
        self.tokens[position * self.codebooks + codebook]
    }

    /// Target-region tokens, position-major.
    pub fn target_tokens(&self) -> &[usize] {
        &self.tokens[self.prompt_len * self.codebooks..]
    }

    /// Target-region tokens of one codebook.
    pub fn codebook_targets(&self, codebook: usize) -> Vec<usize> {
        (self.prompt_len..self.len()).map(|i| self.get(i, codebook)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub temperature: f64,
    pub corrector: bool,
    pub seed: u64,
    /// One conditional path per codebook.
    pub paths: Vec<ConditionalPath>,
}

impl SamplerConfig {
    pub fn new(paths: Vec<ConditionalPath>, seed: u64) -> Self {
        Self { steps: DEFAULT_STEPS, temperature: DEFAULT_TEMPERATURE, corrector: true, seed, paths }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        ensure_finite("temperature", self.temperature)?;
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        let first = self.paths.first().ok_or_else(|| invalid("need one path per codebook"))?;
        if let Some(p) = self.paths.iter().find(|p| p.state_count() != first.state_count() || p.target_count() != first.target_count()) {
            return Err(Error::SizeMismatch { expected: first.state_count(), actual: p.state_count() });
        }
        Ok(())
    }

    pub fn codebooks(&self) -> usize {
        self.paths.len()
    }

    pub fn vocab(&self) -> usize {
        self.paths.first().map_or(0, ConditionalPath::target_count)
    }
}

/// Divides log-weights by `tau`.
pub fn apply_temperature(log_weights: &[f64], tau: f64) -> Result<Vec<f64>> {
    ensure_finite("temperature", tau)?;
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if tau == 1.0 {
        return Ok(log_weights.to_vec());
    }
    Ok(log_weights.iter().map(|w| w / tau).collect())
}

/// `argmax_x (w_x + g_x)` with independent standard Gumbel `g_x`; a draw from
/// `softmax(w)`. Ties go to the lowest index.
pub fn gumbel_max_sample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (x, &w) in log_weights.iter().enumerate() {
        if w.is_nan() || w == f64::INFINITY {
            return Err(invalid(format!("log weight {w} at index {x}")));
        }
        let u: f64 = rng.sample(Open01);
        if w == f64::NEG_INFINITY {
            continue;
        }
        let score = w - (-u.ln()).ln();
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((x, score));
        }
    }
    best.map(|(x, _)| x).ok_or_else(|| invalid("all log weights are -inf"))
}

/// Draw from a pmf by Gumbel-max over its log-probabilities.
pub fn sample_pmf<R: Rng + ?Sized>(p: &Pmf, rng: &mut R) -> Result<usize> {
    let lw: Vec<f64> = p.probs().iter().map(|v| v.ln()).collect();
    gumbel_max_sample(&lw, rng)
}

/// Per-step diagnostics summed over the cells of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Cells updated.
    pub cells: usize,
    /// Cells with a positive jump intensity.
    pub active: usize,
    pub jumps: usize,
    /// Cells whose jump probability came from the moment correction.
    pub corrected: usize,
    /// Largest `|residual|` of the moment condition over corrected cells.
    pub max_residual: f64,
}

impl StepStats {
    pub fn merge(&mut self, other: &StepStats) {
        self.cells += other.cells;
        self.active += other.active;
        self.jumps += other.jumps;
        self.corrected += other.corrected;
        self.max_residual = self.max_residual.max(other.max_residual);
    }
}

struct CellOutcome {
    token: usize,
    active: bool,
    jumped: bool,
    corrected: bool,
    residual: Option<f64>,
}

fn jump_decomposition(path: &ConditionalPath, t: f64, z: usize, x1_hat: usize) -> Result<(JumpDecomposition, f64, f64)> {
    let (param, rate) = path.parameter(t, x1_hat)?;
    let jd = match path.family() {
        PathFamily::MetricInduced { distances } => metric_jump_decomposition(distances, param, rate, z, x1_hat)?,
        PathFamily::Mixture { mask, .. } => {
            // Conditional on x1_hat only mixture states with p_t(z | x1_hat) > 0
            // move; with a mask source that is the mask itself.
            let frozen = mask.is_some_and(|m| z != m) || param >= 1.0;
            if frozen {
                JumpDecomposition { lambda: 0.0, destination: None }
            } else {
                mixture_jump_decomposition(param, rate, &Pmf::delta(path.state_count(), x1_hat)?, z)?
            }
        }
    };
    Ok((jd, param, rate))
}

#[allow(clippy::too_many_arguments)]
fn cell_step<R: Rng + ?Sized>(
    path: &ConditionalPath,
    posterior: &Pmf,
    z: usize,
    t: f64,
    t_next: f64,
    corrector: bool,
    temperature: f64,
    rng: &mut R,
) -> Result<CellOutcome> {
    let log_post: Vec<f64> = posterior.probs().iter().map(|p| p.ln()).collect();
    let x1_hat = gumbel_max_sample(&apply_temperature(&log_post, temperature)?, rng)?;
    let (jd, param, rate) = jump_decomposition(path, t, z, x1_hat)?;
    let h = t_next - t;
    let rho_base = base_jump_prob(jd.lambda, h);
    let mut correction = Correction { rho: rho_base, corrected: false };
    let mut residual = None;
    if corrector && jd.lambda > 0.0 {
        let (param_next, _) = path.parameter(t_next, x1_hat)?;
        match path.family() {
            PathFamily::MetricInduced { distances } => {
                correction = corrected_jump_prob_metric(distances, param, param_next, z, x1_hat, &jd, rho_base)?;
                if correction.corrected {
                    residual = metric_correction_inputs(distances, param, rate, param_next, z, x1_hat, &jd)?
                        .map(|inputs| moment_residual(&inputs, correction.rho));
                }
            }
            PathFamily::Mixture { .. } => {
                let inputs = mixture_indicator_inputs(param, param_next.min(1.0))?;
                correction = corrected_jump_prob_generic(&inputs, rho_base)?;
                if correction.corrected {
                    residual = Some(moment_residual(&inputs, correction.rho));
                }
            }
        }
    }
    let u: f64 = rng.sample(Open01);
    let mut token = z;
    let mut jumped = false;
    if let Some(pi) = jd.destination.as_ref().filter(|_| jd.lambda > 0.0 && u <= correction.rho) {
        token = sample_pmf(pi, rng)?;
        jumped = true;
    }
    Ok(CellOutcome { token, active: jd.lambda > 0.0, jumped, corrected: correction.corrected, residual })
}

/// Advances every target cell from `state.time()` to `state.time() + h`.
pub fn inference_step(
    state: &SequenceState,
    h: f64,
    config: &SamplerConfig,
    provider: &dyn PosteriorProvider,
    trial: u64,
    step: u64,
) -> Result<(SequenceState, StepStats)> {
    let t = state.time();
    let t_next = t + h;
    if !(h >= 0.0) || t_next > 1.0 + 1e-12 {
        return Err(invalid(format!("step [{t}, {t_next}] leaves [0, 1]")));
    }
    let t_next = t_next.min(1.0);
    if state.codebooks() != config.codebooks() {
        return Err(Error::SizeMismatch { expected: config.codebooks(), actual: state.codebooks() });
    }
    let mut next = state.clone();
    let mut stats = StepStats::default();
    if state.len() == state.prompt_len() {
        next.time = t_next;
        return Ok((next, stats));
    }
    let key = StreamKey::new(config.seed, Purpose::Step).trial(trial).step(step);
    for (c, path) in config.paths.iter().enumerate() {
        let targets = state.codebook_targets(c);
        let posteriors = provider.posteriors(c, &targets, t, path)?;
        if posteriors.len() != targets.len() {
            return Err(Error::SizeMismatch { expected: targets.len(), actual: posteriors.len() });
        }
        for (offset, (post, &z)) in posteriors.iter().zip(&targets).enumerate() {
            let position = state.prompt_len() + offset;
            let mut rng = key.cell(position, c).stream();
            let out = cell_step(path, post, z, t, t_next, config.corrector, config.temperature, &mut rng)?;
            next.tokens[position * state.codebooks() + c] = out.token;
            stats.cells += 1;
            stats.active += out.active as usize;
            stats.jumps += out.jumped as usize;
            stats.corrected += out.corrected as usize;
            if let Some(r) = out.residual {
                stats.max_residual = stats.max_residual.max(r.abs());
            }
        }
    }
    next.time = t_next;
    Ok((next, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Time at the end of the step.
    pub time: f64,
    pub stats: StepStats,
    /// Target-region tokens after the step, when requested.
    pub tokens: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Final target-region tokens, position-major.
    pub tokens: Vec<usize>,
    pub trace: Vec<StepRecord>,
}

/// Initial target tokens drawn from each codebook's source distribution.
pub fn initial_tokens(config: &SamplerConfig, prompt_len: usize, target_len: usize, trial: u64) -> Result<Vec<usize>> {
    let sources: Vec<Pmf> = config.paths.iter().map(ConditionalPath::source).collect();
    let key = StreamKey::new(config.seed, Purpose::Init).trial(trial);
    let mut out = Vec::with_capacity(target_len * sources.len());
    for i in 0..target_len {
        for (c, source) in sources.iter().enumerate() {
            out.push(sample_pmf(source, &mut key.cell(prompt_len + i, c).stream())?);
        }
    }
    Ok(out)
}

/// Runs `config.steps` steps on the uniform grid `t_k = k / K` from source
/// tokens. `prompt` holds `prompt_len x C` tokens, position-major.
pub fn run_inference(
    config: &SamplerConfig,
    provider: &dyn PosteriorProvider,
    prompt: &[usize],
    target_len: usize,
    trial: u64,
    keep_tokens: bool,
) -> Result<InferenceOutput> {
    config.validate()?;
    let c = config.codebooks();
    if !prompt.len().is_multiple_of(c) {
        return Err(invalid(format!("{} prompt tokens do not split into {c} codebooks", prompt.len())));
    }
    for &x in prompt {
        check_token(x, config.vocab())?;
    }
    if target_len == 0 {
        return Ok(InferenceOutput { tokens: Vec::new(), trace: Vec::new() });
    }
    let prompt_len = prompt.len() / c;
    let mut tokens = prompt.to_vec();
    tokens.extend(initial_tokens(config, prompt_len, target_len, trial)?);
    let mut state = SequenceState::new(tokens, c, prompt_len, 0.0)?;
    let k = config.steps;
    let mut trace = Vec::with_capacity(k);
    for step in 0..k {
        let t = step as f64 / k as f64;
        let t_next = (step + 1) as f64 / k as f64;
        state.time = t;
        let (next, stats) = inference_step(&state, t_next - t, config, provider, trial, step as u64)?;
        state = next;
        trace.push(StepRecord { time: t_next, stats, tokens: keep_tokens.then(|| state.target_tokens().to_vec()) });
    }
    Ok(InferenceOutput { tokens: state.target_tokens().to_vec(), trace })
}
