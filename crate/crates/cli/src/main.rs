//! `dfmk` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfmk::forward::{build_prediction_mask, sample_corruption};
use dfmk::harness::{self, Report, SimulationMetrics, SweepRow, Timestamps};
use dfmk::io::{self, TokensFile};
use dfmk::sampler::{ExactOracle, LogitsTable, PosteriorProvider, SamplerConfig, DEFAULT_STEPS, DEFAULT_TEMPERATURE};
use dfmk::scheduler::{self, DEFAULT_BETA_INIT, DEFAULT_EPS, DEFAULT_GRID_SIZE, DEFAULT_TABLE_POINTS};
use dfmk::{Averaging, ConditionalPath, DistanceSet, KoSchedule, NamedKappa, PathFamily, SchedulerSpec, TableKind};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dfmk", version, about = "Kinetic-optimal schedules and CTMC sampling for discrete flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build kinetic-optimal inverse-temperature tables from a distance set.
    BuildSchedule(BuildArgs),
    /// Print a schedule's metadata and optionally check its speed profile.
    InspectSchedule(InspectArgs),
    /// Monte Carlo simulation of the sampler against a known target.
    Simulate(SimulateArgs),
    /// One simulation per NFE value, written as CSV.
    Sweep(SweepArgs),
    /// Forward-corrupt clean tokens to time t.
    Corrupt(CorruptArgs),
    /// Run the built-in oracle checks; exits nonzero on any failure.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct GeometryArgs {
    /// Distance matrices (JSON or binary container).
    #[arg(long, conflicts_with = "embeddings")]
    distances: Option<PathBuf>,
    /// Token embeddings (JSON or binary container); distances are squared Euclidean.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// L2-normalize embeddings before computing distances.
    #[arg(long, requires = "embeddings")]
    normalize: bool,
}

impl GeometryArgs {
    fn load(&self) -> Result<Option<DistanceSet>> {
        match (&self.distances, &self.embeddings) {
            (Some(d), _) => Ok(Some(io::load_distances(d).with_context(|| format!("loading {}", d.display()))?)),
            (None, Some(e)) => {
                let emb = io::load_embeddings(e).with_context(|| format!("loading {}", e.display()))?;
                Ok(Some(io::distances_from_embeddings(&emb, self.normalize)?))
            }
            (None, None) => Ok(None),
        }
    }

    fn require(&self) -> Result<DistanceSet> {
        self.load()?.ok_or_else(|| anyhow!("this command needs --distances or --embeddings"))
    }

    fn echo(&self) -> Value {
        json!({ "distances": self.distances, "embeddings": self.embeddings, "normalize": self.normalize })
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Size of the uniform inverse-temperature grid.
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    /// Number of table time points.
    #[arg(long, default_value_t = DEFAULT_TABLE_POINTS)]
    points: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_INIT)]
    beta_init: f64,
    /// One table per codebook instead of a shared one.
    #[arg(long)]
    per_codebook: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Finite-difference Fisher–Rao speed profile; needs the distances.
    #[arg(long)]
    speed_check: bool,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathKind {
    Metric,
    Mixture,
    Mask,
}

impl PathKind {
    fn name(self) -> &'static str {
        match self {
            PathKind::Metric => "metric",
            PathKind::Mixture => "mixture",
            PathKind::Mask => "mask",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum SchedulerChoice {
    NumericalKo,
    ClosedKo,
    Heuristic { a: f64, c: f64 },
    Named(NamedKappa),
}

impl FromStr for SchedulerChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "numerical-ko" => return Ok(SchedulerChoice::NumericalKo),
            "closed-ko" => return Ok(SchedulerChoice::ClosedKo),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("heuristic") {
            let (mut a, mut c) = (5.0, 1.0);
            for part in rest.trim_start_matches(':').split(',').filter(|p| !p.is_empty()) {
                let (key, value) = part.split_once('=').ok_or_else(|| format!("expected key=value, got '{part}'"))?;
                let value: f64 = value.parse().map_err(|e| format!("bad value for {key}: {e}"))?;
                match key {
                    "a" => a = value,
                    "c" => c = value,
                    other => return Err(format!("unknown heuristic parameter '{other}'")),
                }
            }
            return Ok(SchedulerChoice::Heuristic { a, c });
        }
        NamedKappa::from_str(s).map(SchedulerChoice::Named).map_err(|e| e.to_string())
    }
}

impl std::fmt::Display for SchedulerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchedulerChoice::NumericalKo => f.write_str("numerical-ko"),
            SchedulerChoice::ClosedKo => f.write_str("closed-ko"),
            SchedulerChoice::Heuristic { a, c } => write!(f, "heuristic:a={a},c={c}"),
            SchedulerChoice::Named(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Args, Clone)]
struct SimArgs {
    /// Scheduler table from build-schedule.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, value_enum, default_value_t = PathKind::Metric)]
    path: PathKind,
    /// numerical-ko | closed-ko | heuristic:a=5,c=1 | t2 | sin | sinsq | linear
    #[arg(long, default_value = "numerical-ko")]
    scheduler: SchedulerChoice,
    /// Known target distribution.
    #[arg(long)]
    target: PathBuf,
    /// Prompt tokens; empty if absent.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Serve posteriors from a logits file instead of the exact oracle.
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_corrector: bool,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Endpoint tolerance used when a heuristic cap must be computed.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: SimArgs,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    nfe: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
    nfe: Vec<usize>,
    /// Run every NFE with and without the corrector.
    #[arg(long)]
    paired: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    schedule: PathBuf,
    /// Clean tokens.
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    t: f64,
    /// Fraction of leading positions kept as prompt.
    #[arg(long, default_value_t = 0.0)]
    prompt_ratio: f64,
    /// Allow prompt ratios above 0.3.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the independent draw for this seed.
    #[arg(long, default_value_t = 0)]
    sample: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    report: Option<PathBuf>,
}

fn write_report(path: Option<&Path>, report: &Report) -> Result<()> {
    if let Some(path) = path {
        io::write_atomic(path, report.to_json()?.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn report(command: &str, config: Value, started: u64) -> Report {
    Report {
        command: command.into(),
        config,
        runs: Vec::new(),
        checks: None,
        speed: None,
        timestamps: Timestamps { started, finished: harness::unix_seconds() },
    }
}

fn build_schedule(args: &BuildArgs) -> Result<()> {
    let started = harness::unix_seconds();
    let ds = args.geometry.require()?;
    let beta_max = scheduler::find_beta_max(&ds, args.eps, args.beta_init)?;
    let averaging = if args.per_codebook { Averaging::PerCodebook } else { Averaging::Shared };
    let ko = scheduler::build_ko_schedule_metric(&ds, args.grid, args.points, beta_max, args.eps, averaging)?;
    io::save_schedule(&args.out, &ko)?;
    println!(
        "{} table(s), s = {}, C = {}, beta_max = {beta_max}, L = {}",
        ko.tables.len(),
        ds.vocab_size(),
        ds.num_codebooks(),
        ko.tables.iter().map(|t| format!("{:.6}", t.total_length)).collect::<Vec<_>>().join(", ")
    );
    let config = json!({
        "geometry": args.geometry.echo(),
        "eps": args.eps,
        "grid": args.grid,
        "points": args.points,
        "beta_init": args.beta_init,
        "averaging": averaging,
        "out": args.out,
        "beta_max": beta_max,
        "total_length": ko.tables.iter().map(|t| t.total_length).collect::<Vec<_>>(),
    });
    write_report(args.report.as_deref(), &report("build-schedule", config, started))
}

fn inspect_schedule(args: &InspectArgs) -> Result<()> {
    let started = harness::unix_seconds();
    let ko = io::load_schedule(&args.input)?;
    for (i, t) in ko.tables.iter().enumerate() {
        println!(
            "table {i}: kind {:?}, points {}, grid {}, eps {:e}, max {}, L = {:.6}",
            t.kind,
            t.len(),
            t.meta.grid_size,
            t.meta.tolerance,
            t.param_max,
            t.total_length
        );
    }
    let mut out = report("inspect-schedule", Value::Null, started);
    if args.speed_check {
        let ds = args.geometry.require().context("--speed-check")?;
        let mut profiles = Vec::new();
        for c in 0..ko.tables.len() {
            let table = ko.table_for(c);
            if table.kind != TableKind::MetricKo {
                bail!("speed check needs inverse-temperature tables");
            }
            let profile = match ko.averaging {
                Averaging::Shared => harness::speed_diagnostic(table, &ds, args.samples)?,
                Averaging::PerCodebook => {
                    let d = ds.codebooks().get(c).ok_or_else(|| anyhow!("no distances for codebook {c}"))?;
                    harness::speed_diagnostic(table, &DistanceSet::single(d.clone()), args.samples)?
                }
            };
            println!(
                "table {c}: mean speed {:.6}, relative std {:.4} over {} interior points",
                profile.mean,
                profile.relative_std,
                profile.times.len()
            );
            profiles.push(profile);
        }
        out.speed = profiles.into_iter().next();
    }
    out.config = json!({
        "in": args.input,
        "speed_check": args.speed_check,
        "samples": args.samples,
        "geometry": args.geometry.echo(),
    });
    out.timestamps.finished = harness::unix_seconds();
    write_report(args.report.as_deref(), &out)
}

/// Paths, providers and the echoed configuration of a simulate or sweep run.
struct Prepared {
    base: SamplerConfig,
    oracle: ExactOracle,
    logits: Option<LogitsTable>,
    prompt: Vec<usize>,
    echo: Value,
}

impl Prepared {
    fn provider(&self) -> &dyn PosteriorProvider {
        match &self.logits {
            Some(l) => l,
            None => &self.oracle,
        }
    }

    fn run(&self, steps: usize, corrector: bool, trials: u64) -> Result<SimulationMetrics> {
        let config = SamplerConfig { steps, corrector, ..self.base.clone() };
        Ok(harness::simulate_with(&config, self.provider(), &self.oracle, &self.prompt, trials)?)
    }
}

fn load_table_schedule(args: &SimArgs) -> Result<Option<KoSchedule>> {
    args.schedule.as_deref().map(|p| io::load_schedule(p).with_context(|| format!("loading {}", p.display()))).transpose()
}

fn prepare(args: &SimArgs) -> Result<Prepared> {
    let target = io::load_target(&args.target).with_context(|| format!("loading {}", args.target.display()))?;
    let c = target.codebooks.len();
    let s = target.vocab;
    let schedule = load_table_schedule(args)?;
    let mut resolved = json!({});

    let table_spec = |codebook: usize, kind: TableKind| -> Result<SchedulerSpec> {
        let ko = schedule.as_ref().ok_or_else(|| anyhow!("--scheduler numerical-ko needs --schedule"))?;
        let table = ko.tables.get(if ko.averaging == Averaging::Shared { 0 } else { codebook }).ok_or_else(|| {
            anyhow!("schedule has {} tables, codebook {codebook} requested", ko.tables.len())
        })?;
        if table.kind != kind {
            bail!("schedule table kind {:?} does not fit a {} path", table.kind, args.path.name());
        }
        Ok(SchedulerSpec::NumericalKo { table: table.clone() })
    };

    let paths: Vec<ConditionalPath> = match args.path {
        PathKind::Metric => {
            let ds = args.geometry.require()?;
            if ds.num_codebooks() != c || ds.vocab_size() != s {
                bail!(
                    "distances have C = {}, s = {} but the target has C = {c}, s = {s}",
                    ds.num_codebooks(),
                    ds.vocab_size()
                );
            }
            let cap = match (&args.scheduler, &schedule) {
                (SchedulerChoice::Heuristic { .. }, Some(ko)) => Some(ko.tables[0].param_max),
                (SchedulerChoice::Heuristic { .. }, None) => Some(scheduler::find_beta_max(&ds, args.eps, DEFAULT_BETA_INIT)?),
                _ => None,
            };
            if let Some(cap) = cap {
                resolved["heuristic_cap"] = json!(cap);
            }
            ds.codebooks()
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let spec = match &args.scheduler {
                        SchedulerChoice::NumericalKo => table_spec(k, TableKind::MetricKo)?,
                        SchedulerChoice::Heuristic { a, c } => SchedulerSpec::heuristic(*a, *c, cap.expect("cap set above"))?,
                        other => bail!("scheduler {other} does not drive an inverse temperature"),
                    };
                    Ok(ConditionalPath::new(PathFamily::metric(d.clone()), spec)?)
                })
                .collect::<Result<_>>()?
        }
        PathKind::Mixture | PathKind::Mask => {
            let family = if args.path == PathKind::Mask { PathFamily::masked(s)? } else { PathFamily::uniform_mixture(s)? };
            (0..c)
                .map(|k| {
                    let spec = match &args.scheduler {
                        SchedulerChoice::NumericalKo => table_spec(k, TableKind::GenericKo)?,
                        SchedulerChoice::ClosedKo if args.path == PathKind::Mask => SchedulerSpec::MaskKo,
                        SchedulerChoice::ClosedKo => SchedulerSpec::ClosedMixtureKo { p1: None },
                        SchedulerChoice::Named(kind) => SchedulerSpec::Named { kind: *kind },
                        other => bail!("scheduler {other} is not a mixture scheduler"),
                    };
                    Ok(ConditionalPath::new(family.clone(), spec)?)
                })
                .collect::<Result<_>>()?
        }
    };

    let prompt = match &args.prompt {
        Some(p) => {
            let tokens = io::load_tokens(p)?;
            if !tokens.tokens.is_empty() && tokens.codebooks() != c {
                bail!("prompt has {} codebooks, target has {c}", tokens.codebooks());
            }
            tokens.flat()?
        }
        None => Vec::new(),
    };
    let logits = args.logits.as_deref().map(io::load_logits).transpose()?;
    let oracle = ExactOracle::new(target.length, s, target.codebooks)?;
    let mut base = SamplerConfig::new(paths, args.seed);
    base.temperature = args.temperature;
    base.corrector = !args.no_corrector;

    if let Some(ko) = &schedule {
        let t = &ko.tables[0];
        resolved["schedule_meta"] = json!({
            "tables": ko.tables.len(),
            "averaging": ko.averaging,
            "points": t.len(),
            "grid": t.meta.grid_size,
            "eps": t.meta.tolerance,
            "param_max": t.param_max,
            "total_length": ko.tables.iter().map(|t| t.total_length).collect::<Vec<_>>(),
        });
    }
    let echo = json!({
        "schedule": args.schedule,
        "geometry": args.geometry.echo(),
        "path": args.path.name(),
        "scheduler": args.scheduler.to_string(),
        "target": args.target,
        "prompt": args.prompt,
        "logits": args.logits,
        "temperature": args.temperature,
        "seed": args.seed,
        "corrector": !args.no_corrector,
        "trials": args.trials,
        "eps": args.eps,
        "codebooks": c,
        "vocab": s,
        "length": oracle.length(),
        "prompt_length": prompt.len() / c,
        "resolved": resolved,
    });
    Ok(Prepared { base, oracle, logits, prompt, echo })
}

fn print_metrics(m: &SimulationMetrics) {
    println!(
        "K = {:>3}  corrector {:<5}  TV {:.5}  KL {}  corrected {:.3}  jumps {:.3}  unresolved {:.4}",
        m.nfe,
        m.corrector,
        m.tv_to_target,
        m.kl_to_target.map_or("inf".into(), |v| format!("{v:.5}")),
        m.corrector_used_rate,
        m.jump_rate,
        m.unresolved_rate
    );
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let started = harness::unix_seconds();
    let prepared = prepare(&args.common)?;
    let metrics = prepared.run(args.nfe, prepared.base.corrector, args.common.trials)?;
    print_metrics(&metrics);
    let mut config = prepared.echo;
    config["nfe"] = json!(args.nfe);
    let mut out = report("simulate", config, started);
    out.runs.push(metrics);
    out.timestamps.finished = harness::unix_seconds();
    write_report(args.common.report.as_deref(), &out)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let started = harness::unix_seconds();
    if args.nfe.is_empty() {
        bail!("--nfe needs at least one value");
    }
    let prepared = prepare(&args.common)?;
    let settings: Vec<bool> = if args.paired { vec![true, false] } else { vec![prepared.base.corrector] };
    let mut runs = Vec::new();
    for &k in &args.nfe {
        for &corrector in &settings {
            let m = prepared.run(k, corrector, args.common.trials)?;
            print_metrics(&m);
            runs.push(m);
        }
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &runs {
            w.serialize(SweepRow::from(m))?;
        }
        io::write_atomic(path, &w.into_inner().map_err(|e| anyhow!("csv: {e}"))?)?;
    }
    let mut config = prepared.echo;
    config["nfe"] = json!(args.nfe);
    config["paired"] = json!(args.paired);
    config["csv"] = json!(args.csv);
    let mut out = report("sweep", config, started);
    out.runs = runs;
    out.timestamps.finished = harness::unix_seconds();
    write_report(args.common.report.as_deref(), &out)
}

fn corrupt(args: &CorruptArgs) -> Result<()> {
    let started = harness::unix_seconds();
    let ds = args.geometry.require()?;
    let ko = io::load_schedule(&args.schedule)?;
    let clean = io::load_tokens(&args.tokens)?;
    if clean.codebooks() != ds.num_codebooks() {
        bail!("tokens have {} codebooks, distances have {}", clean.codebooks(), ds.num_codebooks());
    }
    let mask = build_prediction_mask(clean.tokens.len(), args.prompt_ratio, !args.lenient)?;
    let noisy = sample_corruption(&clean.flat()?, args.t, &ko, &ds, &mask, args.seed, args.sample)?;
    io::save_tokens(&args.out, &TokensFile::from_flat(&noisy, ds.num_codebooks()))?;
    println!("{} positions ({} prompt) corrupted to t = {}", mask.len(), mask.prompt_count(), args.t);
    let config = json!({
        "geometry": args.geometry.echo(),
        "schedule": args.schedule,
        "tokens": args.tokens,
        "t": args.t,
        "prompt_ratio": args.prompt_ratio,
        "prompt_count": mask.prompt_count(),
        "lenient": args.lenient,
        "seed": args.seed,
        "sample": args.sample,
        "out": args.out,
    });
    write_report(args.report.as_deref(), &report("corrupt", config, started))
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let started = harness::unix_seconds();
    let checks = harness::verify_suite()?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let ok = checks.iter().all(|c| c.passed);
    let mut out = report("verify", json!({}), started);
    out.checks = Some(checks);
    write_report(args.report.as_deref(), &out)?;
    Ok(ok)
}

/// Sizes the global rayon pool from `DFMK_THREADS`, if set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DFMK_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("DFMK_THREADS = {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::BuildSchedule(a) => build_schedule(a)?,
        Command::InspectSchedule(a) => inspect_schedule(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Corrupt(a) => corrupt(a)?,
        Command::Verify(a) => return verify(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
