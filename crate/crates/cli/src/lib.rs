//! Configuration, orchestration and output writing for the `bhp-lab`
//! command-line tool.
//!
//! A run reads one JSON configuration, executes a subcommand and writes
//! `report.json`, `report.csv`, `manifest.json` and `timing.json` into the
//! output directory (plus TSV forests for `simulate` and `spine`). Every
//! file except `timing.json` depends only on the configuration and seed.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bhp_core::forest::{simulate_forest, SimOptions};
use bhp_core::model::{
    catalog_interval, catalog_ou, BranchingRate, GroundState, ModelSpec, Motion, OffspringLaw, PointMass,
    SpectralTriple, TestFunction,
};
use bhp_core::replicas::{default_workers, run_replicas};
use bhp_core::spectral::{
    self, chapman_kolmogorov_defect, grid_for, kernel_table, AiuVerdict, Finiteness, GridOptions, KernelSource,
};
use bhp_core::spine::simulate_spine_tree;
use bhp_core::stats::Estimate;
use bhp_core::verify::{
    Experiment, ExperimentReport, MartingaleParams, RunContext, SampleSize, SllnParams, SpineParams, Verdict,
    WllnParams,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable consulted when `--workers` is absent.
pub const WORKERS_ENV: &str = "BHP_LAB_WORKERS";
const MANIFEST_FORMAT: &str = "bhp-lab-manifest/1";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Usage(String),
    Core(bhp_core::Error),
    Io { path: PathBuf, source: io::Error },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bhp_core::Error> for CliError {
    fn from(e: bhp_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Model section: one of the two catalog models or a free specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Branching OU with `β(x) = b|x|² + a`.
    Ou {
        c: f64,
        b: f64,
        a: f64,
        #[serde(default = "one")]
        dim: usize,
        #[serde(default)]
        dt: Option<f64>,
    },
    /// Killed Brownian motion on `(0, length)` with rate `beta`.
    Interval {
        beta: f64,
        length: f64,
        #[serde(default)]
        point_mass: Option<PointMass>,
        #[serde(default)]
        dt: Option<f64>,
    },
    Custom {
        motion: Motion,
        rate: BranchingRate,
        offspring: OffspringLaw,
        dt: f64,
    },
}

fn one() -> usize {
    1
}

/// A validated model with the spectral data used by simulations.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub id: &'static str,
    pub spec: ModelSpec,
    pub spectral: SpectralTriple,
    /// Whether `spectral` is a closed form rather than a grid solution.
    pub exact: bool,
}

impl ModelConfig {
    pub fn build(&self, grid: &GridOptions) -> CliResult<BuiltModel> {
        let (id, spec, spectral) = match *self {
            ModelConfig::Ou { c, b, a, dim, dt } => {
                let (mut spec, tri) = catalog_ou(c, b, a, dim)?;
                if let Some(dt) = dt {
                    spec.dt = dt;
                }
                ("ou", spec, tri)
            }
            ModelConfig::Interval { beta, length, point_mass, dt } => {
                let (mut spec, tri) = catalog_interval(beta, length, point_mass)?;
                if let Some(dt) = dt {
                    spec.dt = dt;
                }
                ("interval", spec, tri)
            }
            ModelConfig::Custom { motion, rate, ref offspring, dt } => {
                let spec = ModelSpec { motion, rate, offspring: offspring.clone(), dt };
                spec.validate()?;
                let tri = spectral::grid_spectral_triple(&spec, grid)?;
                if tri.lambda1.is_nan() || tri.lambda1 >= 0.0 {
                    return Err(bhp_core::Error::Subcritical { lambda1: tri.lambda1 }.into());
                }
                ("custom", spec, tri)
            }
        };
        spec.validate()?;
        let exact = !matches!(spectral.h, GroundState::Grid(_));
        Ok(BuiltModel { id, spec, spectral, exact })
    }

    /// A natural starting point: the origin or the interval midpoint.
    pub fn center(&self) -> f64 {
        match self {
            ModelConfig::Ou { .. } => 0.0,
            ModelConfig::Interval { length, .. } => 0.5 * length,
            ModelConfig::Custom { motion: Motion::IntervalBm { length, .. }, .. } => 0.5 * length,
            ModelConfig::Custom { .. } => 0.0,
        }
    }

    /// `h·1_A` with `A` the left half of the interval or `[−1, 1]`.
    fn default_indicator(&self) -> TestFunction {
        match self {
            ModelConfig::Ou { .. } | ModelConfig::Custom { motion: Motion::Ou { .. }, .. } => {
                TestFunction::HIndicator { lo: -1.0, hi: 1.0 }
            }
            _ => TestFunction::HIndicator { lo: 0.0, hi: self.center() },
        }
    }
}

/// Acceptance tolerances of the `spectral` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralTolerances {
    pub lambda1: f64,
    pub gap: f64,
    /// Absolute sup error on a bounded domain, relative error on `[−3, 3]`
    /// for the OU model.
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    /// Interior grid nodes.
    #[serde(default)]
    pub n: Option<usize>,
    /// Half-width of the truncated line for unbounded motions.
    #[serde(default)]
    pub truncation: Option<f64>,
    /// Modes kept in a grid eigenbasis.
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "default_table_nodes")]
    pub table_nodes: usize,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_w_time")]
    pub w_time: f64,
    #[serde(default = "default_kernel_times")]
    pub kernel_times: Vec<f64>,
    #[serde(default)]
    pub tolerances: Option<SpectralTolerances>,
}

fn default_table_nodes() -> usize {
    201
}

fn default_t1() -> f64 {
    0.5
}

fn default_w_time() -> f64 {
    1.0
}

fn default_kernel_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            n: None,
            truncation: None,
            modes: None,
            table_nodes: default_table_nodes(),
            t1: default_t1(),
            w_time: default_w_time(),
            kernel_times: default_kernel_times(),
            tolerances: None,
        }
    }
}

impl SpectralConfig {
    pub fn grid_options(&self) -> GridOptions {
        let d = GridOptions::default();
        GridOptions {
            n: self.n.unwrap_or(d.n),
            truncation: self.truncation.or(d.truncation),
            modes: self.modes.unwrap_or(d.modes),
        }
    }
}

/// Parameters of `simulate` and `spine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub observe: Vec<f64>,
    #[serde(default)]
    pub record_paths: bool,
}

fn default_horizon() -> f64 {
    1.0
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { x: None, horizon: 1.0, replicas: 1, observe: Vec::new(), record_paths: false }
    }
}

/// Whole configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

/// Written next to every output; accepted back as `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub seed: u64,
    pub versions: Versions,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub bhp_lab: String,
    pub bhp_core: String,
}

/// A configuration, possibly recovered from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: Config,
    /// Command recorded in the manifest, if the document was one.
    pub recorded_command: Option<String>,
}

/// Parses a configuration or manifest document.
pub fn parse_config(text: &str) -> CliResult<Loaded> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if value.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        let m: Manifest = serde_json::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
        let mut config = m.config;
        config.seed = m.seed;
        return Ok(Loaded { config, recorded_command: Some(m.command) });
    }
    if value.as_object().is_some_and(|o| !o.contains_key("model")) {
        return Err(CliError::Config(
            "missing section `model` (expected e.g. {\"model\": {\"kind\": \"ou\", ...}})".into(),
        ));
    }
    let config: Config = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Loaded { config, recorded_command: None })
}

pub fn load_config(path: &Path) -> CliResult<Loaded> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Spectral,
    Simulate,
    Spine,
    Verify(String),
    Report(PathBuf),
}

impl Command {
    pub fn label(&self) -> String {
        match self {
            Command::Spectral => "spectral".into(),
            Command::Simulate => "simulate".into(),
            Command::Spine => "spine".into(),
            Command::Verify(e) => format!("verify {e}"),
            Command::Report(_) => "report".into(),
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Result of a run: the exit status and where outputs went.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub out_dir: Option<PathBuf>,
    pub verdict: Option<Verdict>,
    pub summary: String,
}

/// Document stored as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub command: String,
    pub report: ExperimentReport,
    #[serde(default)]
    pub details: Value,
}

fn workers_from_env() -> CliResult<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Runs `command` on a loaded configuration.
pub fn run(command: &Command, loaded: Option<Loaded>, ov: &Overrides) -> CliResult<Outcome> {
    if let Command::Report(dir) = command {
        return report_dir(dir);
    }
    let loaded = loaded.ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    if let Some(rec) = &loaded.recorded_command {
        if *rec != command.label() {
            return Err(CliError::Usage(format!("manifest was recorded for `{rec}`, not `{}`", command.label())));
        }
    }
    let mut config = loaded.config;
    if let Some(seed) = ov.seed {
        config.seed = seed;
    }
    let workers = match ov.workers {
        Some(w) => w,
        None => workers_from_env()?.or(config.workers).unwrap_or_else(default_workers),
    };
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    let out = ov
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `output`".into()))?;
    let started = Instant::now();
    let grid = config.spectral.grid_options();
    let model = config.model.build(&grid)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let doc = match command {
        Command::Spectral => spectral_command(&config, &model)?,
        Command::Simulate => simulate_command(&config, &model, workers, &out, false)?,
        Command::Spine => simulate_command(&config, &model, workers, &out, true)?,
        Command::Verify(name) => verify_command(name, &config, &model, workers)?,
        Command::Report(_) => unreachable!(),
    };
    let elapsed = started.elapsed().as_secs_f64();
    write_outputs(&out, command, &config, &doc, elapsed, workers)?;
    let verdict = doc.report.verdict;
    let code = if doc.report.acceptable() { 0 } else { 2 };
    Ok(Outcome { code, out_dir: Some(out), verdict: Some(verdict), summary: render_table(&[doc]) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_outputs(
    out: &Path,
    command: &Command,
    config: &Config,
    doc: &ReportDocument,
    elapsed: f64,
    workers: usize,
) -> CliResult<()> {
    write_json(&out.join("report.json"), doc)?;
    let mut csv = Vec::new();
    doc.report.write_csv(&mut csv, true).map_err(io_err(out))?;
    let path = out.join("report.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    // Nothing that varies between equivalent runs goes into the manifest.
    let mut echo = config.clone();
    echo.output = None;
    echo.workers = None;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        command: command.label(),
        seed: config.seed,
        versions: Versions { bhp_lab: env!("CARGO_PKG_VERSION").into(), bhp_core: bhp_core::VERSION.into() },
        config: echo,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("timing.json"), &serde_json::json!({ "seconds": elapsed, "workers": workers }))
}

fn default_tolerances(model: &BuiltModel) -> SpectralTolerances {
    match model.spec.motion {
        Motion::IntervalBm { .. } => SpectralTolerances { lambda1: 2e-3, gap: 5e-3, h: 1e-3 },
        Motion::Ou { .. } => SpectralTolerances { lambda1: 1e-2, gap: 2e-2, h: 1e-2 },
    }
}

/// Error of the grid ground state against the closed form on grid nodes.
pub fn ground_state_error(model: &BuiltModel, grid_h: &SpectralTriple, opts: &GridOptions) -> CliResult<f64> {
    let grid = grid_for(&model.spec, opts)?;
    let mut worst: f64 = 0.0;
    for &x in &grid.nodes {
        let exact = model.spectral.h(x);
        let approx = grid_h.h(x);
        let err = match model.spec.motion {
            Motion::IntervalBm { .. } => (approx - exact).abs(),
            Motion::Ou { .. } if x.abs() <= 3.0 => (approx / exact - 1.0).abs(),
            Motion::Ou { .. } => 0.0,
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn spectral_command(config: &Config, model: &BuiltModel) -> CliResult<ReportDocument> {
    let sc = &config.spectral;
    let opts = sc.grid_options();
    let ctx = RunContext { seed: config.seed, workers: 1, z: 3.0 };
    let mut rep = ExperimentReport::new("spectral", model.id, &ctx);
    let tol = sc.tolerances.unwrap_or_else(|| default_tolerances(model));

    let grid_tri = spectral::grid_spectral_triple(&model.spec, &opts)?;
    if model.exact {
        let check = |rep: &mut ExperimentReport, name: &str, est: f64, oracle: f64, tol: f64, prov: &str| {
            let dev = (est - oracle).abs();
            rep.row(name, None, est, 0.0, Some(oracle), prov, format!("abs {tol:e}"), dev, Verdict::of(dev <= tol));
        };
        check(&mut rep, "lambda1", grid_tri.lambda1, model.spectral.lambda1, tol.lambda1, "closed form");
        check(&mut rep, "gap", grid_tri.gap, model.spectral.gap, tol.gap, "closed form");
        let err = ground_state_error(model, &grid_tri, &opts)?;
        let rule = match model.spec.motion {
            Motion::IntervalBm { .. } => format!("sup abs {:e}", tol.h),
            Motion::Ou { .. } => format!("sup rel on [-3,3] {:e}", tol.h),
        };
        rep.row("h_error", None, err, 0.0, Some(0.0), "closed form", rule, err, Verdict::of(err <= tol.h));
    } else {
        rep.info("lambda1", None, grid_tri.lambda1, 0.0, "grid");
        rep.info("gap", None, grid_tri.gap, 0.0, "grid");
    }
    rep.info("h_norm", None, grid_tri.h_norm_check, 0.0, "quadrature");

    let source = KernelSource::for_model(&model.spec, &model.spectral, &opts)?;
    let closed_source = !matches!(source, KernelSource::Eigenbasis(_));
    let nodes = sc.table_nodes;

    for &t in &sc.kernel_times {
        let a = kernel_table(&source, t, nodes)?;
        let sym = a.symmetry_defect();
        rep.row("symmetry", Some(t), sym, 0.0, Some(0.0), "identity", "abs 1e-9".into(), sym, Verdict::of(sym <= 1e-9));
        let row = a.row_defect();
        let v = if closed_source { Verdict::of(row <= 1e-6) } else { Verdict::Info };
        rep.row("row_sum", Some(t), row, 0.0, Some(0.0), "identity", "abs 1e-6".into(), row, v);
        let ab = kernel_table(&source, 2.0 * t, nodes)?;
        let inner = a.inner_indices(matches!(model.spec.motion, Motion::IntervalBm { .. }));
        let ck = chapman_kolmogorov_defect(&a, &a, &ab, &inner, 10);
        let v = if closed_source { Verdict::of(ck <= 1e-6) } else { Verdict::Info };
        rep.row("chapman_kolmogorov", Some(t), ck, 0.0, Some(0.0), "identity", "rel 1e-6".into(), ck, v);
    }
    let poincare = spectral::check_poincare(&source, &sc.kernel_times, nodes, config.seed)?;
    for c in &poincare.cases {
        rep.row(
            &format!("poincare {}", c.label),
            Some(c.t),
            c.ratio,
            0.0,
            Some(c.bound),
            "spectral gap",
            format!("ratio <= bound + {:e}", poincare.slack),
            c.ratio - c.bound,
            Verdict::of(c.holds),
        );
    }

    let w = spectral::check_condition_w(&source, sc.w_time)?;
    let wv = match w.verdict {
        Finiteness::Finite => Verdict::Pass,
        Finiteness::Infinite => Verdict::HypothesisNotMet,
        Finiteness::Undetermined => Verdict::Info,
    };
    rep.row("trace", Some(sc.w_time), w.value, w.tail_bound, w.closed_form, "series", "finite".into(), 0.0, wv);

    let aiu = spectral::check_condition_aiu(&source, sc.t1, nodes)?;
    let av = match aiu.verdict {
        AiuVerdict::Holds => Verdict::Pass,
        AiuVerdict::Fails => Verdict::HypothesisNotMet,
        AiuVerdict::Undetermined => Verdict::Info,
    };
    rep.row("sup_diagonal", Some(sc.t1), aiu.sup, 0.0, None, "kernel windows", "bounded".into(), 0.0, av);
    for b in &aiu.bound_checks {
        rep.row(
            "mixing_bound",
            Some(b.t),
            b.worst_ratio,
            0.0,
            Some(1.0),
            "spectral gap",
            "worst ratio <= 1".into(),
            b.worst_ratio,
            Verdict::of(b.holds),
        );
    }
    if aiu.verdict == AiuVerdict::Fails {
        rep.notes.push("on-diagonal h-kernel sup grows without bound: the strong law's hypothesis fails".into());
    }

    let ll = spectral::llogl_value(&model.spec, &model.spectral)?;
    let lv = match ll.verdict {
        Finiteness::Finite => Verdict::Pass,
        Finiteness::Infinite => Verdict::HypothesisNotMet,
        Finiteness::Undetermined => Verdict::Info,
    };
    rep.row("llogl", None, ll.value, ll.tail_bound, None, "quadrature", "finite".into(), 0.0, lv);

    let details = serde_json::json!({
        "spectral": model.spectral,
        "grid_lambda1": grid_tri.lambda1,
        "grid_lambda2": grid_tri.lambda2,
        "grid_gap": grid_tri.gap,
        "condition_w": w,
        "condition_aiu": aiu,
        "poincare": poincare,
        "llogl": ll,
    });
    Ok(ReportDocument { command: "spectral".into(), report: rep.finish(), details })
}

fn simulate_command(
    config: &Config,
    model: &BuiltModel,
    workers: usize,
    out: &Path,
    spine: bool,
) -> CliResult<ReportDocument> {
    let sim = config.simulate.clone().unwrap_or_default();
    let x = sim.x.unwrap_or_else(|| config.model.center());
    let opts = SimOptions { observe: sim.observe.clone(), record_paths: sim.record_paths, ..SimOptions::default() };
    let name = if spine { "spine" } else { "simulate" };
    let ctx = RunContext { seed: config.seed, workers, z: 3.0 };
    let mut rep = ExperimentReport::new(name, model.id, &ctx);
    let dir = out.join(if spine { "spines" } else { "forests" });
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let results = run_replicas(sim.replicas, config.seed, workers, |_, rng| -> bhp_core::Result<(Vec<u8>, f64, f64)> {
        let mut buf = Vec::new();
        if spine {
            let tree = simulate_spine_tree(&model.spec, &model.spectral, x, sim.horizon, &opts, rng)?;
            tree.check_invariants()?;
            tree.forest.write_records(&mut buf).expect("writing to memory");
            let z = tree.ledger(sim.horizon, &model.spectral)?.z;
            Ok((buf, tree.fission_count(sim.horizon) as f64, z))
        } else {
            let forest = simulate_forest(&model.spec, x, sim.horizon, &opts, rng)?;
            forest.check_invariants()?;
            forest.write_records(&mut buf).expect("writing to memory");
            let n = forest.snapshot(sim.horizon)?.len() as f64;
            Ok((buf, n, forest.martingale_value(sim.horizon, &model.spectral)?))
        }
    });
    let mut counts = Vec::new();
    let mut values = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (buf, n, v) = r?;
        let path = dir.join(format!("{name}_{i:06}.tsv"));
        fs::write(&path, buf).map_err(io_err(&path))?;
        counts.push(n);
        values.push(v);
    }
    let label = if spine { "spine trees" } else { "forests" };
    rep.samples.push(SampleSize { label: label.into(), n: sim.replicas });
    let t = Some(sim.horizon);
    let c = Estimate::from_samples(&counts);
    let v = Estimate::from_samples(&values);
    if spine {
        rep.info("fission_count", t, c.mean, c.stderr, "monte carlo");
        rep.info("z", t, v.mean, v.stderr, "monte carlo");
    } else {
        rep.info("population", t, c.mean, c.stderr, "monte carlo");
        rep.info("martingale", t, v.mean, v.stderr, "monte carlo");
    }
    Ok(ReportDocument { command: name.into(), report: rep.finish(), details: serde_json::json!({ "x": x }) })
}

/// Experiment parameters used when the configuration has no `experiment`
/// section; the sample sizes are the full desk-scale ones.
pub fn default_experiment(name: &str, model: &ModelConfig) -> CliResult<Experiment> {
    let x = model.center();
    let f = model.default_indicator();
    let spine = SpineParams { x, horizon: 1.0, replicas: 20_000, f: TestFunction::H, z: 3.0 };
    Ok(match name {
        "martingale" => {
            Experiment::Martingale(MartingaleParams { x, times: vec![1.0, 2.0], replicas: 50_000, delta: 0.01, z: 3.0 })
        }
        "wlln" => Experiment::Wlln(WllnParams {
            x,
            f,
            t_grid: (1..=8).map(f64::from).collect(),
            t_max: None,
            replicas: 20_000,
            w_time: 1.0,
        }),
        "slln" => Experiment::Slln(SllnParams {
            x,
            f,
            sigma: 0.5,
            n_max: 16,
            paths: 200,
            t1: 0.5,
            share: 0.9,
            tolerance: 0.2,
        }),
        "spine_consistency" => Experiment::SpineConsistency(spine),
        "spine_decomposition" => Experiment::SpineDecomposition(spine),
        other => {
            return Err(CliError::Usage(format!(
            "unknown experiment `{other}` (expected martingale, wlln, slln, spine_consistency or spine_decomposition)"
        )))
        }
    })
}

fn verify_command(name: &str, config: &Config, model: &BuiltModel, workers: usize) -> CliResult<ReportDocument> {
    let experiment = match &config.experiment {
        Some(e) if e.name() == name => e.clone(),
        Some(e) => {
            return Err(CliError::Config(format!(
                "experiment section is `{}` but `verify {name}` was requested",
                e.name()
            )))
        }
        None => default_experiment(name, &config.model)?,
    };
    let opts = config.spectral.grid_options();
    let source = KernelSource::for_model(&model.spec, &model.spectral, &opts)?;
    let report = experiment.run(&model.spec, model.id, &model.spectral, &source, config.seed, workers)?;
    Ok(ReportDocument {
        command: format!("verify {name}"),
        report,
        details: serde_json::to_value(&experiment).unwrap(),
    })
}

/// Collects `report.json` from `dir` and its immediate subdirectories.
pub fn find_reports(dir: &Path) -> CliResult<Vec<ReportDocument>> {
    let mut paths = Vec::new();
    let own = dir.join("report.json");
    if own.is_file() {
        paths.push(own);
    }
    if dir.is_dir() {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for s in subdirs {
            let p = s.join("report.json");
            if p.is_file() {
                paths.push(p);
            }
        }
    } else {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut docs = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let doc: ReportDocument =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        docs.push(doc);
    }
    Ok(docs)
}

fn report_dir(dir: &Path) -> CliResult<Outcome> {
    let docs = find_reports(dir)?;
    if docs.is_empty() {
        return Err(CliError::Usage(format!("no report.json found under {}", dir.display())));
    }
    let failed = docs.iter().any(|d| !d.report.acceptable());
    Ok(Outcome {
        code: 0,
        out_dir: None,
        verdict: Some(if failed { Verdict::Fail } else { Verdict::Pass }),
        summary: render_table(&docs),
    })
}

fn num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "-".into())
}

/// Plain-text table of all rows, one block per document.
pub fn render_table(docs: &[ReportDocument]) -> String {
    let mut s = String::new();
    for d in docs {
        s.push_str(&format!(
            "{} [{}] model={} seed={} verdict={}\n",
            d.command,
            d.report.name,
            d.report.model,
            d.report.seed,
            d.report.verdict.as_str()
        ));
        s.push_str(&format!(
            "  {:<44} {:>8} {:>14} {:>12} {:>14}  {}\n",
            "statistic", "t", "estimate", "stderr", "oracle", "verdict"
        ));
        for r in &d.report.rows {
            s.push_str(&format!(
                "  {:<44} {:>8} {:>14} {:>12.2e} {:>14}  {}\n",
                r.experiment,
                opt(r.t),
                num(r.estimate),
                r.stderr,
                opt(r.oracle),
                r.verdict.as_str()
            ));
        }
        for n in &d.report.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
    }
    s
}
