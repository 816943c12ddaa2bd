//! Run configurations, presets, artifacts and sweeps.
//!
//! A run is bath → fit → propagate. Every run writes three files into its
//! output directory: `trajectory.csv`, `run.json` (config, hash and
//! diagnostics) and `fit.json` (the exponential series with its errors).

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bath::{BathError, BathSpec, Beta, SpectralFamily, Spin, Statistics};
use crate::deom::{Checkpoint, DeomError, HierarchyParams, Mat2, Propagator, SystemSpec};
use crate::exec;
use crate::expfit::{self, ExponentialSeries, FitArtifact, FitError, FitReport, FitStrategy, TcfSamples};
use crate::observables::Trajectory;
use crate::quadrature::QuadratureSpec;

pub const PRESETS: &[&str] = &[
    "fig1a", "fig1b", "fig1c", "fig1d", "fig1e", "fig1f", "fig2", "fig3a", "fig3b", "fig3c", "fig5a", "fig5b", "fig5c",
    "dephasing", "rabi",
];

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const RUN_FILE: &str = "run.json";
pub const FIT_FILE: &str = "fit.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.txt";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("unknown preset {name:?}; available: {}", PRESETS.join(", "))]
    UnknownPreset { name: String },
    #[error("{0} is marked expensive; pass --allow-expensive to run it")]
    Expensive(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bath: {0}")]
    Bath(#[from] BathError),
    #[error("fit: {0}")]
    Fit(#[from] FitError),
    #[error("propagation: {0}")]
    Deom(#[from] DeomError),
    #[error("sweep member {label}: {source}")]
    Member {
        label: String,
        #[source]
        source: Box<RunError>,
    },
}

impl RunError {
    /// Process exit status: 1 for configuration problems, 3 for a diverged
    /// propagation, 2 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) | RunError::Parse(_) | RunError::UnknownPreset { .. } | RunError::Expensive(_) => 1,
            RunError::Deom(DeomError::Diverged { .. } | DeomError::NonFinite { .. }) => 3,
            RunError::Member { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `|0⟩⟨0|`, `P(0) = 1`.
    #[default]
    Up,
    Down,
    /// `I/2`
    Mixed,
    /// `|+⟩⟨+|` with `|+⟩ = (|0⟩ + |1⟩)/√2`.
    Plus,
}

impl InitialState {
    pub fn matrix(self) -> Mat2 {
        let h = Complex64::new(0.5, 0.0);
        let z = Complex64::new(0.0, 0.0);
        match self {
            InitialState::Up => crate::deom::spin_up(),
            InitialState::Down => crate::deom::spin_down(),
            InitialState::Mixed => Mat2::new(h, z, z, h),
            InitialState::Plus => Mat2::new(h, h, h, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub initial: InitialState,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig { epsilon: 0.0, delta: 1.0, initial: InitialState::Up }
    }
}

impl SystemConfig {
    pub fn spec(&self) -> SystemSpec {
        SystemSpec::new(self.epsilon, self.delta).with_rho0(self.initial.matrix())
    }
}

/// Environment kind; `none` gives the isolated two-level system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BathKind {
    #[default]
    Spin,
    Boson,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BathConfig {
    pub statistics: BathKind,
    pub alpha: f64,
    pub omega_c: f64,
    /// Number or `"inf"`.
    pub beta: Beta,
    pub spin_s: Spin,
}

impl Default for BathConfig {
    fn default() -> Self {
        BathConfig { statistics: BathKind::Spin, alpha: 0.5, omega_c: 1.0, beta: Beta::Infinite, spin_s: Spin::HALF }
    }
}

impl BathConfig {
    pub fn spec(&self) -> Option<BathSpec> {
        let statistics = match self.statistics {
            BathKind::Spin => Statistics::Spin,
            BathKind::Boson => Statistics::Boson,
            BathKind::None => return None,
        };
        Some(BathSpec {
            family: SpectralFamily::OhmicExponential,
            alpha: self.alpha,
            omega_c: self.omega_c,
            beta: self.beta,
            spin_s: self.spin_s,
            statistics,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), checkpoint_every: 0 }
    }
}

/// Axes of a sweep. Members are the cartesian product of the non-empty axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub tiers: Vec<usize>,
    pub betas: Vec<Beta>,
    /// `[k_real, k_imag]` pairs.
    pub fits: Vec<[usize; 2]>,
    pub statistics: Vec<BathKind>,
    /// `0` disables the filter.
    pub filter_tols: Vec<f64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.tiers.is_empty()
            && self.betas.is_empty()
            && self.fits.is_empty()
            && self.statistics.is_empty()
            && self.filter_tols.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Refuse to run without an explicit opt-in.
    pub expensive: bool,
    pub system: SystemConfig,
    pub bath: BathConfig,
    pub fit: FitStrategy,
    pub hierarchy: HierarchyParams,
    pub quadrature: QuadratureSpec,
    pub output: OutputConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            expensive: false,
            system: SystemConfig::default(),
            bath: BathConfig::default(),
            fit: FitStrategy::default(),
            hierarchy: HierarchyParams::default(),
            quadrature: QuadratureSpec::default(),
            output: OutputConfig::default(),
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig, RunError> {
        toml::from_str(s).map_err(|e| RunError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violated invariant, prefixed with its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let s = &self.system;
        if !s.epsilon.is_finite() {
            out.push(format!("system.epsilon = {} must be finite", s.epsilon));
        }
        if !(s.delta.is_finite() && s.delta >= 0.0) {
            out.push(format!("system.delta = {} must be finite and non-negative", s.delta));
        }
        if let Some(spec) = self.bath.spec() {
            out.extend(spec.violations().into_iter().map(|v| format!("bath.{v}")));
            out.extend(self.fit.violations().into_iter().map(|v| format!("fit.{v}")));
            out.extend(self.quadrature.violations(spec.omega_c).into_iter().map(|v| format!("quadrature.{v}")));
        }
        out.extend(self.hierarchy.violations().into_iter().map(|v| format!("hierarchy.{v}")));
        if self.output.dir.as_os_str().is_empty() {
            out.push("output.dir must not be empty".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.is_empty() {
                out.push("sweep has no axes".into());
            }
            for member in expand_sweep(self) {
                for v in member.config.violations() {
                    let line = format!("sweep[{}]: {v}", member.label);
                    if !out.contains(&line) {
                        out.push(line);
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(RunError::Validation(v))
        }
    }

    /// Set a dotted field, e.g. `hierarchy.tier=12` or `bath.beta=inf`. The
    /// value is read as a TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), RunError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| RunError::Parse(format!("override {assignment:?} is not of the form key=value")))?;
        let (path, raw) = (path.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| RunError::Parse(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| RunError::Parse(format!("override {path:?}: {} is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value);
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().map_err(|e: toml::de::Error| RunError::Parse(format!("override {path:?}: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Named parameter sets, in units of `Δ`.
pub fn preset(name: &str) -> Result<RunConfig, RunError> {
    let mut c = RunConfig { name: name.to_string(), ..RunConfig::default() };
    c.output.dir = PathBuf::from("out").join(name);
    let zero_t = |c: &mut RunConfig, alpha: f64, omega_c: f64| {
        c.bath.alpha = alpha;
        c.bath.omega_c = omega_c;
        c.bath.beta = Beta::Infinite;
    };
    match name {
        "fig1a" => zero_t(&mut c, 0.5, 1.0),
        "fig1b" => zero_t(&mut c, 0.1, 6.0),
        "fig1c" => zero_t(&mut c, 0.2, 10.0),
        "fig1d" => zero_t(&mut c, 0.5, 10.0),
        "fig1e" => {
            zero_t(&mut c, 0.75, 10.0);
            c.fit = FitStrategy::new(6, 5);
        }
        "fig1f" => zero_t(&mut c, 0.5, 40.0),
        "fig2" => {
            // Reduced variant of the localization benchmark.
            zero_t(&mut c, 10.0, 1.0);
            c.fit = FitStrategy::new(2, 2);
            c.hierarchy.tier = 25;
            c.hierarchy.filter_tol = Some(0.0);
            c.expensive = true;
        }
        "fig3a" | "fig3b" | "fig3c" => {
            let (omega_c, alpha, fit) = match name {
                "fig3a" => (6.0, 0.5, FitStrategy::new(5, 5)),
                "fig3b" => (10.0, 0.75, FitStrategy::new(6, 5)),
                _ => (1.0, 10.0, FitStrategy::new(4, 4)),
            };
            zero_t(&mut c, alpha, omega_c);
            c.fit = fit;
            c.sweep = Some(SweepConfig {
                betas: vec![Beta::Infinite, Beta::Finite(10.0), Beta::Finite(6.0)],
                ..SweepConfig::default()
            });
            if name == "fig3c" {
                c.expensive = true;
                c.hierarchy.filter_tol = Some(0.0);
            }
        }
        "fig5a" | "fig5b" | "fig5c" => {
            let (omega_c, beta) = match name {
                "fig5a" => (1.0, 0.25),
                "fig5b" => (2.0, 1.0),
                _ => (2.0, 5.0),
            };
            c.system.epsilon = 1.0;
            c.bath.alpha = 0.4;
            c.bath.omega_c = omega_c;
            c.bath.beta = Beta::Finite(beta);
            c.sweep = Some(SweepConfig { statistics: vec![BathKind::Spin, BathKind::Boson], ..SweepConfig::default() });
        }
        "dephasing" => {
            c.system.delta = 0.0;
            c.system.initial = InitialState::Plus;
            c.bath.alpha = 0.1;
            c.bath.omega_c = 1.0;
            c.hierarchy.t_final = 10.0;
        }
        "rabi" => {
            c.bath.statistics = BathKind::None;
            c.hierarchy.t_final = 10.0;
        }
        _ => return Err(RunError::UnknownPreset { name: name.to_string() }),
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub allow_expensive: bool,
    /// Continue from `checkpoint.json` in the output directory when present.
    pub resume: bool,
}

/// Diagnostics stored next to the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub n_modes: usize,
    pub n_records: usize,
    pub final_time: f64,
    pub final_population: f64,
    pub max_active: usize,
    pub max_tier: usize,
    pub max_trace_deviation: f64,
    pub max_hermiticity_residue: f64,
    pub fit: Option<FitReport>,
    /// `max |P(t) − cos 2Δt|` for the isolated unbiased system.
    pub rabi_max_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub trajectory: Trajectory,
    pub fit: FitArtifact,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunCheckpoint {
    config_hash: String,
    trajectory: Trajectory,
    state: Checkpoint,
}

/// Fit the configured bath, or return the empty series for `none`.
pub fn fit_config(config: &RunConfig) -> Result<(FitArtifact, Option<TcfSamples>), RunError> {
    let exec = config.hierarchy.execution;
    match config.bath.spec() {
        None => Ok((FitArtifact { series: ExponentialSeries::empty(), errors: empty_report() }, None)),
        Some(spec) => {
            let (series, errors, samples) = expfit::fit_bath(&spec, &config.fit, &config.quadrature, exec)?;
            Ok((FitArtifact { series, errors }, Some(samples)))
        }
    }
}

fn empty_report() -> FitReport {
    FitReport {
        max_abs_error: 0.0,
        rms_error: 0.0,
        re_max_abs_error: 0.0,
        re_rms_error: 0.0,
        im_max_abs_error: 0.0,
        im_rms_error: 0.0,
        n_samples: 0,
    }
}

fn guard(config: &RunConfig, opts: &RunOptions) -> Result<(), RunError> {
    config.validate()?;
    if config.expensive && !opts.allow_expensive {
        return Err(RunError::Expensive(config.name.clone()));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| RunError::Io { path: path.to_path_buf(), source: e.into() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_checkpoint(dir: &Path, cp: &RunCheckpoint) -> Result<(), RunError> {
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    let path = dir.join(CHECKPOINT_FILE);
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, cp).map_err(|e| RunError::Io { path: tmp.clone(), source: e.into() })?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

fn read_checkpoint(path: &Path) -> Result<RunCheckpoint, RunError> {
    let text = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&text).map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))
}

/// Fit, propagate and write the three artifacts into `config.output.dir`.
/// Sweep axes, if any, are ignored here; see [`run_sweep`].
pub fn run(config: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    guard(config, opts)?;
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let hash = config.hash();
    let started = Instant::now();

    let (fit, _) = fit_config(config)?;
    info!(
        "{}: {} exponential terms, max fit error {:.3e}",
        config.name,
        fit.series.len(),
        fit.errors.max_abs_error
    );
    write_json(&dir.join(FIT_FILE), &fit)?;

    let sys = config.system.spec();
    let params = config.hierarchy;
    let cp_path = dir.join(CHECKPOINT_FILE);
    let (mut prop, mut traj) = match opts.resume.then(|| cp_path.exists()) {
        Some(true) => {
            let cp = read_checkpoint(&cp_path)?;
            if cp.config_hash != hash {
                return Err(RunError::Parse(format!(
                    "{} belongs to a different configuration",
                    cp_path.display()
                )));
            }
            info!("resuming from step {}", cp.state.step);
            (Propagator::resume(&sys, &cp.state)?, cp.trajectory)
        }
        _ => (Propagator::new(&sys, &fit.series, &params)?, Trajectory::default()),
    };
    traj.config_hash = Some(hash.clone());

    let n_steps = params.n_steps();
    let every = config.output.checkpoint_every;
    while prop.steps_taken() < n_steps {
        let next = if every > 0 { (prop.steps_taken() + every).min(n_steps) } else { n_steps };
        prop.run_until(next, &mut traj)?;
        if every > 0 {
            write_checkpoint(&dir, &RunCheckpoint { config_hash: hash.clone(), trajectory: traj.clone(), state: prop.checkpoint() })?;
        }
    }
    if traj.is_empty() {
        prop.run_until(0, &mut traj)?;
    }

    let csv_path = dir.join(TRAJECTORY_FILE);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut w = BufWriter::new(file);
    traj.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&csv_path))?;

    let rabi_max_error = (config.bath.statistics == BathKind::None
        && config.system.epsilon == 0.0
        && config.system.initial == InitialState::Up)
        .then(|| {
            traj.times
                .iter()
                .zip(&traj.population)
                .map(|(&t, &p)| (p - (2.0 * config.system.delta * t).cos()).abs())
                .fold(0.0, f64::max)
        });
    if let Some(e) = rabi_max_error {
        info!("isolated-system check: max |P - cos 2Δt| = {e:.3e}");
    }

    let summary = RunSummary {
        name: config.name.clone(),
        config_hash: hash,
        config: config.clone(),
        n_modes: fit.series.len(),
        n_records: traj.len(),
        final_time: traj.times.last().copied().unwrap_or(0.0),
        final_population: traj.population.last().copied().unwrap_or(f64::NAN),
        max_active: traj.n_active.iter().copied().max().unwrap_or(0),
        max_tier: traj.max_tier,
        max_trace_deviation: traj.max_trace_deviation(),
        max_hermiticity_residue: traj.max_hermiticity_residue(),
        fit: config.bath.spec().map(|_| fit.errors),
        rabi_max_error,
    };
    write_json(&dir.join(RUN_FILE), &summary)?;
    info!("{}: done in {:.1?}, artifacts in {}", config.name, started.elapsed(), dir.display());
    Ok(RunOutcome { dir, trajectory: traj, fit, summary })
}

/// Fit only; writes `fit.json` and returns the artifact.
pub fn fit_only(config: &RunConfig) -> Result<FitArtifact, RunError> {
    config.validate()?;
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (fit, _) = fit_config(config)?;
    write_json(&dir.join(FIT_FILE), &fit)?;
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepMember {
    pub label: String,
    pub config: RunConfig,
}

/// Cartesian product of the sweep axes, each member writing into its own
/// subdirectory of `output.dir`. Without a sweep the config itself is the only
/// member.
pub fn expand_sweep(config: &RunConfig) -> Vec<SweepMember> {
    let mut base = config.clone();
    let Some(sweep) = base.sweep.take() else {
        return vec![SweepMember { label: config.name.clone(), config: base }];
    };
    let mut members = vec![(Vec::<String>::new(), base.clone())];
    fn axis<T: Copy>(
        members: Vec<(Vec<String>, RunConfig)>,
        values: &[T],
        label: impl Fn(T) -> String,
        apply: impl Fn(&mut RunConfig, T),
    ) -> Vec<(Vec<String>, RunConfig)> {
        if values.is_empty() {
            return members;
        }
        let mut out = Vec::with_capacity(members.len() * values.len());
        for (labels, cfg) in members {
            for &v in values {
                let mut l = labels.clone();
                l.push(label(v));
                let mut c = cfg.clone();
                apply(&mut c, v);
                out.push((l, c));
            }
        }
        out
    }
    members = axis(members, &sweep.statistics, |s| format!("{s:?}").to_lowercase(), |c, s| c.bath.statistics = s);
    members = axis(members, &sweep.betas, |b| format!("beta{b}"), |c, b| c.bath.beta = b);
    members = axis(members, &sweep.fits, |[r, i]| format!("fit{r}+{i}"), |c, [r, i]| {
        c.fit.k_real = r;
        c.fit.k_imag = i;
    });
    members = axis(members, &sweep.tiers, |t| format!("tier{t}"), |c, t| c.hierarchy.tier = t);
    members = axis(members, &sweep.filter_tols, |f| format!("filter{f:e}"), |c, f| {
        c.hierarchy.filter_tol = Some(f);
    });
    members
        .into_iter()
        .map(|(labels, mut cfg)| {
            let label = labels.join("_");
            cfg.output.dir = config.output.dir.join(&label);
            cfg.name = format!("{}/{label}", config.name);
            SweepMember { label, config: cfg }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub members: Vec<(String, RunOutcome)>,
    /// `deviation[i][j] = max_t |P_i(t) − P_j(t)|` over the common record times.
    pub deviation: Vec<Vec<f64>>,
    pub table: String,
}

/// Largest pointwise population difference over the times both
/// trajectories recorded.
pub fn max_population_deviation(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut worst: f64 = 0.0;
    let mut j = 0;
    for (i, &t) in a.times.iter().enumerate() {
        while j < b.times.len() && b.times[j] < t - 1e-9 {
            j += 1;
        }
        if j < b.times.len() && (b.times[j] - t).abs() <= 1e-9 {
            worst = worst.max((a.population[i] - b.population[j]).abs());
        }
    }
    worst
}

fn deviation_table(labels: &[&str], dev: &[Vec<f64>]) -> String {
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(10);
    let mut s = format!("max pairwise |P_i(t) - P_j(t)|\n{:width$}", "");
    for l in labels {
        let _ = write!(s, "  {l:>width$}");
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(dev) {
        let _ = write!(s, "{l:width$}");
        for d in row {
            let _ = write!(s, "  {:>width$}", format!("{d:.3e}"));
        }
        s.push('\n');
    }
    s
}

/// Run every member and write the convergence table into `output.dir`.
/// Members are independent and may run concurrently.
pub fn run_sweep(config: &RunConfig, opts: &RunOptions) -> Result<SweepOutcome, RunError> {
    guard(config, opts)?;
    let members = expand_sweep(config);
    let results = exec::map_range(config.hierarchy.execution, members.len(), |i| {
        let m = &members[i];
        run(&m.config, opts).map_err(|e| RunError::Member { label: m.label.clone(), source: Box::new(e) })
    });
    let mut done = Vec::with_capacity(results.len());
    for (m, r) in members.iter().zip(results) {
        done.push((m.label.clone(), r?));
    }
    let n = done.len();
    let mut deviation = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = max_population_deviation(&done[i].1.trajectory, &done[j].1.trajectory);
            deviation[i][j] = d;
            deviation[j][i] = d;
        }
    }
    let labels: Vec<&str> = done.iter().map(|(l, _)| l.as_str()).collect();
    let table = deviation_table(&labels, &deviation);
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(SWEEP_SUMMARY_FILE);
    fs::write(&path, &table).map_err(io_err(&path))?;
    if done.iter().any(|(_, o)| o.summary.max_trace_deviation > 1e-8) {
        warn!("some sweep members drifted in trace by more than 1e-8");
    }
    Ok(SweepOutcome { members: done, deviation, table })
}
