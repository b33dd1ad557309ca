//! Experiment configuration, orchestration and JSON reports.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calculus::{
    ito_deterministic_residual, ito_residual_study, ito_time_dependent_residual, mollified_local_time_mean, qv_limit,
    qv_study, skorohod_estimate, tanaka_residual, weighted_local_time, EpsSchedule, TestFunction, TimeTestFunction,
};
use crate::chaos::{local_time_second_moment, tail_exponent_estimate, watanabe_partial_norm, ChaosSeries, FitRange, WatanabeIndex};
use crate::covariance::covariance;
use crate::error::{Error, Result};
use crate::kernels::MollifierParam;
use crate::params::{HurstParams, MultiParams};
use crate::potential::{
    envelope_checks, envelope_samples, harmonicity_residual, laplace_identity_residual, mollified_multidim_tanaka,
    multidim_ito_residual, u_bar, u_bar_derivatives, PotentialSpec,
};
use crate::quadrature::QuadSpec;
use crate::simulator::{sample_paths, PathEnsemble, StreamedEnsemble, TimeGrid};
use crate::stats::MeanEstimate;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Simulate,
    Qv,
    Ito,
    Tanaka,
    Chaos,
    Potential,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [Self::Simulate, Self::Qv, Self::Ito, Self::Tanaka, Self::Chaos, Self::Potential];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Qv => "qv",
            Self::Ito => "ito",
            Self::Tanaka => "tanaka",
            Self::Chaos => "chaos",
            Self::Potential => "potential",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(vec![format!("unknown experiment kind '{name}'")]))
    }

    fn summary(&self) -> &'static str {
        match self {
            Self::Simulate => "exact Cholesky sampling: empirical covariance, terminal variance and increment normality",
            Self::Qv => "quadratic variation of sampled paths against its exact mean and critical limit",
            Self::Ito => "deterministic heat-equation Itô identities and Monte-Carlo Skorohod sums",
            Self::Tanaka => "mollified weighted local time and the mollified Tanaka identity",
            Self::Chaos => "chaos norms of the local time, truncated second moment and Watanabe tail exponent",
            Self::Potential => "Newtonian potential identities, envelopes and the mollified multidimensional Tanaka identity",
        }
    }

    fn defaults(&self) -> ExperimentConfig {
        let base = |h: Vec<f64>, k: Vec<f64>, t: f64, n: usize, paths: usize| ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind: *self,
            params: ParamsSpec { h, k },
            grid: GridSpec { t, n },
            mc: McSpec { n_paths: paths, seed: 1 },
            estimator: EstimatorSpec {
                eps: vec![],
                eps_schedule: EpsSchedule::default(),
                truncation: 0,
                alpha: vec![],
                levels: vec![],
                resolutions: vec![],
                theta: None,
                test_functions: vec![],
                rel_tolerance: 0.01,
                z_tolerance: 4.0,
            },
            output: OutputSpec { csv: false },
        };
        match self {
            Self::Simulate => base(vec![0.5], vec![1.0], 1.0, 16, 20_000),
            Self::Qv => {
                let mut c = base(vec![0.8], vec![0.625], 1.0, 1024, 1000);
                c.estimator.resolutions = vec![64, 256, 1024];
                c
            }
            Self::Ito => {
                let mut c = base(vec![0.7], vec![0.9], 1.0, 256, 2000);
                c.estimator.test_functions = vec!["square".into(), "cosine".into(), "gaussian_bump".into()];
                c.estimator.resolutions = vec![64, 128, 256];
                c
            }
            Self::Tanaka => {
                let mut c = base(vec![0.6], vec![0.9], 1.0, 512, 1000);
                c.estimator.eps = vec![0.05, 0.01];
                c.estimator.levels = vec![0.0];
                c.estimator.resolutions = vec![64, 128, 256, 512];
                c
            }
            Self::Chaos => {
                let mut c = base(vec![0.6], vec![0.9], 1.0, 0, 0);
                c.estimator.truncation = 30;
                c.estimator.levels = vec![0.0];
                c.estimator.alpha = vec![-1.0, -0.5, 0.0, 0.5];
                c.estimator.rel_tolerance = 0.05;
                c
            }
            Self::Potential => {
                let mut c = base(vec![0.7, 0.75], vec![0.9, 0.9], 1.0, 256, 400);
                c.estimator.eps = vec![0.5];
                c.estimator.levels = vec![0.3, -0.2];
                c.estimator.resolutions = vec![16, 64, 256];
                c.estimator.z_tolerance = 3.0;
                c
            }
        }
    }

    /// Machine-readable description: summary, required and optional fields, defaults.
    pub fn describe(&self) -> Value {
        let defaults = serde_json::to_value(self.defaults()).expect("defaults serialize");
        json!({
            "kind": self.name(),
            "summary": self.summary(),
            "required": ["kind"],
            "optional": ["schema_version", "params.h", "params.k", "grid.t", "grid.n", "mc.n_paths", "mc.seed",
                "estimator.eps", "estimator.eps_schedule", "estimator.truncation", "estimator.alpha", "estimator.levels",
                "estimator.resolutions", "estimator.theta", "estimator.test_functions", "estimator.rel_tolerance",
                "estimator.z_tolerance", "output.csv"],
            "defaults": defaults,
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn list_experiments() -> Vec<&'static str> {
    ExperimentKind::ALL.iter().map(|k| k.name()).collect()
}

pub fn describe(kind: &str) -> Result<Value> {
    Ok(ExperimentKind::parse(kind)?.describe())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsSpec {
    pub h: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub t: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSpec {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSpec {
    pub eps: Vec<f64>,
    pub eps_schedule: EpsSchedule,
    pub truncation: usize,
    pub alpha: Vec<f64>,
    pub levels: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub theta: Option<f64>,
    pub test_functions: Vec<String>,
    pub rel_tolerance: f64,
    pub z_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSpec {
    pub csv: bool,
}

/// A fully resolved configuration; every default is materialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub params: ParamsSpec,
    pub grid: GridSpec,
    pub mc: McSpec,
    pub estimator: EstimatorSpec,
    pub output: OutputSpec,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    h: Option<Vec<f64>>,
    k: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    t: Option<f64>,
    n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    n_paths: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    eps: Option<Vec<f64>>,
    eps_schedule: Option<EpsSchedule>,
    truncation: Option<usize>,
    alpha: Option<Vec<f64>>,
    levels: Option<Vec<f64>>,
    resolutions: Option<Vec<usize>>,
    theta: Option<f64>,
    test_functions: Option<Vec<String>>,
    rel_tolerance: Option<f64>,
    z_tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    csv: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    kind: String,
    #[serde(default)]
    params: RawParams,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    mc: RawMc,
    #[serde(default)]
    estimator: RawEstimator,
    #[serde(default)]
    output: RawOutput,
}

const TEST_FUNCTIONS: [&str; 4] = ["identity", "square", "cosine", "gaussian_bump"];

fn test_function(name: &str) -> Result<TestFunction> {
    match name {
        "identity" => Ok(TestFunction::identity()),
        "square" => Ok(TestFunction::square()),
        "cosine" => Ok(TestFunction::cosine()),
        "gaussian_bump" => TestFunction::gaussian_bump(0.3, 0.5),
        _ => Err(Error::Config(vec![format!("unknown test function '{name}'")])),
    }
}

impl ExperimentConfig {
    /// Parses a JSON document, fills defaults for its kind and validates the result.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_seed(text, None)
    }

    /// As [`ExperimentConfig::from_json`], with an optional seed override.
    pub fn from_json_with_seed(text: &str, seed: Option<u64>) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let kind = ExperimentKind::parse(&raw.kind)?;
        let mut c = kind.defaults();
        if let Some(v) = raw.schema_version {
            c.schema_version = v;
        }
        let RawParams { h, k } = raw.params;
        match (h, k) {
            (Some(h), Some(k)) => c.params = ParamsSpec { h, k },
            (None, None) => {}
            _ => return Err(Error::Config(vec!["params.h and params.k must be given together".into()])),
        }
        c.grid.t = raw.grid.t.unwrap_or(c.grid.t);
        c.grid.n = raw.grid.n.unwrap_or(c.grid.n);
        c.mc.n_paths = raw.mc.n_paths.unwrap_or(c.mc.n_paths);
        c.mc.seed = seed.or(raw.mc.seed).unwrap_or(c.mc.seed);
        let e = raw.estimator;
        let est = &mut c.estimator;
        est.eps = e.eps.unwrap_or(std::mem::take(&mut est.eps));
        est.eps_schedule = e.eps_schedule.unwrap_or(est.eps_schedule);
        est.truncation = e.truncation.unwrap_or(est.truncation);
        est.alpha = e.alpha.unwrap_or(std::mem::take(&mut est.alpha));
        est.levels = e.levels.unwrap_or(std::mem::take(&mut est.levels));
        est.resolutions = e.resolutions.unwrap_or(std::mem::take(&mut est.resolutions));
        est.theta = e.theta.or(est.theta);
        est.test_functions = e.test_functions.unwrap_or(std::mem::take(&mut est.test_functions));
        est.rel_tolerance = e.rel_tolerance.unwrap_or(est.rel_tolerance);
        est.z_tolerance = e.z_tolerance.unwrap_or(est.z_tolerance);
        c.output.csv = raw.output.csv.unwrap_or(c.output.csv);
        if c.kind == ExperimentKind::Potential && c.estimator.theta.is_none() {
            if let Ok(mp) = c.multi_params() {
                // smallest admissible theta shifted by 1/2
                c.estimator.theta = Some(0.5 - mp.gamma(0.0));
            }
        }
        if c.kind == ExperimentKind::Potential && c.estimator.levels.is_empty() {
            c.estimator.levels = vec![0.0; c.params.h.len()];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn multi_params(&self) -> Result<MultiParams> {
        MultiParams::from_vectors(&self.params.h, &self.params.k)
    }

    /// Every violated constraint, collected into one [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let (h, k) = (&self.params.h, &self.params.k);
        if h.is_empty() || h.len() != k.len() {
            bad.push(format!("params.h ({}) and params.k ({}) need the same nonzero length", h.len(), k.len()));
        }
        let comps: Vec<HurstParams> = h
            .iter()
            .zip(k)
            .enumerate()
            .filter_map(|(i, (&h, &k))| match HurstParams::new(h, k) {
                Ok(p) => Some(p),
                Err(e) => {
                    bad.push(format!("component {i}: {e}"));
                    None
                }
            })
            .collect();
        let d = h.len();
        if !(self.grid.t > 0.0 && self.grid.t.is_finite()) {
            bad.push(format!("grid.t = {} must be positive", self.grid.t));
        }
        let est = &self.estimator;
        if est.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            bad.push("estimator.eps entries must be positive".into());
        }
        if !(est.rel_tolerance > 0.0) || !(est.z_tolerance > 0.0) {
            bad.push("tolerances must be positive".into());
        }
        let needs_grid = self.kind != ExperimentKind::Chaos;
        if needs_grid && self.grid.n == 0 {
            bad.push("grid.n must be at least 1".into());
        }
        for &r in &est.resolutions {
            if r == 0 || self.grid.n == 0 || self.grid.n % r != 0 {
                bad.push(format!("resolution {r} does not divide grid.n = {}", self.grid.n));
            }
        }
        let one_dim = |bad: &mut Vec<String>| {
            if d != 1 {
                bad.push(format!("kind '{}' needs a single component, got {d}", self.kind));
            }
        };
        let ito_regime = |bad: &mut Vec<String>| {
            for (i, p) in comps.iter().enumerate() {
                if p.require_ito_regime().is_err() {
                    bad.push(format!("component {i}: kind '{}' requires 2HK >= 1, got {}", self.kind, p.two_hk()));
                }
            }
        };
        match self.kind {
            ExperimentKind::Simulate => {
                if self.mc.n_paths < 2 {
                    bad.push("mc.n_paths must be at least 2".into());
                }
            }
            ExperimentKind::Qv => {
                one_dim(&mut bad);
                if self.mc.n_paths < 2 {
                    bad.push("mc.n_paths must be at least 2".into());
                }
                if est.resolutions.is_empty() {
                    bad.push("estimator.resolutions must not be empty".into());
                }
            }
            ExperimentKind::Ito => {
                one_dim(&mut bad);
                ito_regime(&mut bad);
                for f in &est.test_functions {
                    if !TEST_FUNCTIONS.contains(&f.as_str()) {
                        bad.push(format!("unknown test function '{f}' (known: {})", TEST_FUNCTIONS.join(", ")));
                    }
                }
                if est.test_functions.is_empty() {
                    bad.push("estimator.test_functions must not be empty".into());
                }
            }
            ExperimentKind::Tanaka => {
                one_dim(&mut bad);
                ito_regime(&mut bad);
                if est.eps.is_empty() || est.levels.len() != 1 {
                    bad.push("tanaka needs estimator.eps and exactly one level".into());
                }
                if self.mc.n_paths < 2 {
                    bad.push("mc.n_paths must be at least 2".into());
                }
                if let (Some(p), true) = (comps.first(), self.grid.n > 0) {
                    for &e in &est.eps {
                        if let Err(err) = est.eps_schedule.check(p, self.grid.n, e) {
                            bad.push(err.to_string());
                        }
                    }
                }
            }
            ExperimentKind::Chaos => {
                if est.truncation < 20 {
                    bad.push(format!("estimator.truncation = {} must be at least 20", est.truncation));
                }
                if est.levels.len() != d {
                    bad.push(format!("estimator.levels needs {d} coordinates"));
                }
                if d >= 2 && est.theta.is_none() {
                    bad.push("chaos with d >= 2 needs estimator.theta".into());
                }
            }
            ExperimentKind::Potential => {
                if d < 2 {
                    bad.push(format!("potential requires d >= 2, got {d}"));
                }
                if est.levels.len() != d {
                    bad.push(format!("estimator.levels needs {d} coordinates"));
                }
                if comps.len() == d && d >= 2 {
                    if let (Ok(mp), Some(theta)) = (self.multi_params(), est.theta) {
                        let g = mp.gamma(theta);
                        if !(g > 0.0) {
                            bad.push(format!("potential requires gamma > 0, got {g} at theta = {theta}"));
                        }
                        if self.mc.n_paths > 0 && mp.require_strictly_supercritical().is_err() {
                            bad.push("the Tanaka harness needs every 2H_iK_i > 1 (set mc.n_paths = 0 to skip it)".into());
                        }
                    }
                }
                if self.mc.n_paths > 0 && (est.eps.len() != 1 || est.resolutions.is_empty()) {
                    bad.push("the Tanaka harness needs one epsilon and at least one resolution".into());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// One checked quantity; `pass` is `|estimate - target| <= tolerance`, or `true` when
/// the metric carries no target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub target: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl Metric {
    pub fn checked(name: impl Into<String>, estimate: f64, std_error: Option<f64>, target: f64, tolerance: f64) -> Self {
        let pass = (estimate - target).abs() <= tolerance;
        Self { name: name.into(), estimate, std_error, target: Some(target), tolerance: Some(tolerance), pass }
    }

    /// `|mean - target| <= z * SE`.
    pub fn within_se(name: impl Into<String>, est: &MeanEstimate, target: f64, z: f64) -> Self {
        Self::checked(name, est.mean, Some(est.std_error), target, z * est.std_error)
    }

    pub fn info(name: impl Into<String>, estimate: f64, std_error: Option<f64>) -> Self {
        Self { name: name.into(), estimate, std_error, target: None, tolerance: None, pass: true }
    }

    /// Recomputes the pass flag from the recorded fields.
    pub fn derived_pass(&self) -> bool {
        match (self.target, self.tolerance) {
            (Some(t), Some(tol)) => (self.estimate - t).abs() <= tol,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub schema_version: u32,
    pub library_version: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics: Vec<Metric>,
    pub all_pass: bool,
    pub artifacts: Vec<String>,
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_pass {
            0
        } else {
            1
        }
    }
}

/// `2` for configuration errors, `3` for numerical failures.
pub fn error_exit_code(err: &Error) -> i32 {
    if err.is_config_error() {
        2
    } else {
        3
    }
}

struct Csv {
    name: String,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn new(name: &str, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(dir.join(&self.name))?);
        writeln!(w, "{}", self.header.join(","))?;
        for r in &self.rows {
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

struct Outcome {
    metrics: Vec<Metric>,
    tables: Vec<Csv>,
    ensemble: Option<PathEnsemble>,
}

/// Runs the experiment; with `out` set, writes `report.json` and any CSV artifacts there.
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let outcome = match config.kind {
        ExperimentKind::Simulate => run_simulate(config)?,
        ExperimentKind::Qv => run_qv(config)?,
        ExperimentKind::Ito => run_ito(config)?,
        ExperimentKind::Tanaka => run_tanaka(config)?,
        ExperimentKind::Chaos => run_chaos(config)?,
        ExperimentKind::Potential => run_potential(config)?,
    };
    let mut artifacts = Vec::new();
    if config.output.csv {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            for t in &outcome.tables {
                t.write(dir)?;
                artifacts.push(t.name.clone());
            }
            if let Some(ens) = &outcome.ensemble {
                for p in ens.write_csv(dir, "paths")? {
                    artifacts.push(p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
                }
            }
        } else {
            artifacts.extend(outcome.tables.iter().map(|t| t.name.clone()));
        }
    }
    let all_pass = outcome.metrics.iter().all(|m| m.pass);
    let report = ExperimentReport {
        schema: format!("bifbm-report/v{SCHEMA_VERSION}"),
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: config.kind,
        seed: config.mc.seed,
        config: config.clone(),
        metrics: outcome.metrics,
        all_pass,
        artifacts,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), report.to_json())?;
    }
    Ok(report)
}

/// Re-runs the configuration embedded in a report.
pub fn replay(report_json: &str, out: Option<&Path>) -> Result<ExperimentReport> {
    let v: Value = serde_json::from_str(report_json).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let cfg = v.get("config").ok_or_else(|| Error::Config(vec!["report has no config".into()]))?;
    let config = ExperimentConfig::from_json(&cfg.to_string())?;
    run(&config, out)
}

/// The report with its runtime field removed, for replay comparisons.
pub fn without_runtime(report_json: &str) -> Result<Value> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("runtime_seconds");
    }
    Ok(v)
}

fn run_simulate(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let grid = TimeGrid::uniform(c.grid.t, c.grid.n)?;
    let ens = sample_paths(&mp, &grid, c.mc.n_paths, c.mc.seed)?;
    let z = c.estimator.z_tolerance;
    let times = grid.times();
    let m = times.len();
    let mut metrics = Vec::new();
    let mut table = Csv::new("covariance.csv", &["dim", "i", "j", "empirical", "std_error", "exact"]);
    for (dim, p) in mp.params().iter().enumerate() {
        let mut within = 0usize;
        let mut total = 0usize;
        for i in 1..m {
            let ci = ens.column(dim, i);
            for j in i..m {
                let cj = ens.column(dim, j);
                let prod: Vec<f64> = ci.iter().zip(&cj).map(|(a, b)| a * b).collect();
                let est = MeanEstimate::from_samples(&prod);
                let exact = covariance(p, times[i], times[j])?;
                total += 1;
                if est.z_score(exact) <= z {
                    within += 1;
                }
                table.push(vec![dim.to_string(), i.to_string(), j.to_string(), num(est.mean), num(est.std_error), num(exact)]);
            }
        }
        metrics.push(Metric::checked(
            format!("dim{dim}.covariance_fraction_within_{z}se"),
            within as f64 / total as f64,
            None,
            1.0,
            0.01,
        ));
        let last = ens.column(dim, m - 1);
        let sq: Vec<f64> = last.iter().map(|v| v * v).collect();
        metrics.push(Metric::within_se(
            format!("dim{dim}.terminal_variance"),
            &MeanEstimate::from_samples(&sq),
            c.grid.t.powf(p.two_hk()),
            z,
        ));
        // standardized increments are N(0, 1) for every step
        let sd: Vec<f64> = times.windows(2).map(|w| crate::covariance::variogram(p, w[1], w[0]).map(f64::sqrt)).collect::<Result<_>>()?;
        let mut moments = [Vec::new(), Vec::new(), Vec::new()];
        for path in 0..ens.n_paths() {
            let x = ens.path(dim, path);
            let zs: Vec<f64> = x.windows(2).zip(&sd).map(|(w, s)| (w[1] - w[0]) / s).collect();
            let k = zs.len() as f64;
            moments[0].push(zs.iter().map(|v| v * v).sum::<f64>() / k);
            moments[1].push(zs.iter().map(|v| v.powi(3)).sum::<f64>() / k);
            moments[2].push(zs.iter().map(|v| v.powi(4)).sum::<f64>() / k);
        }
        for ((name, target), vals) in [("second", 1.0), ("third", 0.0), ("fourth", 3.0)].iter().zip(&moments) {
            metrics.push(Metric::within_se(
                format!("dim{dim}.increment_{name}_moment"),
                &MeanEstimate::from_samples(vals),
                *target,
                z,
            ));
        }
    }
    Ok(Outcome { metrics, tables: vec![table], ensemble: c.output.csv.then_some(ens) })
}

fn run_qv(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let p = mp.component(0);
    let grid = TimeGrid::uniform(c.grid.t, c.grid.n)?;
    let src = StreamedEnsemble::new(&mp, &grid, c.mc.n_paths, c.mc.seed)?;
    let levels = qv_study(&src, &c.estimator.resolutions)?;
    let z = c.estimator.z_tolerance;
    let mut metrics = Vec::new();
    let mut table = Csv::new("qv_levels.csv", &["n", "mean", "std_error", "expected", "l2_error", "l2_std_error"]);
    for lvl in &levels {
        metrics.push(Metric::within_se(format!("qv_mean.n{}", lvl.n), &lvl.mean, lvl.expected, z));
        let (l2, l2se) = lvl.l2_error.map(|e| (e.mean, e.std_error)).unwrap_or((f64::NAN, f64::NAN));
        if let Some(e) = &lvl.l2_error {
            metrics.push(Metric::info(format!("qv_l2_error.n{}", lvl.n), e.mean, Some(e.std_error)));
        }
        table.push(vec![lvl.n.to_string(), num(lvl.mean.mean), num(lvl.mean.std_error), num(lvl.expected), num(l2), num(l2se)]);
    }
    if let (Ok(limit), Some(finest)) = (qv_limit(&p, c.grid.t), levels.last()) {
        metrics.push(Metric::checked(
            "qv_mean_vs_limit",
            finest.mean.mean,
            Some(finest.mean.std_error),
            limit,
            c.estimator.rel_tolerance * limit,
        ));
        let l2: Vec<&MeanEstimate> = levels.iter().filter_map(|l| l.l2_error.as_ref()).collect();
        let increases = l2.windows(2).filter(|w| w[1].mean > w[0].mean + z * (w[0].std_error + w[1].std_error)).count();
        metrics.push(Metric::checked("qv_l2_error_increases_beyond_noise", increases as f64, None, 0.0, 0.0));
    }
    Ok(Outcome { metrics, tables: vec![table], ensemble: None })
}

fn run_ito(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let p = mp.component(0);
    let quad = QuadSpec::new(1e-13, 1e-12);
    let mut metrics = Vec::new();
    let fs: Vec<TestFunction> = c.estimator.test_functions.iter().map(|n| test_function(n)).collect::<Result<_>>()?;
    for f in &fs {
        let r = ito_deterministic_residual(&p, f, c.grid.t, &quad)?;
        metrics.push(Metric::checked(format!("deterministic_residual.{}", f.name()), r, None, 0.0, 1e-8));
    }
    let tf = TimeTestFunction::damped_cos();
    let r = ito_time_dependent_residual(&mp, &tf, c.grid.t, &quad)?;
    metrics.push(Metric::checked(format!("time_dependent_residual.{}", tf.name()), r, None, 0.0, 1e-6));
    let mut tables = Vec::new();
    if c.mc.n_paths >= 2 {
        let grid = TimeGrid::uniform(c.grid.t, c.grid.n)?;
        let ens = sample_paths(&mp, &grid, c.mc.n_paths, c.mc.seed)?;
        let mut table = Csv::new("ito_residuals.csv", &["function", "n", "mean_square_residual", "std_error"]);
        for f in &fs {
            let sk = skorohod_estimate(&ens, f)?;
            metrics.push(Metric::within_se(
                format!("skorohod_mean.{}", f.name()),
                &MeanEstimate::from_samples(&sk),
                0.0,
                c.estimator.z_tolerance.min(3.0),
            ));
            if !c.estimator.resolutions.is_empty() {
                for (n, est) in ito_residual_study(&ens, f, &c.estimator.resolutions)? {
                    metrics.push(Metric::info(format!("pathwise_residual.{}.n{n}", f.name()), est.mean, Some(est.std_error)));
                    table.push(vec![f.name().to_string(), n.to_string(), num(est.mean), num(est.std_error)]);
                }
            }
        }
        tables.push(table);
    }
    Ok(Outcome { metrics, tables, ensemble: None })
}

fn run_tanaka(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let p = mp.component(0);
    let x = c.estimator.levels[0];
    let grid = TimeGrid::uniform(c.grid.t, c.grid.n)?;
    let ens = sample_paths(&mp, &grid, c.mc.n_paths, c.mc.seed)?;
    let quad = QuadSpec::new(1e-13, 1e-11);
    let z = c.estimator.z_tolerance;
    let mut metrics = Vec::new();
    let mut table = Csv::new("tanaka.csv", &["epsilon", "n", "mean_square_residual", "std_error"]);
    for &e in &c.estimator.eps {
        let eps = MollifierParam::new(e)?;
        let lt = weighted_local_time(&ens, x, eps)?;
        let exact = mollified_local_time_mean(&p, c.grid.t, x, e, &quad)?;
        metrics.push(Metric::within_se(format!("local_time_mean.eps{e}"), &lt.mean, exact, z));
        let mut prev: Option<MeanEstimate> = None;
        let mut increases = 0usize;
        for &n in &c.estimator.resolutions {
            let sub = ens.subsample(c.grid.n / n)?;
            let res = tanaka_residual(&sub, x, eps)?.residual;
            metrics.push(Metric::info(format!("tanaka_residual.eps{e}.n{n}"), res.mean, Some(res.std_error)));
            table.push(vec![num(e), n.to_string(), num(res.mean), num(res.std_error)]);
            if let Some(pr) = prev {
                if res.mean > pr.mean {
                    increases += 1;
                }
            }
            prev = Some(res);
        }
        if c.estimator.resolutions.len() > 1 {
            metrics.push(Metric::checked(format!("tanaka_residual_increases.eps{e}"), increases as f64, None, 0.0, 0.0));
        }
    }
    Ok(Outcome { metrics, tables: vec![table], ensemble: None })
}

fn run_chaos(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let n_max = c.estimator.truncation;
    let x = &c.estimator.levels;
    let series = if mp.dims() == 1 {
        ChaosSeries::local_time(&mp.component(0), c.grid.t, x[0], n_max)?
    } else {
        ChaosSeries::weighted(&mp, c.grid.t, x, c.estimator.theta.unwrap_or(0.0), n_max)?
    };
    let a = series.norms()?;
    let sums = series.partial_sums()?;
    let mut metrics = Vec::new();
    let mut table = Csv::new("chaos_norms.csv", &["order", "norm", "partial_sum"]);
    for (n, (v, s)) in a.iter().zip(&sums).enumerate() {
        table.push(vec![n.to_string(), num(*v), num(*s)]);
    }
    if x.iter().all(|v| *v == 0.0) {
        let odd = a.iter().skip(1).step_by(2).fold(0.0f64, |m, v| m.max(v.abs()));
        metrics.push(Metric::checked("odd_order_max_abs", odd, None, 0.0, 0.0));
    }
    let truncated = *sums.last().expect("truncation >= 20");
    if mp.dims() == 1 {
        let exact = local_time_second_moment(&mp.component(0), c.grid.t, x[0], 0.0, &QuadSpec::new(1e-12, 1e-10))?;
        metrics.push(Metric::checked(
            format!("truncated_second_moment.n{n_max}"),
            truncated,
            None,
            exact,
            c.estimator.rel_tolerance * exact,
        ));
    } else {
        metrics.push(Metric::info(format!("truncated_second_moment.n{n_max}"), truncated, None));
    }
    let fit = tail_exponent_estimate(&a, FitRange::new(10, n_max, 2))?;
    let threshold = WatanabeIndex::threshold_for(&mp);
    metrics.push(Metric::info("tail_slope", fit.slope, Some(fit.std_error)));
    metrics.push(Metric::checked("watanabe_boundary", fit.alpha_boundary, Some(fit.std_error), threshold, 0.3));
    for &alpha in &c.estimator.alpha {
        let partial = watanabe_partial_norm(&WatanabeIndex::new(&mp, alpha), &a, n_max)?;
        metrics.push(Metric::info(format!("watanabe_partial_norm.alpha{alpha}"), partial[n_max], None));
    }
    Ok(Outcome { metrics, tables: vec![table], ensemble: None })
}

fn run_potential(c: &ExperimentConfig) -> Result<Outcome> {
    let mp = c.multi_params()?;
    let d = mp.dims();
    let theta = c.estimator.theta.expect("validated");
    let spec = PotentialSpec::new(&mp, theta, &c.estimator.levels)?;
    let mut metrics = Vec::new();

    let mut harm = 0.0f64;
    for r in [0.5, 1.0, 2.0] {
        let mut z = vec![0.0; d];
        z[0] = 0.6 * r;
        z[1] = 0.8 * r;
        harm = harm.max(harmonicity_residual(d, &z)?);
    }
    metrics.push(Metric::checked("harmonicity_max", harm, None, 0.0, 1e-6));

    if d <= 3 {
        let a = spec.scaling(0.5);
        let mut z = vec![0.0; d];
        z[0] = 0.6 / a[0];
        z[1] = 0.8 / a[1];
        let eps = c.estimator.eps.first().copied().unwrap_or(0.1);
        let check = laplace_identity_residual(d, &a, eps, &z)?;
        metrics.push(Metric::checked("laplace_identity_relative", check.relative, None, 0.0, 1e-3));
    }

    let mut fd_err = 0.0f64;
    for (s, z) in envelope_samples(&spec, c.grid.t, 20, c.mc.seed) {
        let der = u_bar_derivatives(&spec, s, &z)?;
        let f = |s: f64, z: &[f64]| u_bar(&spec, s, z);
        let hs = 1e-6 * s;
        let fds = (f(s + hs, &z)? - f(s - hs, &z)?) / (2.0 * hs);
        fd_err = fd_err.max((fds - der.ds).abs() / der.ds.abs().max(1e-3));
        for i in 0..d {
            let h = 1e-6 * z[i].abs().max(0.1);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let g = (f(s, &zp)? - f(s, &zm)?) / (2.0 * h);
            fd_err = fd_err.max((g - der.grad[i]).abs() / der.grad[i].abs().max(1e-3));
        }
    }
    metrics.push(Metric::checked("derivative_fd_relative", fd_err, None, 0.0, 1e-5));

    if mp.require_strictly_supercritical().is_ok() {
        let quad = QuadSpec::new(1e-13, 1e-12);
        let mut worst = 0.0f64;
        for tf in [TimeTestFunction::sum_squares(d), TimeTestFunction::time(d), TimeTestFunction::product_cos(d)] {
            worst = worst.max(multidim_ito_residual(&mp, &tf, c.grid.t, &quad)?);
        }
        metrics.push(Metric::checked("multidim_ito_residual_max", worst, None, 0.0, 1e-6));
    }

    let env = envelope_checks(&spec, &envelope_samples(&spec, c.grid.t, 1000, c.mc.seed))?;
    metrics.push(Metric::info("envelope.gradient", env.gradient, None));
    metrics.push(Metric::info("envelope.gradient_rescaled", env.gradient_rescaled, None));
    metrics.push(Metric::info("envelope.time_derivative", env.time_derivative, None));
    metrics.push(Metric::info("envelope.value", env.value, None));

    let mut tables = Vec::new();
    if c.mc.n_paths > 0 {
        let grid = TimeGrid::uniform(c.grid.t, c.grid.n)?;
        let src = StreamedEnsemble::new(&mp, &grid, c.mc.n_paths, c.mc.seed)?;
        let rep = mollified_multidim_tanaka(&src, &spec, c.estimator.eps[0], &c.estimator.resolutions)?;
        let mut table = Csv::new("multidim_tanaka.csv", &["n", "mean_square_residual", "std_error"]);
        let mut increases = 0usize;
        for (k, (n, est)) in rep.residuals.iter().enumerate() {
            metrics.push(Metric::info(format!("tanaka_residual.n{n}"), est.mean, Some(est.std_error)));
            table.push(vec![n.to_string(), num(est.mean), num(est.std_error)]);
            if k > 0 && est.mean > rep.residuals[k - 1].1.mean {
                increases += 1;
            }
        }
        metrics.push(Metric::checked("tanaka_residual_increases", increases as f64, None, 0.0, 0.0));
        metrics.push(Metric::info("boundary_limit", rep.boundary.limit, None));
        metrics.push(Metric::within_se("second_order_mean_vs_chaos", &rep.second_order, rep.second_order_chaos, c.estimator.z_tolerance));
        tables.push(table);
    }
    Ok(Outcome { metrics, tables, ensemble: None })
}

/// JSON schema of the version-1 report.
pub fn report_schema() -> Value {
    json!({
        "$schema": "http://json-schema.org/draft-07/schema#",
        "$id": "bifbm-report/v1",
        "type": "object",
        "required": ["schema", "schema_version", "library_version", "kind", "seed", "config", "metrics", "all_pass", "artifacts", "runtime_seconds"],
        "properties": {
            "schema": {"const": "bifbm-report/v1"},
            "schema_version": {"const": 1},
            "library_version": {"type": "string"},
            "kind": {"enum": list_experiments()},
            "seed": {"type": "integer", "minimum": 0},
            "config": {"type": "object", "required": ["schema_version", "kind", "params", "grid", "mc", "estimator", "output"]},
            "metrics": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["name", "estimate", "std_error", "target", "tolerance", "pass"],
                    "properties": {
                        "name": {"type": "string"},
                        "estimate": {"type": ["number", "null"]},
                        "std_error": {"type": ["number", "null"]},
                        "target": {"type": ["number", "null"]},
                        "tolerance": {"type": ["number", "null"]},
                        "pass": {"type": "boolean"}
                    }
                }
            },
            "all_pass": {"type": "boolean"},
            "artifacts": {"type": "array", "items": {"type": "string"}},
            "runtime_seconds": {"type": "number", "minimum": 0}
        }
    })
}

/// Checks a report document against [`report_schema`] and the pass-flag rule.
pub fn validate_report(doc: &Value) -> Result<()> {
    let mut bad = Vec::new();
    let obj = match doc.as_object() {
        Some(o) => o,
        None => return Err(Error::Config(vec!["report is not a JSON object".into()])),
    };
    let schema = report_schema();
    for key in schema["required"].as_array().expect("schema lists required keys") {
        let key = key.as_str().expect("string keys");
        if !obj.contains_key(key) {
            bad.push(format!("missing field '{key}'"));
        }
    }
    if obj.get("schema").and_then(Value::as_str) != Some("bifbm-report/v1") {
        bad.push("schema must be 'bifbm-report/v1'".into());
    }
    if obj.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION as u64) {
        bad.push(format!("schema_version must be {SCHEMA_VERSION}"));
    }
    if let Some(k) = obj.get("kind") {
        if !k.as_str().is_some_and(|k| list_experiments().contains(&k)) {
            bad.push(format!("unknown kind {k}"));
        }
    }
    if obj.get("seed").is_some_and(|s| s.as_u64().is_none()) {
        bad.push("seed must be a nonnegative integer".into());
    }
    if obj.get("runtime_seconds").is_some_and(|r| !r.as_f64().is_some_and(|r| r >= 0.0)) {
        bad.push("runtime_seconds must be a nonnegative number".into());
    }
    if let Some(cfg) = obj.get("config") {
        for key in ["schema_version", "kind", "params", "grid", "mc", "estimator", "output"] {
            if cfg.get(key).is_none() {
                bad.push(format!("config is missing '{key}'"));
            }
        }
    }
    let opt_num = |v: Option<&Value>| -> std::result::Result<Option<f64>, ()> {
        match v {
            Some(Value::Null) => Ok(None),
            Some(x) => x.as_f64().map(Some).ok_or(()),
            None => Err(()),
        }
    };
    let mut all = true;
    match obj.get("metrics").and_then(Value::as_array) {
        Some(ms) => {
            for (i, m) in ms.iter().enumerate() {
                let name = m.get("name").and_then(Value::as_str).unwrap_or("?");
                let pass = m.get("pass").and_then(Value::as_bool);
                let fields = (opt_num(m.get("estimate")), opt_num(m.get("std_error")), opt_num(m.get("target")), opt_num(m.get("tolerance")));
                match (pass, fields) {
                    (Some(pass), (Ok(est), Ok(_), Ok(target), Ok(tol))) => {
                        let derived = match (target, tol) {
                            (Some(t), Some(tol)) => est.is_some_and(|e| (e - t).abs() <= tol),
                            _ => true,
                        };
                        if derived != pass {
                            bad.push(format!("metric {i} ({name}): pass flag {pass} is not derivable from its fields"));
                        }
                        all &= pass;
                    }
                    _ => bad.push(format!("metric {i} ({name}) is malformed")),
                }
            }
        }
        None => bad.push("metrics must be an array".into()),
    }
    if obj.get("all_pass").and_then(Value::as_bool) != Some(all) {
        bad.push("all_pass disagrees with the metric pass flags".into());
    }
    if obj.get("artifacts").is_some_and(|a| !a.as_array().is_some_and(|a| a.iter().all(Value::is_string))) {
        bad.push("artifacts must be an array of strings".into());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad))
    }
}
