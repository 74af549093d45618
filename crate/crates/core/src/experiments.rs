//! Run configuration, nondimensionalization and the charging, cyclic
//! voltammetry and accuracy drivers.
//!
//! A configuration is a TOML file: top-level run keys plus the sections
//! `geometry`, `model`, `physical` (optional), `boundary`, `accuracy` and
//! `solver`. Unknown keys are rejected. Every run writes `manifest.toml`,
//! the fully resolved configuration, which reproduces the run when fed back.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{section_current, write_snapshot, DiagnosticsError, DiagnosticsRecord, TimeSeriesWriter};
use crate::mesh::{build_mesh, BoundaryPart, GeometrySpec, Mesh, MeshError, PotentialTag};
use crate::mms::{level_sizes, run_convergence_study, write_convergence_csv, ConvergenceRow};
use crate::model::{initial_state, ModelParams, PotentialBoundary, Problem, SchemeError, State, StepConfig};
use crate::operators::{BoundaryData, BoundaryValue, GridFunction};
use crate::par;
use crate::stepper::{SchemeKind, Stepper};

const BOLTZMANN: f64 = 1.380649e-23;
const ELEMENTARY_CHARGE: f64 = 1.602176634e-19;
const AVOGADRO: f64 = 6.02214076e23;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("physical constant `{0}` must be positive")]
    NonpositiveConstant(&'static str),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failure at t = {t}: {source}")]
    Solver { t: f64, source: SchemeError },
    #[error("output error: {0}")]
    Output(String),
}

impl RunError {
    /// Process exit status: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

impl From<DiagnosticsError> for RunError {
    fn from(e: DiagnosticsError) -> Self {
        RunError::Output(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Output(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Accuracy,
    Charging,
    Cv,
}

/// Dimensionless model coefficients and the uniform initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub valences: Vec<i32>,
    pub viscosities: Vec<f64>,
    pub eps: f64,
    pub conductivity: f64,
    pub heat_capacity: f64,
    pub fixed_charge: f64,
    pub initial_concentrations: Vec<f64>,
    pub initial_temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            valences: vec![1, -1],
            viscosities: vec![1.0, 1.0],
            eps: 0.1,
            conductivity: 1.0,
            heat_capacity: 1.0,
            fixed_charge: 0.0,
            initial_concentrations: vec![1.0, 1.0],
            initial_temperature: 1.0,
        }
    }
}

/// Dimensional inputs in SI units, except concentrations in mol/L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalSection {
    pub temperature: f64,
    pub concentration: f64,
    pub length: f64,
    pub vacuum_permittivity: f64,
    pub relative_permittivity: f64,
    pub reference_viscosity: f64,
    /// Friction coefficients of the species, J s / m^2.
    pub viscosities: Vec<f64>,
    /// Thermal conductivity, W / (m K).
    pub conductivity: f64,
    /// Volumetric heat capacity expressed as a concentration, mol/L.
    pub heat_capacity: f64,
}

impl Default for PhysicalSection {
    fn default() -> Self {
        PhysicalSection {
            temperature: 300.0,
            concentration: 0.2,
            length: 10e-9,
            vacuum_permittivity: 8.85e-12,
            relative_permittivity: 80.0,
            reference_viscosity: 4.14e-10,
            viscosities: vec![4.14e-10, 4.14e-10],
            conductivity: 1.20e-4,
            heat_capacity: 38.8,
        }
    }
}

/// Characteristic scales of a nondimensionalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scales {
    pub debye_length: f64,
    pub time: f64,
    pub current: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimensionless {
    pub eps: f64,
    pub conductivity: f64,
    pub heat_capacity: f64,
    pub viscosities: Vec<f64>,
    pub scales: Scales,
}

pub fn nondimensionalize(p: &PhysicalSection) -> Result<Dimensionless, ConfigError> {
    let checks = [
        ("temperature", p.temperature),
        ("concentration", p.concentration),
        ("length", p.length),
        ("vacuum_permittivity", p.vacuum_permittivity),
        ("relative_permittivity", p.relative_permittivity),
        ("reference_viscosity", p.reference_viscosity),
        ("conductivity", p.conductivity),
        ("heat_capacity", p.heat_capacity),
    ];
    for (name, v) in checks {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError::NonpositiveConstant(name));
        }
    }
    if p.viscosities.is_empty() || p.viscosities.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(ConfigError::NonpositiveConstant("viscosities"));
    }
    // number density of the reference concentration, 1/m^3
    let n0 = p.concentration * 1e3 * AVOGADRO;
    let kt = BOLTZMANN * p.temperature;
    let debye_length =
        (p.vacuum_permittivity * p.relative_permittivity * kt / (ELEMENTARY_CHARGE * ELEMENTARY_CHARGE * n0)).sqrt();
    let time = debye_length * p.length * p.reference_viscosity / kt;
    Ok(Dimensionless {
        eps: debye_length / p.length,
        conductivity: time * p.conductivity / (BOLTZMANN * n0 * p.length * p.length),
        heat_capacity: p.heat_capacity / p.concentration,
        viscosities: p.viscosities.iter().map(|v| v / p.reference_viscosity).collect(),
        scales: Scales {
            debye_length,
            time,
            current: kt * n0 / (p.reference_viscosity * p.length),
            entropy: BOLTZMANN * n0 * p.length * p.length,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySection {
    /// Applied voltage of the constant protocol.
    pub voltage: f64,
    pub scan_rates: Vec<f64>,
    pub v_max: f64,
    pub cycles: usize,
    /// Abscissa of the section through which the current is measured;
    /// the middle of the box when absent.
    pub section_x: Option<f64>,
}

impl Default for BoundarySection {
    fn default() -> Self {
        BoundarySection {
            voltage: 2.0,
            scan_rates: vec![0.05, 0.1, 0.2],
            v_max: 2.0,
            cycles: 3,
            section_x: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccuracySection {
    pub levels: usize,
    pub t_end: f64,
    /// Fixed step for every level instead of the scheme's step rule.
    pub fixed_dt: Option<f64>,
}

impl Default for AccuracySection {
    fn default() -> Self {
        AccuracySection { levels: 4, t_end: 0.1, fixed_dt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub scheme: SchemeKind,
    pub dt: f64,
    #[serde(default)]
    pub t_end: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_snapshot_times")]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physical: Option<PhysicalSection>,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub accuracy: AccuracySection,
    #[serde(default)]
    pub solver: StepConfig,
}

fn default_output_dir() -> String {
    "out".into()
}

fn default_snapshot_times() -> Vec<f64> {
    vec![0.0, 0.1, 1.0, 30.0]
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| ConfigError::Override(key.into()))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{p}` in override `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides; dotted keys address sections and the
/// value is read as TOML, falling back to a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(o.clone()));
        }
        let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.trim().into())),
            Err(_) => toml::Value::String(raw.trim().into()),
        };
        set_path(table, key, value)?;
    }
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.resolved()
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    parse_config(&text, overrides)
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Converts the physical block, if any, into the model coefficients
    /// and validates the result.
    pub fn resolved(mut self) -> Result<RunConfig, ConfigError> {
        if let Some(p) = &self.physical {
            let d = nondimensionalize(p)?;
            self.model.eps = d.eps;
            self.model.conductivity = d.conductivity;
            self.model.heat_capacity = d.heat_capacity;
            self.model.viscosities = d.viscosities;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("dt", self.dt)?;
        let m = &self.model;
        let species = m.valences.len();
        if species == 0 || m.viscosities.len() != species || m.initial_concentrations.len() != species {
            return Err(ConfigError::Invalid(
                "model.valences, model.viscosities and model.initial_concentrations need one entry per species".into(),
            ));
        }
        for &c in &m.initial_concentrations {
            positive("initial concentration", c)?;
        }
        for &v in &m.viscosities {
            positive("viscosity", v)?;
        }
        positive("model.eps", m.eps)?;
        positive("model.conductivity", m.conductivity)?;
        positive("model.heat_capacity", m.heat_capacity)?;
        positive("model.initial_temperature", m.initial_temperature)?;
        match self.experiment {
            ExperimentKind::Accuracy => {
                if self.accuracy.levels < 3 {
                    return Err(ConfigError::Invalid("accuracy.levels must be at least 3".into()));
                }
                positive("accuracy.t_end", self.accuracy.t_end)?;
                if let Some(dt) = self.accuracy.fixed_dt {
                    positive("accuracy.fixed_dt", dt)?;
                }
            }
            ExperimentKind::Charging => {
                positive("t_end", self.t_end)?;
                build_mesh(&self.geometry)?;
            }
            ExperimentKind::Cv => {
                if self.boundary.scan_rates.is_empty() {
                    return Err(ConfigError::Invalid("boundary.scan_rates is empty".into()));
                }
                for &nu in &self.boundary.scan_rates {
                    positive("scan rate", nu)?;
                }
                positive("boundary.v_max", self.boundary.v_max)?;
                if self.boundary.cycles == 0 {
                    return Err(ConfigError::Invalid("boundary.cycles must be at least 1".into()));
                }
                build_mesh(&self.geometry)?;
            }
        }
        Ok(())
    }

    /// Resolved configuration as TOML, headed by the code version.
    pub fn manifest(&self) -> String {
        let body = toml::to_string(self).expect("configuration serializes");
        format!("# pnpf {}\n{body}", env!("CARGO_PKG_VERSION"))
    }

    pub fn model_params(&self, mesh: &Mesh) -> ModelParams {
        ModelParams {
            valences: self.model.valences.clone(),
            viscosities: self.model.viscosities.clone(),
            eps: self.model.eps,
            conductivity: self.model.conductivity,
            heat_capacity: self.model.heat_capacity,
            fixed_charge: GridFunction::constant(mesh, self.model.fixed_charge),
        }
    }

    fn section_x(&self) -> f64 {
        self.boundary.section_x.unwrap_or(0.5 * (self.geometry.x_min + self.geometry.x_max))
    }
}

/// Triangular voltage sweep between 0 and `v_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvProtocol {
    pub scan_rate: f64,
    pub v_max: f64,
    pub cycles: usize,
}

impl CvProtocol {
    pub fn half_period(&self) -> f64 {
        self.v_max / self.scan_rate
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.cycles as f64 * self.half_period()
    }
}

pub fn cv_voltage(t: f64, p: &CvProtocol) -> f64 {
    let t0 = p.half_period();
    let s = t.rem_euclid(2.0 * t0);
    if s <= t0 {
        p.scan_rate * s
    } else {
        p.v_max - p.scan_rate * (s - t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    Constant(f64),
    Cv(CvProtocol),
}

impl Protocol {
    pub fn voltage(&self, t: f64) -> f64 {
        match self {
            Protocol::Constant(v) => *v,
            Protocol::Cv(p) => cv_voltage(t, p),
        }
    }
}

/// Applied voltage on the right electrode (or right side), ground on the
/// left one, zero surface charge on the remaining Neumann faces.
pub struct ElectrodeBoundary {
    pub protocol: Protocol,
}

impl PotentialBoundary for ElectrodeBoundary {
    fn data(&self, mesh: &Mesh, t: f64) -> BoundaryData {
        let v = self.protocol.voltage(t);
        BoundaryData::from_fn(mesh, |_, e| match (e.tag(), e.part) {
            (Some(PotentialTag::Dirichlet), Some(BoundaryPart::HighElectrode | BoundaryPart::Right)) => {
                BoundaryValue::Dirichlet(v)
            }
            (Some(PotentialTag::Dirichlet), _) => BoundaryValue::Dirichlet(0.0),
            _ => BoundaryValue::Neumann(0.0),
        })
    }
}

/// One accepted step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub diagnostics: DiagnosticsRecord,
    /// Entropy production of the step times its length.
    pub production: f64,
    /// Time at which the step fluxes are centered.
    pub flux_time: f64,
    pub voltage: f64,
    /// Current from the biased electrode toward the grounded one.
    pub current: f64,
    pub substeps: usize,
    pub fallback_used: bool,
}

/// Trajectory with the initial record first.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_state: State,
}

struct Outputs {
    dir: PathBuf,
    series: TimeSeriesWriter<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Integrates `steps` steps of size `dt` under `protocol` from the uniform
/// initial state, writing time series and snapshots under `out` if given.
pub fn simulate(
    cfg: &RunConfig,
    protocol: Protocol,
    dt: f64,
    steps: usize,
    out: Option<&Path>,
) -> Result<Trajectory, RunError> {
    let mesh = build_mesh(&cfg.geometry).map_err(ConfigError::from)?;
    let params = cfg.model_params(&mesh);
    let boundary = ElectrodeBoundary { protocol };
    let problem = Problem { mesh: &mesh, params: &params, boundary: &boundary, forcing: None };
    let species = params.species();
    let conc = cfg.model.initial_concentrations.iter().map(|&c| GridFunction::constant(&mesh, c)).collect();
    let temp = GridFunction::constant(&mesh, cfg.model.initial_temperature);
    let solver_err = |t: f64| move |source: SchemeError| RunError::Solver { t, source };
    let mut state = initial_state(&problem, conc, temp, 0.0, &cfg.solver.linear).map_err(solver_err(0.0))?;
    let x0 = cfg.section_x();
    let mut outputs = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let series = TimeSeriesWriter::new(create(&dir.join("timeseries.csv"))?, species)?;
            Some(Outputs { dir: dir.to_path_buf(), series })
        }
        None => None,
    };
    // snapshots are taken at the first level within half a step of the request
    let mut pending: Vec<(usize, f64)> = cfg.snapshot_times.iter().copied().enumerate().collect();
    let mut snapshot = |outputs: &mut Option<Outputs>, state: &State| -> Result<(), RunError> {
        let Some(o) = outputs else { return Ok(()) };
        for &(k, _) in pending.iter().filter(|&&(_, ts)| ts <= state.t + 0.5 * dt) {
            write_snapshot(&mesh, state, create(&o.dir.join(format!("snapshot_{k}.csv")))?)?;
        }
        pending.retain(|&(_, ts)| ts > state.t + 0.5 * dt);
        Ok(())
    };

    let first = DiagnosticsRecord::new(&mesh, &params, &state, 0.0, 0.0)?;
    if let Some(o) = outputs.as_mut() {
        o.series.write(&first)?;
    }
    snapshot(&mut outputs, &state)?;
    let mut records = vec![StepRecord {
        diagnostics: first,
        production: 0.0,
        flux_time: 0.0,
        voltage: protocol.voltage(0.0),
        current: 0.0,
        substeps: 1,
        fallback_used: false,
    }];
    let mut stepper = Stepper::new(cfg.scheme, &mesh, species, cfg.solver);
    let mut section_ok = true;
    for k in 0..steps {
        let t_old = state.t;
        let outcome = stepper.step(&problem, &state, dt).map_err(solver_err(t_old))?;
        state = outcome.state;
        state.t = (k + 1) as f64 * dt;
        let flux_time = match cfg.scheme {
            SchemeKind::I => state.t,
            SchemeKind::II => t_old + 0.5 * dt,
        };
        let current = if section_ok {
            match section_current(&mesh, &outcome.fluxes, &params.valences, x0) {
                Ok(i) => -i,
                Err(e) => {
                    warn!("{e}; current is not recorded");
                    section_ok = false;
                    f64::NAN
                }
            }
        } else {
            f64::NAN
        };
        if outcome.substeps > 1 {
            info!("t = {:.6e}: step split into {} substeps", state.t, outcome.substeps);
        }
        let rec = DiagnosticsRecord::new(&mesh, &params, &state, outcome.production / dt, current)?;
        if let Some(o) = outputs.as_mut() {
            o.series.write(&rec)?;
        }
        snapshot(&mut outputs, &state)?;
        records.push(StepRecord {
            diagnostics: rec,
            production: outcome.production,
            flux_time,
            voltage: protocol.voltage(flux_time),
            current,
            substeps: outcome.substeps,
            fallback_used: outcome.fallback_used,
        });
    }
    if let Some(o) = outputs.as_mut() {
        o.series.flush()?;
        let mut iv = csv::Writer::from_writer(create(&o.dir.join("iv.csv"))?);
        iv.write_record(["t", "V", "I"]).map_err(|e| RunError::Output(e.to_string()))?;
        for r in &records[1..] {
            iv.write_record([r.flux_time.to_string(), r.voltage.to_string(), r.current.to_string()])
                .map_err(|e| RunError::Output(e.to_string()))?;
        }
        iv.flush()?;
    }
    Ok(Trajectory { records, final_state: state })
}

fn steps_for(t_end: f64, dt: f64) -> usize {
    (t_end / dt - 1e-9).ceil().max(1.0) as usize
}

fn write_manifest(cfg: &RunConfig, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.toml"), cfg.manifest())?;
    Ok(())
}

/// Constant-voltage charging; `dt` is reduced so that it divides `t_end`.
pub fn run_charging(cfg: &RunConfig, out: Option<&Path>) -> Result<Trajectory, RunError> {
    let steps = steps_for(cfg.t_end, cfg.dt);
    let dt = cfg.t_end / steps as f64;
    if let Some(dir) = out {
        write_manifest(cfg, dir)?;
    }
    simulate(cfg, Protocol::Constant(cfg.boundary.voltage), dt, steps, out)
}

/// Per-cycle results of one scan rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleSummary {
    pub cycle: usize,
    /// Enclosed area of the current-voltage loop.
    pub loop_area: f64,
    pub ds2_charging: f64,
    pub ds2_discharging: f64,
    pub mean_dt_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSummary {
    pub scan_rate: f64,
    pub dt: f64,
    /// Least-squares slope of the mean temperature rise sampled at the end
    /// of every cycle (and at the start) against time.
    pub chi: f64,
    pub cycles: Vec<CycleSummary>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub scans: Vec<ScanSummary>,
    pub trajectories: Vec<Trajectory>,
    /// Least-squares slope of log chi against log scan rate.
    pub chi_slope: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Area enclosed by the closed polygon through `(v, i)`.
pub fn loop_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n)
        .map(|k| {
            let (a, b) = (points[k], points[(k + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    0.5 * twice.abs()
}

/// Steps per half period and the matching step for a requested `dt`.
pub fn cv_step(p: &CvProtocol, dt: f64) -> (usize, f64) {
    let per_half = steps_for(p.half_period(), dt);
    (per_half, p.half_period() / per_half as f64)
}

pub fn summarize_scan(p: &CvProtocol, dt: f64, per_half: usize, traj: &Trajectory) -> ScanSummary {
    let recs = &traj.records;
    let s2 = |k: usize| recs[k].diagnostics.entropy.ionic;
    let mut cycles = Vec::with_capacity(p.cycles);
    let mut ends_t = vec![0.0];
    let mut ends_dt = vec![recs[0].diagnostics.mean_dt];
    for c in 0..p.cycles {
        let start = 2 * c * per_half;
        let mid = start + per_half;
        let end = mid + per_half;
        let pts: Vec<(f64, f64)> = recs[start + 1..=end].iter().map(|r| (r.voltage, r.current)).collect();
        cycles.push(CycleSummary {
            cycle: c + 1,
            loop_area: loop_area(&pts),
            ds2_charging: s2(mid) - s2(start),
            ds2_discharging: s2(end) - s2(mid),
            mean_dt_end: recs[end].diagnostics.mean_dt,
        });
        ends_t.push(recs[end].diagnostics.t);
        ends_dt.push(recs[end].diagnostics.mean_dt);
    }
    ScanSummary { scan_rate: p.scan_rate, dt, chi: fit_slope(&ends_t, &ends_dt), cycles }
}

/// Cyclic voltammetry at every configured scan rate; the runs are
/// independent and execute concurrently, each in `out/nu_<k>`.
pub fn run_cv(cfg: &RunConfig, out: Option<&Path>) -> Result<CvResult, RunError> {
    if let Some(dir) = out {
        write_manifest(cfg, dir)?;
    }
    let b = &cfg.boundary;
    let protocols: Vec<(usize, CvProtocol)> = b
        .scan_rates
        .iter()
        .enumerate()
        .map(|(k, &scan_rate)| (k, CvProtocol { scan_rate, v_max: b.v_max, cycles: b.cycles }))
        .collect();
    let runs = par::map_slice(&protocols, |&(k, p)| {
        let (per_half, dt) = cv_step(&p, cfg.dt);
        let sub = out.map(|d| d.join(format!("nu_{k}")));
        let traj = simulate(cfg, Protocol::Cv(p), dt, 2 * per_half * p.cycles, sub.as_deref())?;
        let halvings: usize = traj.records.iter().filter(|r| r.substeps > 1).count();
        if halvings > 0 {
            warn!("scan rate {}: {halvings} steps needed time step halving", p.scan_rate);
        }
        Ok::<_, RunError>((summarize_scan(&p, dt, per_half, &traj), traj))
    });
    let mut scans = Vec::new();
    let mut trajectories = Vec::new();
    for r in runs {
        let (s, t) = r?;
        scans.push(s);
        trajectories.push(t);
    }
    let lx: Vec<f64> = scans.iter().map(|s| s.scan_rate.ln()).collect();
    let ly: Vec<f64> = scans.iter().map(|s| s.chi.ln()).collect();
    let chi_slope = if scans.len() >= 2 { fit_slope(&lx, &ly) } else { f64::NAN };
    if let Some(dir) = out {
        write_cv_summary(&scans, chi_slope, dir)?;
    }
    Ok(CvResult { scans, trajectories, chi_slope })
}

fn write_cv_summary(scans: &[ScanSummary], chi_slope: f64, dir: &Path) -> Result<(), RunError> {
    let err = |e: csv::Error| RunError::Output(e.to_string());
    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    w.write_record(["nu", "dt", "chi", "cycle", "loop_area", "dS2_charging", "dS2_discharging", "mean_dT_end"])
        .map_err(err)?;
    for s in scans {
        for c in &s.cycles {
            w.write_record([
                s.scan_rate.to_string(),
                s.dt.to_string(),
                s.chi.to_string(),
                c.cycle.to_string(),
                c.loop_area.to_string(),
                c.ds2_charging.to_string(),
                c.ds2_discharging.to_string(),
                c.mean_dt_end.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush()?;
    let mut f = csv::Writer::from_writer(create(&dir.join("chi_fit.csv"))?);
    f.write_record(["slope"]).map_err(err)?;
    f.write_record([chi_slope.to_string()]).map_err(err)?;
    f.flush()?;
    Ok(())
}

pub fn run_accuracy(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<ConvergenceRow>, RunError> {
    let a = &cfg.accuracy;
    let rows = run_convergence_study(cfg.scheme, &level_sizes(a.levels), a.fixed_dt, a.t_end, &cfg.solver)
        .map_err(|source| RunError::Solver { t: f64::NAN, source })?;
    if let Some(dir) = out {
        write_manifest(cfg, dir)?;
        write_convergence_csv(&rows, create(&dir.join("convergence.csv"))?)
            .map_err(|e| RunError::Output(e.to_string()))?;
    }
    Ok(rows)
}

/// Runs the configured experiment with outputs under `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<(), RunError> {
    match cfg.experiment {
        ExperimentKind::Accuracy => run_accuracy(cfg, Some(out)).map(|_| ()),
        ExperimentKind::Charging => run_charging(cfg, Some(out)).map(|_| ()),
        ExperimentKind::Cv => run_cv(cfg, Some(out)).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static str {
        "experiment = \"charging\"\nscheme = \"I\"\ndt = 0.01\nt_end = 0.05\n\
         [geometry]\nkind = \"electrode-comb\"\nnx = 16\nny = 8\nx_min = -1.0\nx_max = 1.0\n\
         teeth = 1\ntooth_width = 0.125\ntooth_depth = 0.5\ngap_half_width = 0.25\n"
    }

    #[test]
    fn debye_length_of_reference_electrolyte() {
        let d = nondimensionalize(&PhysicalSection::default()).unwrap();
        assert!((d.scales.debye_length - 0.974e-9).abs() < 0.005e-9);
        assert!((d.heat_capacity - 194.0).abs() < 1e-9);
        assert_eq!(d.viscosities, vec![1.0, 1.0]);
    }

    #[test]
    fn length_equal_to_debye_length_gives_unit_eps() {
        let p = PhysicalSection::default();
        let lambda = nondimensionalize(&p).unwrap().scales.debye_length;
        let d = nondimensionalize(&PhysicalSection { length: lambda, ..p }).unwrap();
        assert!((d.eps - 1.0).abs() < 1e-14);
    }

    #[test]
    fn doubling_concentration_halves_heat_capacity() {
        let p = PhysicalSection::default();
        let a = nondimensionalize(&p).unwrap().heat_capacity;
        let b = nondimensionalize(&PhysicalSection { concentration: 0.4, ..p }).unwrap().heat_capacity;
        assert!((a - 2.0 * b).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_constant_is_rejected() {
        let p = PhysicalSection { temperature: 0.0, ..Default::default() };
        assert!(matches!(nondimensionalize(&p), Err(ConfigError::NonpositiveConstant("temperature"))));
    }

    #[test]
    fn triangle_wave() {
        let p = CvProtocol { scan_rate: 0.5, v_max: 25.0, cycles: 2 };
        let t0 = p.half_period();
        assert_eq!(cv_voltage(0.0, &p), 0.0);
        assert_eq!(cv_voltage(t0, &p), 25.0);
        assert_eq!(cv_voltage(2.0 * t0, &p), 0.0);
        for t in [0.3, 11.0, 57.5, 70.0] {
            assert!((cv_voltage(t + 2.0 * t0, &p) - cv_voltage(t, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{}bogus = 1\n", base());
        assert!(matches!(parse_config(&text, &[]), Err(ConfigError::Parse(_))));
        let text = format!("{}[model]\nepsilon = 1\n", base());
        assert!(matches!(parse_config(&text, &[]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn overrides_reach_sections() {
        let cfg = parse_config(base(), &["model.eps=0.5".into(), "dt=0.02".into(), "scheme=II".into()]).unwrap();
        assert_eq!(cfg.model.eps, 0.5);
        assert_eq!(cfg.dt, 0.02);
        assert_eq!(cfg.scheme, SchemeKind::II);
        assert!(matches!(parse_config(base(), &["noequals".into()]), Err(ConfigError::Override(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(parse_config(base(), &["dt=-1".into()]), Err(ConfigError::Invalid(_))));
        let cv = ["experiment=\"cv\"".to_string(), "boundary.scan_rates=[0.1, 0.0]".into()];
        assert!(matches!(parse_config(base(), &cv), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = parse_config(base(), &["physical.temperature=310".into()]).unwrap();
        let again = parse_config(&cfg.manifest(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn zero_voltage_keeps_neutral_state() {
        let cfg = parse_config(base(), &["boundary.voltage=0".into()]).unwrap();
        let traj = run_charging(&cfg, None).unwrap();
        for r in &traj.records {
            assert!(r.diagnostics.mean_dt.abs() < 1e-13);
            assert!(r.current.abs() < 1e-12);
        }
        let s = &traj.final_state;
        assert!(s.conc.iter().all(|c| c.iter().all(|v| (v - 1.0).abs() < 1e-12)));
        assert!(s.temperature.iter().all(|v| (v - 1.0).abs() < 1e-13));
    }

    #[test]
    fn charging_outputs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(base(), &["snapshot_times=[0.0, 0.02]".into()]).unwrap();
        run_experiment(&cfg, &dir.path().join("a")).unwrap();
        let replay = load_config(&dir.path().join("a/manifest.toml"), &[]).unwrap();
        run_experiment(&replay, &dir.path().join("b")).unwrap();
        for f in ["timeseries.csv", "snapshot_0.csv", "snapshot_1.csv", "iv.csv", "manifest.toml"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }
}
