//! Scenario files, engine dispatch, figure presets, sweeps and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, TimeSeries};
use crate::dynamics::{self, JumpChannel, KerrTerm};
use crate::error::Error;
use crate::fock::{DensityMatrix, FockCutoff, PureState, C64};
use crate::integrator::{uniform_grid, IntegratorConfig};
use crate::pauli::{self, PopulationVector};
use crate::trajectories::{self, TrajectoryConfig};
use crate::twomode::{self, TwoModeParams, TwoModeState};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failure of a CLI action, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("scenario `{scenario}`: {source}")]
    Engine {
        scenario: String,
        #[source]
        source: Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation(_) => 2,
            CliError::Engine { source, .. } if source.is_numerical() => 3,
            CliError::Engine { .. } => 2,
            CliError::Io { .. } => 4,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A complex number written either as a plain real or as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexValue {
    Real(f64),
    Pair([f64; 2]),
}

impl ComplexValue {
    pub fn value(&self) -> C64 {
        match *self {
            ComplexValue::Real(re) => C64::new(re, 0.0),
            ComplexValue::Pair([re, im]) => C64::new(re, im),
        }
    }

    fn sort_key(&self) -> (f64, f64) {
        let z = self.value();
        (z.re, z.im)
    }
}

impl From<f64> for ComplexValue {
    fn from(re: f64) -> Self {
        ComplexValue::Real(re)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Dense,
    Pauli,
    Trajectories,
    Twomode,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Dense => "dense",
            Engine::Pauli => "pauli",
            Engine::Trajectories => "trajectories",
            Engine::Twomode => "twomode",
        }
    }
}

/// Channel rates in units of the reference rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub gamma_e: f64,
    pub gamma_q: f64,
    pub gamma_s: f64,
    pub gamma_t: f64,
}

impl Rates {
    pub fn channels(&self) -> Vec<JumpChannel> {
        [
            JumpChannel::effective(self.gamma_e),
            JumpChannel::linear(self.gamma_q),
            JumpChannel::two_photon(self.gamma_s),
            JumpChannel::three_photon(self.gamma_t),
        ]
        .into_iter()
        .filter(|c| c.rate > 0.0)
        .collect()
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("gamma_e", self.gamma_e),
            ("gamma_q", self.gamma_q),
            ("gamma_s", self.gamma_s),
            ("gamma_t", self.gamma_t),
        ]
    }

    fn set(&mut self, field: RateField, value: f64) {
        match field {
            RateField::E => self.gamma_e = value,
            RateField::Q => self.gamma_q = value,
            RateField::S => self.gamma_s = value,
            RateField::T => self.gamma_t = value,
        }
    }

    /// Parses `e=1,q=0.05` style assignments on top of `self`.
    pub fn with_assignments(mut self, spec: &str) -> std::result::Result<Self, String> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("rate assignment `{part}` is not of the form key=value"))?;
            let field = RateField::parse(key.trim())
                .ok_or_else(|| format!("unknown rate `{key}` (expected e, q, s or t)"))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("rate `{part}` has a non-numeric value"))?;
            self.set(field, value);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RateField {
    E,
    Q,
    S,
    T,
}

impl RateField {
    fn parse(key: &str) -> Option<Self> {
        match key {
            "e" | "gamma_e" => Some(RateField::E),
            "q" | "gamma_q" => Some(RateField::Q),
            "s" | "gamma_s" => Some(RateField::S),
            "t" | "gamma_t" => Some(RateField::T),
            _ => None,
        }
    }
}

fn default_dt_max() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySettings {
    pub n_traj: usize,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        Self {
            n_traj: 10_000,
            dt_max: default_dt_max(),
        }
    }
}

fn default_nmax_b() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoModeSettings {
    pub u4: ComplexValue,
    pub gamma_b: f64,
    /// Γa in the effective-rate formula; defaults to Γb.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_a: Option<f64>,
    #[serde(default = "default_nmax_b")]
    pub nmax_b: usize,
}

/// Full description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub alpha: ComplexValue,
    pub nmax: usize,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub u1: f64,
    pub t_max: f64,
    pub samples: usize,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twomode: Option<TwoModeSettings>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: None,
            alpha: ComplexValue::Real(3.0),
            nmax: 40,
            rates: Rates::default(),
            u1: 0.0,
            t_max: 100.0,
            samples: 1001,
            engine: Engine::Dense,
            seed: 0,
            integrator: IntegratorConfig::default(),
            trajectory: None,
            twomode: None,
        }
    }
}

impl Scenario {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.engine.name().to_string())
    }

    /// Every violation at once, so a broken file can be fixed in one pass.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let alpha = self.alpha.value();
        if !(alpha.re.is_finite() && alpha.im.is_finite()) {
            v.push("alpha must be finite".into());
        }
        if let Err(e) = FockCutoff::for_coherent(alpha, self.nmax) {
            v.push(format!("nmax: {e}"));
        }
        for (name, rate) in self.rates.named() {
            if !(rate.is_finite() && rate >= 0.0) {
                v.push(format!("rates.{name} must be a finite nonnegative number"));
            }
        }
        let any_rate = self.rates.named().iter().any(|(_, r)| *r > 0.0);
        if self.engine == Engine::Twomode {
            if any_rate {
                v.push("rates do not apply to the twomode engine; mode A is damped only through mode B".into());
            }
            if self.u1 != 0.0 {
                v.push("u1 is not modelled by the twomode engine".into());
            }
        } else if !any_rate {
            v.push("at least one rate must be positive".into());
        }
        if !self.u1.is_finite() {
            v.push("u1 must be finite".into());
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            v.push("t_max must be positive".into());
        }
        if self.samples < 2 {
            v.push("samples must be at least 2".into());
        }
        if let Err(e) = self.integrator.validate() {
            v.push(format!("integrator: {e}"));
        }
        match (self.engine == Engine::Trajectories, &self.trajectory) {
            (true, None) => v.push("engine `trajectories` needs a [trajectory] table".into()),
            (false, Some(_)) => v.push("[trajectory] is only allowed with engine `trajectories`".into()),
            (true, Some(t)) => {
                if t.n_traj == 0 {
                    v.push("trajectory.n_traj must be at least 1".into());
                }
                if !(t.dt_max.is_finite() && t.dt_max > 0.0) {
                    v.push("trajectory.dt_max must be positive".into());
                }
            }
            (false, None) => {}
        }
        match (self.engine == Engine::Twomode, &self.twomode) {
            (true, None) => v.push("engine `twomode` needs a [twomode] table".into()),
            (false, Some(_)) => v.push("[twomode] is only allowed with engine `twomode`".into()),
            (true, Some(_)) => {
                if let Err(e) = self.twomode_params().expect("present").validate() {
                    v.push(format!("twomode: {e}"));
                }
            }
            (false, None) => {}
        }
        v
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(v))
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t_max, self.samples)
    }

    pub fn twomode_params(&self) -> Option<TwoModeParams> {
        self.twomode.map(|s| TwoModeParams {
            u4: s.u4.value(),
            gamma_b: s.gamma_b,
            gamma_a_formula: s.gamma_a.unwrap_or(s.gamma_b),
            nmax_a: self.nmax,
            nmax_b: s.nmax_b,
        })
    }

    /// Moves the scenario to another engine, adding default engine tables as needed.
    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        if engine == Engine::Trajectories {
            self.trajectory.get_or_insert_with(TrajectorySettings::default);
        } else {
            self.trajectory = None;
        }
        if engine != Engine::Twomode {
            self.twomode = None;
        }
        self
    }
}

/// Command-line adjustments applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub engine: Option<Engine>,
    pub seed: Option<u64>,
    pub fixed_step: Option<f64>,
    pub alpha: Option<ComplexValue>,
    pub rates: Option<String>,
    pub t_max: Option<f64>,
    pub nmax: Option<usize>,
    pub samples: Option<usize>,
    pub u1: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, mut s: Scenario) -> CliResult<Scenario> {
        if let Some(engine) = self.engine {
            s = s.with_engine(engine);
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(h) = self.fixed_step {
            s.integrator.fixed_step = Some(h);
        }
        if let Some(alpha) = self.alpha {
            s.alpha = alpha;
        }
        if let Some(spec) = &self.rates {
            s.rates = s
                .rates
                .with_assignments(spec)
                .map_err(|m| CliError::Validation(vec![m]))?;
        }
        if let Some(t) = self.t_max {
            s.t_max = t;
        }
        if let Some(n) = self.nmax {
            s.nmax = n;
        }
        if let Some(n) = self.samples {
            s.samples = n;
        }
        if let Some(u1) = self.u1 {
            s.u1 = u1;
        }
        Ok(s)
    }
}

/// Parses `3`, `3.0` or `1.5,0.5` into a complex amplitude.
pub fn parse_complex(text: &str) -> std::result::Result<ComplexValue, String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("`{text}` is not a number"));
    match parts.as_slice() {
        [re] => Ok(ComplexValue::Real(num(re)?)),
        [re, im] => Ok(ComplexValue::Pair([num(re)?, num(im)?])),
        _ => Err(format!("`{text}` must be `re` or `re,im`")),
    }
}

/// What a run manifest records: enough to repeat the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub scenario: Scenario,
}

impl Manifest {
    pub fn new(scenario: &Scenario) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            seed: scenario.seed,
            scenario: scenario.clone(),
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_error(path: &Path, message: impl std::fmt::Display) -> CliError {
    CliError::Parse {
        path: path.display().to_string(),
        message: message.to_string().trim_end().to_string(),
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Loads a TOML scenario, or the scenario inside a JSON run manifest.
pub fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = read_text(path)?;
    if is_json(path) {
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
        Ok(manifest.scenario)
    } else {
        toml::from_str(&text).map_err(|e| parse_error(path, e))
    }
}

/// Engine output in a common shape.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub series: TimeSeries,
    /// Per-sample standard errors of p_n, trajectory engine only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<Vec<f64>>>,
    pub report: serde_json::Value,
}

fn engine_error(s: &Scenario) -> impl Fn(Error) -> CliError + '_ {
    move |source| CliError::Engine {
        scenario: s.label(),
        source,
    }
}

/// Runs a validated scenario on its engine.
pub fn execute(s: &Scenario) -> CliResult<RunResult> {
    s.validate()?;
    let wrap = engine_error(s);
    let alpha = s.alpha.value();
    let cutoff = FockCutoff::for_coherent(alpha, s.nmax).map_err(&wrap)?;
    let grid = s.grid();
    let channels = s.rates.channels();
    let kerr = KerrTerm { u1: s.u1 };
    match s.engine {
        Engine::Dense => {
            let rho0 = DensityMatrix::coherent(alpha, cutoff).map_err(&wrap)?;
            let ev = dynamics::evolve(&rho0, &channels, kerr, &grid, &s.integrator).map_err(&wrap)?;
            Ok(RunResult {
                series: ev.series,
                stderr: None,
                report: serde_json::json!({
                    "diagnostics": ev.diagnostics,
                    "steps": ev.stats,
                }),
            })
        }
        Engine::Pauli => {
            let psi = PureState::coherent(alpha, cutoff).map_err(&wrap)?;
            let p0 = PopulationVector::new(psi.populations()).map_err(&wrap)?;
            let (series, stats) =
                pauli::evolve_populations_with_stats(&p0, &channels, &grid, &s.integrator).map_err(&wrap)?;
            Ok(RunResult {
                series,
                stderr: None,
                report: serde_json::json!({ "steps": stats }),
            })
        }
        Engine::Trajectories => {
            let settings = s.trajectory.expect("validated");
            let psi = PureState::coherent(alpha, cutoff).map_err(&wrap)?;
            let cfg = TrajectoryConfig {
                n_traj: settings.n_traj,
                master_seed: s.seed,
                dt_max: settings.dt_max,
                grid,
            };
            let ens = trajectories::run_ensemble(&psi, &channels, kerr, &cfg).map_err(&wrap)?;
            Ok(RunResult {
                series: ens.to_time_series(),
                report: serde_json::json!({
                    "n_traj": ens.n_traj,
                    "total_jumps": ens.total_jumps,
                }),
                stderr: Some(ens.stderr),
            })
        }
        Engine::Twomode => {
            let params = s.twomode_params().expect("validated");
            let rho_a = DensityMatrix::coherent(alpha, cutoff).map_err(&wrap)?;
            let rho0 = TwoModeState::with_vacuum_b(&rho_a, params.nmax_b).map_err(&wrap)?;
            let ev = twomode::two_mode_evolve(&rho0, &params, &grid, &s.integrator).map_err(&wrap)?;
            for w in &ev.warnings {
                eprintln!("warning: {w}");
            }
            Ok(RunResult {
                series: ev.series,
                stderr: None,
                report: serde_json::json!({
                    "gamma_e_effective": params.effective_gamma_e().map_err(&wrap)?,
                    "b_occupation": ev.b_occupation,
                    "max_top_b_mass": ev.max_top_b_mass,
                    "diagnostics": ev.diagnostics,
                    "steps": ev.stats,
                    "warnings": ev.warnings,
                }),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Shortest round-trip-safe rendering with 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with columns `t, mean_n, std_n, g2, trace_err, p0..pK`.
pub fn series_csv(series: &TimeSeries) -> String {
    let mut out = String::from("t,mean_n,std_n,g2,trace_err");
    for n in 0..series.levels() {
        let _ = write!(out, ",p{n}");
    }
    out.push('\n');
    for i in 0..series.len() {
        let row = [
            series.t[i],
            series.mean_n[i],
            series.std_n[i],
            series.g2[i],
            series.trace_err[i],
        ];
        let cells: Vec<String> = row
            .iter()
            .chain(&series.populations[i])
            .map(|&x| num(x))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Output switches shared by every verb.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputOptions {
    pub format: Format,
    pub svg: bool,
}

/// Writes manifest, series and optional plot of one run into `dir`.
pub fn write_run(dir: &Path, s: &Scenario, result: &RunResult, opts: OutputOptions) -> CliResult<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let manifest = dir.join("manifest.json");
    write_file(&manifest, &to_json(&Manifest::new(s)))?;
    written.push(manifest);
    let series = match opts.format {
        Format::Csv => {
            let p = dir.join("series.csv");
            write_file(&p, &series_csv(&result.series))?;
            p
        }
        Format::Json => {
            let p = dir.join("series.json");
            write_file(&p, &to_json(&result))?;
            p
        }
    };
    written.push(series);
    let report = dir.join("report.json");
    write_file(&report, &to_json(&result.report))?;
    written.push(report);
    if opts.svg {
        let p = dir.join("plot.svg");
        write_file(&p, &svg_plot(&s.label(), &result.series))?;
        written.push(p);
    }
    Ok(written)
}

/// Runs one scenario and writes its files.
pub fn run(s: &Scenario, dir: &Path, opts: OutputOptions) -> CliResult<RunResult> {
    let result = execute(s)?;
    write_run(dir, s, &result, opts)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// plotting

fn polyline(points: &[(f64, f64)], color: &str, dash: bool) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dash { " stroke-dasharray=\"6,4\"" } else { "" };
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// ⟨n⟩ (solid) and σ(n) (dashed) against t with a bar inset of the final p_n.
pub fn svg_plot(title: &str, series: &TimeSeries) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let t_max = series.t.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let y_max = series
        .mean_n
        .iter()
        .chain(&series.std_n)
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12)
        * 1.05;
    let sx = |t: f64| left + (w - left - right) * t / t_max;
    let sy = |y: f64| h - bottom - (h - top - bottom) * y / y_max;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{left}\" y=\"20\">{}</text>", escape(title));
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{y0}\" stroke=\"black\"/>",
        y0 = h - bottom,
        x1 = w - right
    );
    for i in 0..=4 {
        let t = t_max * i as f64 / 4.0;
        let y = y_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            sx(t),
            h - bottom + 16.0,
            tick(t)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            sy(y) + 4.0,
            tick(y)
        );
    }
    let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">t</text>", (left + w - right) / 2.0, h - 12.0);
    let mean: Vec<(f64, f64)> = series.t.iter().zip(&series.mean_n).map(|(&t, &y)| (sx(t), sy(y))).collect();
    let std: Vec<(f64, f64)> = series.t.iter().zip(&series.std_n).map(|(&t, &y)| (sx(t), sy(y))).collect();
    svg.push_str(&polyline(&mean, "#1f5fa8", false));
    svg.push_str(&polyline(&std, "#c0392b", true));
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#1f5fa8\">mean n</text>\n<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#c0392b\">sigma(n)</text>",
        w - right - 240.0,
        top + 14.0,
        w - right - 240.0,
        top + 30.0
    );

    // final distribution inset
    if let Some(last) = series.last_populations() {
        let shown = last
            .iter()
            .rposition(|&p| p > 1e-4)
            .map_or(2, |k| (k + 1).max(2))
            .min(last.len());
        let (ix, iy, iw, ih) = (w - right - 170.0, top + 50.0, 160.0, 110.0);
        let _ = writeln!(
            svg,
            "<rect x=\"{ix}\" y=\"{iy}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"#888\"/>"
        );
        let bw = iw / shown as f64;
        for (n, &p) in last.iter().take(shown).enumerate() {
            let bh = (ih - 16.0) * p.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#555\"/>",
                ix + n as f64 * bw + 1.0,
                iy + ih - 16.0 - bh,
                (bw - 2.0).max(0.5),
                bh
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{n}</text>",
                ix + (n as f64 + 0.5) * bw,
                iy + ih - 4.0
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">p_n at t = {}</text>",
            ix + 4.0,
            iy + 12.0,
            tick(t_max)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(x: f64) -> String {
    let s = format!("{x:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Fig1,
    Fig2,
}

/// Window searched for the σ(n) dip in the mixed-loss preset. Long linear-loss
/// runs drain towards vacuum, so the global minimum over the whole run sits at the
/// end; the dip of interest is early.
pub const FIG2_SIGMA_WINDOW: (f64, f64) = (0.0, 10.0);

fn preset_scenario(name: &str, rates: Rates, samples: usize) -> Scenario {
    Scenario {
        name: Some(name.into()),
        rates,
        samples,
        ..Scenario::default()
    }
}

/// The resolved scenarios of a preset, in output order.
pub fn preset_scenarios(preset: Preset) -> Vec<Scenario> {
    let rates = |e: f64, q: f64, s: f64, t: f64| Rates {
        gamma_e: e,
        gamma_q: q,
        gamma_s: s,
        gamma_t: t,
    };
    match preset {
        Preset::Fig1 => vec![
            preset_scenario("effective", rates(1.0, 0.0, 0.0, 0.0), 1001),
            preset_scenario("two_photon", rates(0.0, 0.0, 1.0, 0.0), 1001),
            preset_scenario("three_photon", rates(0.0, 0.0, 0.0, 1.0), 1001),
        ],
        Preset::Fig2 => vec![
            preset_scenario("linear", rates(1.0, 0.05, 0.0, 0.0), 4001),
            preset_scenario("two_photon", rates(1.0, 0.0, 0.05, 0.0), 4001),
            preset_scenario("mixed", rates(1.0, 0.025, 0.025, 0.0), 4001),
        ],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetRun {
    pub scenario: Scenario,
    pub result: RunResult,
}

/// Runs every scenario of a preset concurrently and writes one subdirectory per
/// scenario plus the preset summary.
pub fn run_preset(
    preset: Preset,
    overrides: &Overrides,
    dir: &Path,
    opts: OutputOptions,
) -> CliResult<Vec<PresetRun>> {
    let scenarios = preset_scenarios(preset)
        .into_iter()
        .map(|s| overrides.apply(s))
        .collect::<CliResult<Vec<_>>>()?;
    let mut violations = Vec::new();
    for s in &scenarios {
        violations.extend(s.violations().into_iter().map(|v| format!("{}: {v}", s.label())));
    }
    if !violations.is_empty() {
        return Err(CliError::Validation(violations));
    }
    let results = scenarios
        .par_iter()
        .map(execute)
        .collect::<CliResult<Vec<_>>>()?;
    create_dir(dir)?;
    let runs: Vec<PresetRun> = scenarios
        .into_iter()
        .zip(results)
        .map(|(scenario, result)| PresetRun { scenario, result })
        .collect();
    for r in &runs {
        write_run(&dir.join(r.scenario.label()), &r.scenario, &r.result, opts)?;
    }
    match preset {
        Preset::Fig1 => {
            let p = dir.join("final_distribution.csv");
            write_file(&p, &final_distribution_csv(&runs))?;
        }
        Preset::Fig2 => {
            let mixed = runs.iter().find(|r| r.scenario.label() == "mixed").expect("preset");
            let report = match analysis::find_sigma_min(&mixed.result.series, FIG2_SIGMA_WINDOW) {
                Ok(m) => serde_json::json!({
                    "scenario": "mixed",
                    "window": FIG2_SIGMA_WINDOW,
                    "t_star": m.t_star,
                    "sigma_star": m.sigma_star,
                    "p1_star": m.populations.get(1),
                    "populations": m.populations,
                }),
                Err(e) => serde_json::json!({ "scenario": "mixed", "error": e.to_string() }),
            };
            write_file(&dir.join("sigma_min.json"), &to_json(&report))?;
        }
    }
    Ok(runs)
}

/// Final p_n of each run side by side: `n, <label>...`.
pub fn final_distribution_csv(runs: &[PresetRun]) -> String {
    let mut out = String::from("n");
    for r in runs {
        let _ = write!(out, ",{}", r.scenario.label());
    }
    out.push('\n');
    let levels = runs.iter().map(|r| r.result.series.levels()).max().unwrap_or(0);
    for n in 0..levels {
        let _ = write!(out, "{n}");
        for r in runs {
            let p = r
                .result
                .series
                .last_populations()
                .and_then(|p| p.get(n).copied())
                .unwrap_or(0.0);
            let _ = write!(out, ",{}", num(p));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<ComplexValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_e: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_t: Option<Vec<f64>>,
    /// Time window for the σ(n) search; defaults to the whole run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
}

const RATE_AXES: [(&str, RateField); 4] = [
    ("gamma_e", RateField::E),
    ("gamma_q", RateField::Q),
    ("gamma_s", RateField::S),
    ("gamma_t", RateField::T),
];

impl SweepSpec {
    fn rate_axis(&self, field: RateField) -> Option<&Vec<f64>> {
        match field {
            RateField::E => self.gamma_e.as_ref(),
            RateField::Q => self.gamma_q.as_ref(),
            RateField::S => self.gamma_s.as_ref(),
            RateField::T => self.gamma_t.as_ref(),
        }
    }

    pub fn violations(&self, base: &Scenario) -> Vec<String> {
        let mut v = Vec::new();
        let mut any = false;
        if let Some(a) = &self.alpha {
            any = true;
            if a.is_empty() {
                v.push("sweep.alpha is an empty range".into());
            }
        }
        for (name, field) in RATE_AXES {
            if let Some(r) = self.rate_axis(field) {
                any = true;
                if r.is_empty() {
                    v.push(format!("sweep.{name} is an empty range"));
                }
                if r.iter().any(|x| !x.is_finite()) {
                    v.push(format!("sweep.{name} contains a non-finite value"));
                }
            }
        }
        if !any {
            v.push("sweep table lists no ranges (alpha, gamma_e, gamma_q, gamma_s, gamma_t)".into());
        }
        if let Some([lo, hi]) = self.window {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                v.push("sweep.window must be an increasing pair".into());
            }
        }
        if base.engine == Engine::Twomode {
            v.push("sweeps run single-mode engines only".into());
        }
        v
    }

    /// Grid points in lexicographic order of the swept fields.
    pub fn points(&self, base: &Scenario) -> Vec<SweepPoint> {
        let mut alphas: Vec<ComplexValue> = self.alpha.clone().unwrap_or_else(|| vec![base.alpha]);
        alphas.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).expect("finite"));
        alphas.dedup_by(|a, b| a.sort_key() == b.sort_key());
        let mut axes: Vec<(RateField, Vec<f64>)> = Vec::new();
        for (_, field) in RATE_AXES {
            let mut values = self.rate_axis(field).cloned().unwrap_or_default();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            values.dedup();
            axes.push((field, values));
        }
        let mut points = Vec::new();
        for &alpha in &alphas {
            let mut combos: Vec<Rates> = vec![base.rates];
            for (field, values) in &axes {
                combos = combos
                    .iter()
                    .flat_map(|r| {
                        values.iter().map(move |&v| {
                            let mut r = *r;
                            r.set(*field, v);
                            r
                        })
                    })
                    .collect();
            }
            for rates in combos {
                let mut scenario = base.clone();
                scenario.alpha = alpha;
                scenario.rates = rates;
                points.push(SweepPoint { alpha, rates, scenario });
            }
        }
        points
    }

    fn swept_fields(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        if self.alpha.is_some() {
            f.push("alpha_re");
            f.push("alpha_im");
        }
        for (name, field) in RATE_AXES {
            if self.rate_axis(field).is_some() {
                f.push(name);
            }
        }
        f
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub alpha: ComplexValue,
    pub rates: Rates,
    pub scenario: Scenario,
}

/// One row of sweep output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: [f64; 2],
    pub rates: Rates,
    pub t_star: f64,
    pub sigma_star: f64,
    pub p1_star: f64,
    /// False when σ(n) had no interior minimum and the window argmin is reported.
    pub interior: bool,
}

impl SweepRow {
    fn field(&self, name: &str) -> f64 {
        match name {
            "alpha_re" => self.alpha[0],
            "alpha_im" => self.alpha[1],
            "gamma_e" => self.rates.gamma_e,
            "gamma_q" => self.rates.gamma_q,
            "gamma_s" => self.rates.gamma_s,
            "gamma_t" => self.rates.gamma_t,
            _ => unreachable!("unknown sweep field {name}"),
        }
    }
}

/// Summary row of a single run: the σ(n) minimum inside `window`, or the window
/// argmin flagged as not interior.
pub fn sigma_row(s: &Scenario, series: &TimeSeries, window: (f64, f64)) -> SweepRow {
    let alpha = s.alpha.value();
    let (t_star, sigma_star, p1_star, interior) = match analysis::find_sigma_min(series, window) {
        Ok(m) => (m.t_star, m.sigma_star, m.populations.get(1).copied().unwrap_or(0.0), true),
        Err(_) => {
            let best = (0..series.len())
                .filter(|&i| series.t[i] >= window.0 && series.t[i] <= window.1)
                .min_by(|&a, &b| series.std_n[a].partial_cmp(&series.std_n[b]).expect("finite"))
                .unwrap_or(0);
            (
                series.t[best],
                series.std_n[best],
                series.populations[best].get(1).copied().unwrap_or(0.0),
                false,
            )
        }
    };
    SweepRow {
        alpha: [alpha.re, alpha.im],
        rates: s.rates,
        t_star,
        sigma_star,
        p1_star,
        interior,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub fields: Vec<&'static str>,
    pub rows: Vec<SweepRow>,
    /// Soft check: p_1(t*) should not grow when a loss rate grows. Reported, never fatal.
    pub monotonicity_notes: Vec<String>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = self.fields.join(",");
        if !self.fields.is_empty() {
            out.push(',');
        }
        out.push_str("t_star,sigma_star,p1_star,interior\n");
        for r in &self.rows {
            let mut cells: Vec<String> = self.fields.iter().map(|f| num(r.field(f))).collect();
            cells.extend([num(r.t_star), num(r.sigma_star), num(r.p1_star)]);
            cells.push(if r.interior { "1".into() } else { "0".into() });
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Loads a sweep file: a scenario plus a `[sweep]` table.
pub fn load_sweep(path: &Path) -> CliResult<(Scenario, SweepSpec)> {
    let text = read_text(path)?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| parse_error(path, e))?;
    let sweep = table
        .remove("sweep")
        .ok_or_else(|| CliError::Validation(vec!["missing [sweep] table".into()]))?;
    let spec: SweepSpec = sweep
        .try_into()
        .map_err(|e: toml::de::Error| parse_error(path, format!("in [sweep]: {e}")))?;
    let scenario: Scenario = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| parse_error(path, e))?;
    Ok((scenario, spec))
}

/// Soft monotonicity report: along each swept loss axis (Γq, Γs, Γt) with all
/// other fields fixed, p_1(t*) should not increase.
fn monotonicity_notes(fields: &[&'static str], rows: &[SweepRow]) -> Vec<String> {
    let mut notes = Vec::new();
    for axis in ["gamma_q", "gamma_s", "gamma_t"] {
        if !fields.contains(&axis) {
            continue;
        }
        let others: Vec<&str> = fields.iter().copied().filter(|f| *f != axis).collect();
        let mut groups: Vec<(Vec<f64>, Vec<&SweepRow>)> = Vec::new();
        for r in rows {
            let key: Vec<f64> = others.iter().map(|f| r.field(f)).collect();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, g)) => g.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        for (_, g) in groups {
            for w in g.windows(2) {
                if w[1].p1_star > w[0].p1_star + 1e-12 {
                    notes.push(format!(
                        "p1(t*) rises from {:.6} to {:.6} as {axis} goes {} -> {}",
                        w[0].p1_star,
                        w[1].p1_star,
                        w[0].field(axis),
                        w[1].field(axis)
                    ));
                }
            }
        }
    }
    notes
}

/// Runs every grid point on up to `jobs` workers; rows come back in grid order.
pub fn sweep(base: &Scenario, spec: &SweepSpec, jobs: Option<usize>) -> CliResult<SweepOutcome> {
    let mut violations = spec.violations(base);
    let points = if violations.is_empty() { spec.points(base) } else { Vec::new() };
    for p in &points {
        for v in p.scenario.violations() {
            let a = p.alpha.value();
            let msg = format!("point alpha=({}, {}) rates={:?}: {v}", a.re, a.im, p.rates);
            if !violations.contains(&msg) {
                violations.push(msg);
            }
        }
    }
    if !violations.is_empty() {
        return Err(CliError::Validation(violations));
    }
    let window = spec.window.map_or((0.0, base.t_max), |[lo, hi]| (lo, hi));
    let work = || {
        points
            .par_iter()
            .map(|p| execute(&p.scenario).map(|r| sigma_row(&p.scenario, &r.series, window)))
            .collect::<CliResult<Vec<_>>>()
    };
    let rows = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(work)?,
        None => work()?,
    };
    let fields = spec.swept_fields();
    let monotonicity_notes = monotonicity_notes(&fields, &rows);
    Ok(SweepOutcome {
        fields,
        rows,
        monotonicity_notes,
    })
}

/// Writes `sweep.csv` (or `sweep.json`) and a manifest of the base scenario and ranges.
pub fn write_sweep(
    dir: &Path,
    base: &Scenario,
    spec: &SweepSpec,
    outcome: &SweepOutcome,
    format: Format,
) -> CliResult<()> {
    create_dir(dir)?;
    let manifest = serde_json::json!({
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "seed": base.seed,
        "scenario": base,
        "sweep": spec,
    });
    write_file(&dir.join("manifest.json"), &to_json(&manifest))?;
    match format {
        Format::Csv => write_file(&dir.join("sweep.csv"), &outcome.to_csv()),
        Format::Json => write_file(&dir.join("sweep.json"), &to_json(outcome)),
    }
}

/// Parses and validates a scenario or sweep file without running it.
pub fn validate_file(path: &Path) -> CliResult<()> {
    let text = read_text(path)?;
    if !is_json(path) {
        let table: toml::Table = toml::from_str(&text).map_err(|e| parse_error(path, e))?;
        if table.contains_key("sweep") {
            let (base, spec) = load_sweep(path)?;
            let mut v = base.violations();
            v.extend(spec.violations(&base));
            return if v.is_empty() { Ok(()) } else { Err(CliError::Validation(v)) };
        }
    }
    load_scenario(path)?.validate()
}
