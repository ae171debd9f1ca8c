//! Command implementations behind the `ecram` binary.
//!
//! Each command returns a [`CliError`] whose [`CliError::exit_code`] is the
//! process status: 1 for bad input, 2 for a failed simulation.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ecram_core::analysis::{self, AnalysisError, AnalysisRequest, AnalysisResult};
use ecram_core::config::{ConfigError, ResolvedRun, RunConfig};
use ecram_core::phasefield::{self, PhaseFieldConfig, PhaseFieldError};
use ecram_core::protocol::{self, ProtocolError, RunRecord};
use ecram_core::scenarios;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

/// Overrides the directory under which relative output paths are created.
pub const OUTPUT_ROOT_ENV: &str = "ECRAM_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "output";
pub const HOURS_PER_YEAR: f64 = 8766.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("simulation failed at {context}: {source}")]
    Simulation {
        context: String,
        #[source]
        source: ProtocolError,
    },
    #[error("{failed} of {total} sweep runs failed; first: {first}")]
    Sweep { failed: usize, total: usize, first: String },
    #[error("phase field: {0}")]
    PhaseField(#[from] PhaseFieldError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Simulation { .. }
            | Self::Sweep { .. }
            | Self::Io { .. }
            | Self::PhaseField(
                PhaseFieldError::StabilityFailure { .. } | PhaseFieldError::CompositionOutOfRange { .. },
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn read_text(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(io_err(path))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| CliError::Input { path: path.display().to_string(), message: e.to_string() })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// `explicit` wins; otherwise the configured directory (or the run name)
/// is placed under the output root.
pub fn output_dir(explicit: Option<&Path>, configured: Option<&Path>, name: Option<&str>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let leaf = configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(name.unwrap_or("run")));
            output_root().join(leaf)
        }
    }
}

/// Reads a run config; `scenario:NAME` loads a shipped scenario.
pub fn load_run_config(spec: &str) -> Result<RunConfig> {
    if let Some(name) = spec.strip_prefix("scenario:") {
        return Ok(scenarios::scenario_config(name)?);
    }
    Ok(RunConfig::from_json(&read_text(Path::new(spec))?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub samples: usize,
    pub reads: usize,
    pub seed: u64,
}

fn describe_failure(run: &ResolvedRun, err: &ProtocolError) -> String {
    match err.step_index() {
        Some(i) => {
            let step = run.experiment.steps.get(i).map(|s| serde_json::to_string(s).unwrap_or_default());
            format!("step {i} {}", step.unwrap_or_default())
        }
        None => "setup".to_string(),
    }
}

/// Executes a resolved run and writes its artefacts into `dir`.
pub fn execute_into(run: &ResolvedRun, dir: &Path) -> Result<RunSummary> {
    let record = protocol::execute(&run.experiment)
        .map_err(|source| CliError::Simulation { context: describe_failure(run, &source), source })?;
    let mut results = Vec::with_capacity(run.analyses.len());
    for req in &run.analyses {
        results.push(analysis::run_analysis(&run.experiment, &record, req)?);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_with(&dir.join("record.csv"), |w| record.write_csv(w))?;
    write_with(&dir.join("reads.csv"), |w| record.write_reads_csv(w))?;
    write_json(&dir.join("meta.json"), &run.normalized)?;
    if !results.is_empty() {
        write_analysis_outputs(run, &record, &results, dir)?;
    }
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        samples: record.samples.len(),
        reads: record.reads.len(),
        seed: run.experiment.seed,
    })
}

fn write_analysis_outputs(run: &ResolvedRun, record: &RunRecord, results: &[AnalysisResult], dir: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Entry<'a> {
        request: &'a AnalysisRequest,
        result: &'a AnalysisResult,
    }
    let entries: Vec<Entry> =
        run.analyses.iter().zip(results).map(|(request, result)| Entry { request, result }).collect();
    write_json(&dir.join("analysis.json"), &entries)?;
    for req in &run.analyses {
        match req {
            AnalysisRequest::GqCollapse { bins } => {
                let c = analysis::gq_collapse(&[&record.samples], *bins)?;
                write_with(&dir.join("gq_curve.csv"), |w| analysis::write_curve_csv(&c.curve, w))?;
            }
            AnalysisRequest::Arrhenius => {
                let pts = analysis::drive_end_currents(&run.experiment, record);
                write_with(&dir.join("arrhenius.csv"), |w| {
                    writeln!(w, "T_K,I_A")?;
                    for (t, i) in pts {
                        writeln!(w, "{t:e},{i:e}")?;
                    }
                    Ok(())
                })?;
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn cmd_run(spec: &str, out: Option<&Path>) -> Result<RunSummary> {
    let cfg = load_run_config(spec)?;
    let run = cfg.resolve()?;
    let dir = output_dir(out, run.normalized.output_dir.as_deref(), run.experiment.name.as_deref());
    execute_into(&run, &dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionProjection {
    pub seconds: f64,
    pub hours: f64,
    pub years: f64,
}

impl RetentionProjection {
    pub fn from_seconds(seconds: f64) -> Self {
        let hours = seconds / 3600.0;
        Self { seconds, hours, years: hours / HOURS_PER_YEAR }
    }
}

/// `t_ref` in seconds, temperatures in kelvin, `ea` in eV.
pub fn cmd_project_retention(t_ref: f64, temp_ref: f64, temp_target: f64, ea: f64) -> Result<RetentionProjection> {
    let seconds = analysis::retention_scale(t_ref, temp_ref, temp_target, ea)?;
    Ok(RetentionProjection::from_seconds(seconds))
}

/// Parses `T,I` rows. Blank lines and `#` comments are skipped; a first
/// line that does not parse as numbers is taken as a header.
pub fn parse_arrhenius_csv(text: &str, path: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut seen_row = false;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [t, i] => t.parse::<f64>().ok().zip(i.parse::<f64>().ok()),
            _ => None,
        };
        let line_err = |message: String| CliError::Line { path: path.to_string(), line: line_no, message };
        match parsed {
            None if !seen_row => {
                seen_row = true;
            }
            None => return Err(line_err(format!("expected two numbers `T,I`, got `{line}`"))),
            Some((t, i)) => {
                seen_row = true;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(line_err(format!("temperature must be > 0, got {t}")));
                }
                if !(i > 0.0 && i.is_finite()) {
                    return Err(line_err(format!("current must be > 0, got {i}")));
                }
                points.push((t, i));
            }
        }
    }
    Ok(points)
}

pub fn cmd_fit_arrhenius(path: &Path) -> Result<analysis::ArrheniusFit> {
    let text = read_text(path)?;
    let points = parse_arrhenius_csv(&text, &path.display().to_string())?;
    Ok(analysis::arrhenius_fit(&points)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseFieldSummary {
    pub dir: PathBuf,
    pub snapshots: Vec<u64>,
    pub final_mass: f64,
    pub final_energy: f64,
    pub final_interface_count: usize,
}

pub fn load_phasefield_config(path: &Path) -> Result<PhaseFieldConfig> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()).into())
}

/// Snapshot file name for a step index.
pub fn snapshot_name(step: u64) -> String {
    format!("profile_t{step:09}.csv")
}

pub fn cmd_phasefield(path: &Path, out: Option<&Path>) -> Result<PhaseFieldSummary> {
    let cfg = load_phasefield_config(path)?;
    let default_name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("phasefield").to_string();
    let dir = output_dir(out, None, Some(&default_name));
    run_phasefield(&cfg, &dir)
}

pub fn run_phasefield(cfg: &PhaseFieldConfig, dir: &Path) -> Result<PhaseFieldSummary> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let diag_path = dir.join("diagnostics.csv");
    let diag_file = File::create(&diag_path).map_err(io_err(&diag_path))?;
    let mut diag = BufWriter::new(diag_file);
    let mut diag_result = writeln!(diag, "step,t,mass,energy,interface_count");
    let mut last = None;
    let mut snapshots = Vec::new();
    let fin = phasefield::simulate(
        cfg,
        |d| {
            if diag_result.is_ok() {
                diag_result = writeln!(diag, "{},{:e},{:e},{:e},{}", d.step, d.t, d.mass, d.energy, d.interface_count);
            }
            last = Some(*d);
        },
        |step, profile| {
            snapshots.push(step);
            let mut w = BufWriter::new(File::create(dir.join(snapshot_name(step)))?);
            phasefield::write_profile_csv(profile, &mut w)?;
            w.flush()
        },
    );
    diag_result.and_then(|_| diag.flush()).map_err(io_err(&diag_path))?;
    fin?;
    write_json(&dir.join("meta.json"), cfg)?;
    let d = last.expect("diagnostics recorded at step 0");
    Ok(PhaseFieldSummary {
        dir: dir.to_path_buf(),
        snapshots,
        final_mass: d.mass,
        final_energy: d.energy,
        final_interface_count: d.interface_count,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub index: usize,
    pub value: Value,
    pub dir: PathBuf,
    pub status: String,
    pub error: Option<String>,
}

/// Parses each sweep value as JSON, falling back to a plain string.
pub fn parse_sweep_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Runs `base` once per value with `path` overridden, in parallel.
/// All overrides are resolved before anything runs, so a bad value
/// fails the whole sweep without partial output.
pub fn cmd_sweep(
    spec: &str,
    path: &str,
    values: &[Value],
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(CliError::Argument("sweep needs at least one value".into()));
    }
    let base = load_run_config(spec)?;
    let runs: Vec<ResolvedRun> = values
        .iter()
        .map(|v| base.with_override(path, v.clone()).and_then(|c| c.resolve()).map_err(CliError::from))
        .collect::<Result<_>>()?;
    let name = runs[0].experiment.name.clone().unwrap_or_else(|| "sweep".into());
    let root = output_dir(out, base.output_dir.as_deref(), Some(&name));
    let work = || -> Vec<SweepEntry> {
        runs.par_iter()
            .zip(values.par_iter())
            .enumerate()
            .map(|(index, (run, value))| {
                let dir = root.join(format!("run_{index:04}"));
                let (status, error) = match execute_into(run, &dir) {
                    Ok(_) => ("ok".to_string(), None),
                    Err(e) => ("failed".to_string(), Some(e.to_string())),
                };
                SweepEntry { index, value: value.clone(), dir, status, error }
            })
            .collect()
    };
    let entries = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Argument(format!("--jobs: {e}")))?
            .install(work),
        None => work(),
    };
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    #[derive(Serialize)]
    struct Index<'a> {
        path: &'a str,
        runs: &'a [SweepEntry],
    }
    write_json(&root.join("sweep.json"), &Index { path, runs: &entries })?;
    if let Some(e) = entries.iter().find(|e| e.error.is_some()) {
        return Err(CliError::Sweep {
            failed: entries.iter().filter(|e| e.error.is_some()).count(),
            total: entries.len(),
            first: format!("run {}: {}", e.index, e.error.as_deref().unwrap_or_default()),
        });
    }
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub description: Option<String>,
    pub steps: usize,
}

pub fn list_scenarios() -> Result<Vec<ScenarioInfo>> {
    scenarios::names()
        .map(|name| {
            let cfg = scenarios::scenario_config(name)?;
            Ok(ScenarioInfo { name, description: cfg.description, steps: cfg.protocol.as_ref().map_or(0, Vec::len) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_header_and_comments() {
        let pts = parse_arrhenius_csv("# fit\nT_K,I_A\n473.15,1e-7\n\n448.15, 2e-8\n", "f").unwrap();
        assert_eq!(pts, vec![(473.15, 1e-7), (448.15, 2e-8)]);
    }

    #[test]
    fn csv_reports_line_of_bad_row() {
        let err = parse_arrhenius_csv("T,I\n473.15,1e-7\n448.15,abc\n", "f").unwrap_err();
        assert!(matches!(err, CliError::Line { line: 3, .. }), "{err}");
        let err = parse_arrhenius_csv("473.15,1e-7\n448.15,0\n", "f").unwrap_err();
        assert!(matches!(err, CliError::Line { line: 2, .. }), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn retention_identities() {
        let same_t = cmd_project_retention(86_400.0, 473.15, 473.15, 1.7).unwrap();
        assert_eq!(same_t.hours, 24.0);
        let no_ea = cmd_project_retention(86_400.0, 473.15, 358.15, 0.0).unwrap();
        assert_eq!(no_ea.seconds, 86_400.0);
        let p = RetentionProjection::from_seconds(HOURS_PER_YEAR * 3600.0);
        assert_eq!(p.years, 1.0);
        assert_eq!(cmd_project_retention(1.0, -1.0, 300.0, 1.0).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn explicit_output_dir_wins() {
        let p = output_dir(Some(Path::new("/a")), Some(Path::new("b")), Some("c"));
        assert_eq!(p, PathBuf::from("/a"));
        let p = output_dir(None, Some(Path::new("/abs")), Some("c"));
        assert_eq!(p, PathBuf::from("/abs"));
    }

    #[test]
    fn sweep_values_parse_as_json() {
        assert_eq!(parse_sweep_value("3"), Value::from(3));
        assert_eq!(parse_sweep_value("-2.5"), Value::from(-2.5));
        assert_eq!(parse_sweep_value("ideal"), Value::from("ideal"));
    }

    #[test]
    fn snapshot_names_sort_by_step() {
        assert!(snapshot_name(99) < snapshot_name(100));
        assert_eq!(snapshot_name(5), "profile_t000000005.csv");
    }

    #[test]
    fn simulation_errors_exit_two() {
        let source = ProtocolError::InvalidStep { index: 4, reason: "x".into() };
        let e = CliError::Simulation { context: "step 4".into(), source };
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("step 4"));
        let e = CliError::PhaseField(PhaseFieldError::StabilityFailure { dt: 0.2, bound: 0.1 });
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::from(ConfigError::Missing("model".into())).exit_code(), 1);
    }

    #[test]
    fn scenarios_listed() {
        let list = list_scenarios().unwrap();
        assert!(list.iter().any(|s| s.name == "fig1b" && s.steps == 2));
    }
}
