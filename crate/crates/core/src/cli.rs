//! Command implementations behind the `statris` binary: option resolution,
//! table rendering and atomic output with a run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{parse_methods, FlatConfig};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate_table, db_to_linear, optimizer_options, run, scenario_model, scenario_table, trace_table,
    ExperimentResult, ExperimentSpec, Family,
};
use crate::linalg::{frobenius, unvec};
use crate::optimizer::optimize;
use crate::selftest::{run_selftest, Check};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NOT_CONVERGED: u8 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Dimension(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Settings shared by `optimize` and `experiment`; flags win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub power_db: Option<Vec<f64>>,
    pub n_grid: Option<Vec<usize>>,
    pub methods: Option<Vec<String>>,
    pub scenarios: Option<usize>,
    pub samples: Option<usize>,
}

/// Resolved spec plus whether any power grid was given explicitly.
pub fn resolve_spec(overrides: &Overrides, family: Option<Family>) -> Result<(ExperimentSpec, bool)> {
    let mut spec = ExperimentSpec::default();
    let mut power_given = false;
    if let Some(path) = &overrides.config {
        let file = FlatConfig::load(path)?;
        power_given |= file.power_db.is_some();
        file.apply(&mut spec)?;
    }
    if let Some(f) = family {
        spec.family = f;
    }
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
        spec.scenario.seed = seed;
    }
    if let Some(p) = &overrides.power_db {
        spec.power_grid_db = p.clone();
        power_given = true;
    }
    if let Some(n) = &overrides.n_grid {
        spec.n_grid = n.clone();
    }
    if let Some(m) = &overrides.methods {
        spec.methods = parse_methods(m)?;
    }
    if let Some(s) = overrides.scenarios {
        spec.scenarios = s;
    }
    if let Some(s) = overrides.samples {
        spec.samples = s;
    }
    Ok((spec, power_given))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Short id written into the `run` column of every table.
    pub run_id: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: String,
    pub files: Vec<FileEntry>,
}

pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

impl Artifact {
    fn table(name: &str, run_id: &str, csv: &str) -> Self {
        Self {
            name: name.to_string(),
            contents: tag_table(csv, run_id).into_bytes(),
        }
    }
}

/// Prepends a `run` column so each row points back at its manifest.
pub fn tag_table(csv: &str, run_id: &str) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        out.push_str(if i == 0 { "run" } else { run_id });
        if !line.is_empty() {
            out.push(',');
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes every artifact through a temporary file, then the manifest last.
pub fn write_outputs(out: &Path, artifacts: &[Artifact], mut manifest: RunManifest) -> Result<()> {
    std::fs::create_dir_all(out)?;
    manifest.files = artifacts
        .iter()
        .map(|a| FileEntry {
            name: a.name.clone(),
            sha256: hex_digest(&a.contents),
        })
        .collect();
    for a in artifacts {
        write_atomic(out, &a.name, &a.contents)?;
    }
    manifest.finished_unix = unix_now();
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    json.push(b'\n');
    write_atomic(out, MANIFEST_FILE, &json)
}

fn manifest(
    command: &str,
    args: &[String],
    config: serde_json::Value,
    hash: String,
    seed: u64,
    started: f64,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        args: args.to_vec(),
        run_id: hash[..16].to_string(),
        config_hash: hash,
        config,
        seed,
        started_unix: started,
        finished_unix: started,
        version: concat!("statris ", env!("CARGO_PKG_VERSION")).to_string(),
        files: Vec::new(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_rows<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

#[derive(Serialize)]
struct OptimizeConfig<'a> {
    power_db: f64,
    #[serde(flatten)]
    spec: &'a ExperimentSpec,
}

#[derive(Serialize)]
struct SweepRow {
    sweep: usize,
    surrogate: f64,
    rate: f64,
    kappa: f64,
    grad_norm: f64,
    power: f64,
}

#[derive(Serialize)]
struct PhaseRow {
    element: usize,
    angle: f64,
}

#[derive(Serialize)]
struct FilterRow {
    user: usize,
    frobenius_norm: f64,
    lambda: f64,
}

pub struct OptimizeReport {
    pub converged: bool,
    pub sweeps: usize,
    pub final_rate: f64,
}

/// Single run of the statistical design at one power level.
pub fn cmd_optimize(overrides: &Overrides, args: &[String], out: &Path) -> Result<OptimizeReport> {
    let started = unix_now();
    let (spec, power_given) = resolve_spec(overrides, None)?;
    spec.scenario.validate()?;
    let power_db = match (power_given, spec.power_grid_db.as_slice()) {
        (false, _) => 0.0,
        (true, [p]) if p.is_finite() => *p,
        (true, _) => return Err(Error::Config("optimize takes exactly one finite power".into())),
    };
    let model = scenario_model(&spec, 0, spec.scenario.ris_elements)?;
    let state = optimize(&model, db_to_linear(power_db), &optimizer_options(&spec, 0))?;

    let sweeps: Vec<SweepRow> = std::iter::once(&state.initial)
        .chain(&state.trace)
        .map(|r| SweepRow {
            sweep: r.sweep,
            surrogate: r.surrogate,
            rate: r.rate,
            kappa: r.kappa,
            grad_norm: r.grad_norm,
            power: r.power,
        })
        .collect();
    let phases: Vec<PhaseRow> = state
        .phase
        .angles
        .iter()
        .enumerate()
        .map(|(element, &angle)| PhaseRow { element, angle })
        .collect();
    let m = model.antennas();
    let filters: Vec<FilterRow> = state
        .a
        .iter()
        .zip(&state.lambda)
        .enumerate()
        .map(|(user, (a, &lambda))| FilterRow {
            user,
            frobenius_norm: frobenius(&unvec(a, m, m)),
            lambda,
        })
        .collect();

    let config = OptimizeConfig { power_db, spec: &spec };
    let hash = hex_digest(&serde_json::to_vec(&config).map_err(|e| Error::Io(std::io::Error::other(e)))?);
    let manifest = manifest("optimize", args, to_json(&config)?, hash, spec.seed, started);
    let run_id = manifest.run_id.clone();
    let artifacts = [
        Artifact::table("trace.csv", &run_id, &csv_rows(&sweeps)?),
        Artifact::table("phases.csv", &run_id, &csv_rows(&phases)?),
        Artifact::table("filters.csv", &run_id, &csv_rows(&filters)?),
    ];
    write_outputs(out, &artifacts, manifest)?;
    Ok(OptimizeReport {
        converged: state.converged,
        sweeps: state.sweeps(),
        final_rate: state.final_rate(),
    })
}

/// Wide table: one column per power with the scenario-mean rate per sweep.
/// Runs that stopped early hold their final value.
pub fn convergence_table(result: &ExperimentResult, powers: &[f64]) -> String {
    let mut header = String::from("sweep");
    let mut columns = Vec::new();
    for &p in powers {
        header.push_str(&format!(",rate_{p}db"));
        let traces: Vec<Vec<f64>> = result
            .traces
            .iter()
            .filter(|t| t.power_db == p)
            .map(|t| std::iter::once(&t.initial).chain(&t.trace).map(|r| r.rate).collect())
            .collect();
        columns.push(traces);
    }
    let len = columns.iter().flat_map(|c| c.iter().map(Vec::len)).max().unwrap_or(0);
    let mut out = header;
    out.push('\n');
    for i in 0..len {
        out.push_str(&i.to_string());
        for traces in &columns {
            let sum: f64 = traces.iter().map(|t| t[i.min(t.len() - 1)]).sum();
            out.push_str(&format!(",{}", sum / traces.len().max(1) as f64));
        }
        out.push('\n');
    }
    out
}

/// One experiment family; returns the result after all files are written.
pub fn cmd_experiment(overrides: &Overrides, family: Family, args: &[String], out: &Path) -> Result<ExperimentResult> {
    let started = unix_now();
    let (mut spec, power_given) = resolve_spec(overrides, Some(family))?;
    if family == Family::Convergence && !power_given {
        spec.power_grid_db = vec![0.0, 30.0];
    }
    let result = run(&spec)?;
    let manifest = manifest(
        "experiment",
        args,
        to_json(&spec)?,
        result.config_hash.clone(),
        spec.seed,
        started,
    );
    let run_id = manifest.run_id.clone();
    let artifacts = match family {
        Family::Convergence => vec![
            Artifact::table("traces.csv", &run_id, &trace_table(&result)?),
            Artifact::table(
                "convergence.csv",
                &run_id,
                &convergence_table(&result, &spec.power_grid_db),
            ),
        ],
        Family::RateVsPower | Family::RateVsN => vec![
            Artifact::table("scenarios.csv", &run_id, &scenario_table(&result)?),
            Artifact::table("aggregate.csv", &run_id, &aggregate_table(&result)?),
        ],
    };
    write_outputs(out, &artifacts, manifest)?;
    Ok(result)
}

pub fn cmd_selftest(quick: bool) -> Vec<Check> {
    run_selftest(quick)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_table_prefixes_every_row() {
        assert_eq!(tag_table("a,b\n1,2\n", "r1"), "run,a,b\nr1,1,2\n");
    }

    #[test]
    fn exit_codes_are_distinct_by_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
    }

    #[test]
    fn flags_override_file_and_seed_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nscenarios = 4\n").unwrap();
        let overrides = Overrides {
            config: Some(path),
            seed: Some(11),
            ..Overrides::default()
        };
        let (spec, power_given) = resolve_spec(&overrides, None).unwrap();
        assert_eq!(spec.seed, 11);
        assert_eq!(spec.scenario.seed, 11);
        assert_eq!(spec.scenarios, 4);
        assert!(!power_given);
    }

    #[test]
    fn missing_config_leaves_no_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let overrides = Overrides {
            config: Some(dir.path().join("absent.toml")),
            ..Overrides::default()
        };
        let err = cmd_optimize(&overrides, &[], &out).err().unwrap();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        assert!(!out.exists());
    }
}
