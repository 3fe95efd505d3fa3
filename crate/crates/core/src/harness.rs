//! Experiment families: convergence traces, rate versus transmit power and
//! rate versus RIS size. All methods of one scenario see the same channel
//! draws, and every scenario owns independent rng streams derived from the
//! experiment seed, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{build_statistical_model, ChannelSample, ChannelSampler, ScenarioConfig, StatisticalModel};
use crate::error::{Error, Result};
use crate::linalg::CVec;
use crate::optimizer::{optimize, optimize_from, OptimizerOptions, OptimizerState, TraceRecord};
use crate::precoding::{
    bilinear_precode, bilinear_precode_per_sample, instantaneous_fp_bcd, instantaneous_rate, zf_waterfilling,
    BcdOptions,
};
use crate::stats::PhaseState;

const STREAM_MODEL: u64 = 1;
const STREAM_PHASE: u64 = 2;
const STREAM_DIRECT: u64 = 3;
const STREAM_RIS: u64 = 4;
const STREAM_OPTIMIZER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "convergence")]
    Convergence,
    #[serde(rename = "rate-vs-power")]
    RateVsPower,
    #[serde(rename = "rate-vs-N", alias = "rate-vs-n")]
    RateVsN,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Convergence => "convergence",
            Family::RateVsPower => "rate-vs-power",
            Family::RateVsN => "rate-vs-N",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convergence" => Ok(Family::Convergence),
            "rate-vs-power" => Ok(Family::RateVsPower),
            "rate-vs-n" => Ok(Family::RateVsN),
            _ => Err(Error::Config(format!("unknown experiment family '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Alg1Gmf,
    Alg2Bcd,
    Alg2Zf,
    RandomPhaseGmf,
    RandomPhaseBcd,
    NoRisGmf,
    NoRisBcd,
}

/// How the RIS is configured for a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseRule {
    Optimized,
    Random,
    NoRis,
}

/// Transmit filter rule applied per coherence interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    Bilinear,
    Bcd,
    ZeroForcing,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Alg1Gmf,
        Method::Alg2Bcd,
        Method::Alg2Zf,
        Method::RandomPhaseGmf,
        Method::RandomPhaseBcd,
        Method::NoRisGmf,
        Method::NoRisBcd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Alg1Gmf => "alg1-gmf",
            Method::Alg2Bcd => "alg2-bcd",
            Method::Alg2Zf => "alg2-zf",
            Method::RandomPhaseGmf => "random-phase-gmf",
            Method::RandomPhaseBcd => "random-phase-bcd",
            Method::NoRisGmf => "no-ris-gmf",
            Method::NoRisBcd => "no-ris-bcd",
        }
    }

    pub fn phase_rule(self) -> PhaseRule {
        match self {
            Method::Alg1Gmf | Method::Alg2Bcd | Method::Alg2Zf => PhaseRule::Optimized,
            Method::RandomPhaseGmf | Method::RandomPhaseBcd => PhaseRule::Random,
            Method::NoRisGmf | Method::NoRisBcd => PhaseRule::NoRis,
        }
    }

    pub fn filter_rule(self) -> FilterRule {
        match self {
            Method::Alg1Gmf | Method::RandomPhaseGmf | Method::NoRisGmf => FilterRule::Bilinear,
            Method::Alg2Bcd | Method::RandomPhaseBcd | Method::NoRisBcd => FilterRule::Bcd,
            Method::Alg2Zf => FilterRule::ZeroForcing,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub family: Family,
    pub power_grid_db: Vec<f64>,
    /// RIS sizes for the rate-vs-N family; ignored otherwise.
    pub n_grid: Vec<usize>,
    pub scenarios: usize,
    pub samples: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub optimizer: OptimizerOptions,
    pub bcd: BcdOptions,
    /// Rescale bilinear precoders to the budget in every interval.
    pub per_sample_power: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            family: Family::RateVsPower,
            power_grid_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            n_grid: vec![0, 8, 16, 32],
            scenarios: 20,
            samples: 200,
            methods: Method::ALL.to_vec(),
            seed: 1,
            scenario: ScenarioConfig::default(),
            optimizer: OptimizerOptions::default(),
            bcd: BcdOptions::default(),
            per_sample_power: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.power_grid_db.is_empty() {
            return Err(Error::Config("power grid is empty".into()));
        }
        if let Some(p) = self.power_grid_db.iter().find(|p| !p.is_finite()) {
            return Err(Error::Config(format!("power {p} dB is not finite")));
        }
        if self.scenarios == 0 || self.samples == 0 {
            return Err(Error::Config("scenario and sample counts must be at least 1".into()));
        }
        match self.family {
            Family::Convergence => {}
            Family::RateVsPower | Family::RateVsN => {
                if self.methods.is_empty() {
                    return Err(Error::Config("method list is empty".into()));
                }
                if self.family == Family::RateVsN && self.n_grid.is_empty() {
                    return Err(Error::Config("N grid is empty".into()));
                }
                if self.methods.contains(&Method::Alg2Zf) {
                    self.scenario.validate_zf()?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn ris_sizes(&self) -> Vec<usize> {
        match self.family {
            Family::RateVsN => self.n_grid.clone(),
            _ => vec![self.scenario.ris_elements],
        }
    }

    fn needs_ris(&self) -> bool {
        self.methods.iter().any(|m| m.phase_rule() != PhaseRule::NoRis)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Independent stream `purpose` of scenario `scenario`.
pub fn scenario_rng(seed: u64, scenario: usize, purpose: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((scenario as u64) << 8) | purpose);
    rng
}

/// Mean rate of one method at one grid point in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub method: Method,
    pub power_db: f64,
    pub n: usize,
    pub scenario: usize,
    pub samples: usize,
    pub mean_rate: f64,
    /// Sum of squared deviations of the per-sample rates from `mean_rate`.
    pub sum_sq_dev: f64,
    pub iterations: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: Method,
    pub power_db: f64,
    pub n: usize,
    pub scenarios: usize,
    pub samples: usize,
    pub mean_rate: f64,
    /// Standard error of `mean_rate` over all pooled samples.
    pub std_error: f64,
    pub mean_iterations: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub power_db: f64,
    pub scenario: usize,
    pub converged: bool,
    pub initial: TraceRecord,
    pub trace: Vec<TraceRecord>,
    pub seed: u64,
}

impl ConvergenceTrace {
    fn records(&self) -> impl Iterator<Item = &TraceRecord> {
        std::iter::once(&self.initial).chain(&self.trace)
    }

    /// First sweep whose relative rate change falls below `tol`.
    pub fn sweeps_to(&self, tol: f64) -> Option<usize> {
        self.records().zip(&self.trace).find_map(|(prev, cur)| {
            let change = (cur.rate - prev.rate).abs() / prev.rate.abs().max(f64::MIN_POSITIVE);
            (change < tol).then_some(cur.sweep)
        })
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.records()
            .zip(&self.trace)
            .all(|(prev, cur)| cur.rate >= prev.rate - tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub family: Family,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<ScenarioRecord>,
    pub aggregate: Vec<AggregateRecord>,
    pub traces: Vec<ConvergenceTrace>,
    pub wall_ms: f64,
}

impl ExperimentResult {
    pub fn aggregate_for(&self, method: Method, power_db: f64, n: usize) -> Option<&AggregateRecord> {
        self.aggregate
            .iter()
            .find(|r| r.method == method && r.power_db == power_db && r.n == n)
    }

    pub fn scenario_means(&self, method: Method, power_db: f64, n: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.power_db == power_db && r.n == n)
            .map(|r| r.mean_rate)
            .collect()
    }
}

/// Dispatches on `spec.family`.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    match spec.family {
        Family::Convergence => run_convergence(spec),
        Family::RateVsPower => run_rate_vs_power(spec),
        Family::RateVsN => run_rate_vs_n(spec),
    }
}

/// Optimizer traces for every power level, one scenario per index.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    expect_family(spec, Family::Convergence)?;
    spec.validate()?;
    let start = Instant::now();
    let per_scenario: Vec<Result<Vec<ConvergenceTrace>>> = (0..spec.scenarios)
        .into_par_iter()
        .map(|s| {
            let model = scenario_model(spec, s, spec.scenario.ris_elements)?;
            let options = optimizer_options(spec, s);
            spec.power_grid_db
                .iter()
                .map(|&p_db| {
                    let state = optimize(&model, db_to_linear(p_db), &options)?;
                    let trace = ConvergenceTrace {
                        power_db: p_db,
                        scenario: s,
                        converged: state.converged,
                        initial: state.initial,
                        trace: state.trace,
                        seed: spec.seed,
                    };
                    if !trace.is_monotone(1e-9) {
                        return Err(Error::Consistency(format!(
                            "trace at {p_db} dB in scenario {s} decreased"
                        )));
                    }
                    Ok(trace)
                })
                .collect()
        })
        .collect();
    let mut traces = Vec::new();
    for t in per_scenario {
        traces.extend(t?);
    }
    Ok(ExperimentResult {
        family: spec.family,
        seed: spec.seed,
        config_hash: spec.config_hash(),
        records: Vec::new(),
        aggregate: Vec::new(),
        traces,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn run_rate_vs_power(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    expect_family(spec, Family::RateVsPower)?;
    run_rate_family(spec)
}

pub fn run_rate_vs_n(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    expect_family(spec, Family::RateVsN)?;
    run_rate_family(spec)
}

fn expect_family(spec: &ExperimentSpec, family: Family) -> Result<()> {
    if spec.family != family {
        return Err(Error::Config(format!(
            "expected family {family}, spec has {}",
            spec.family
        )));
    }
    Ok(())
}

fn run_rate_family(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let start = Instant::now();
    let sizes = spec.ris_sizes();
    let per_scenario: Vec<Result<Vec<ScenarioRecord>>> = (0..spec.scenarios)
        .into_par_iter()
        .map(|s| {
            let mut out = Vec::new();
            for &n in &sizes {
                out.extend(evaluate_scenario(spec, s, n)?);
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_scenario {
        records.extend(r?);
    }
    let aggregate = aggregate(&records, spec);
    Ok(ExperimentResult {
        family: spec.family,
        seed: spec.seed,
        config_hash: spec.config_hash(),
        records,
        aggregate,
        traces: Vec::new(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Statistical model of scenario `s` with `n` RIS elements.
pub fn scenario_model(spec: &ExperimentSpec, s: usize, n: usize) -> Result<StatisticalModel> {
    let config = ScenarioConfig {
        ris_elements: if spec.needs_ris() || spec.family == Family::Convergence {
            n
        } else {
            0
        },
        ..spec.scenario.clone()
    };
    build_statistical_model(&config, &mut scenario_rng(spec.seed, s, STREAM_MODEL))
}

/// Optimizer options of scenario `s`, seeded from its own stream.
pub fn optimizer_options(spec: &ExperimentSpec, s: usize) -> OptimizerOptions {
    OptimizerOptions {
        seed: scenario_rng(spec.seed, s, STREAM_OPTIMIZER).next_u64(),
        ..spec.optimizer.clone()
    }
}

/// Draws shared by every method of one scenario. Direct links use their own
/// stream so they coincide across RIS sizes.
fn draw_samples(spec: &ExperimentSpec, s: usize, model: &StatisticalModel) -> Result<Vec<ChannelSample>> {
    let sampler = ChannelSampler::new(model)?;
    let phase = PhaseState::zeros(model.ris_elements());
    let mut direct = scenario_rng(spec.seed, s, STREAM_DIRECT);
    let mut ris = scenario_rng(spec.seed, s, STREAM_RIS);
    Ok((0..spec.samples)
        .map(|_| sampler.sample_split(&phase, &mut direct, &mut ris))
        .collect())
}

/// Running mean and squared deviations with compensated summation.
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    count: usize,
    sum: f64,
    comp: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

fn summarize(rates: &[f64]) -> (f64, f64) {
    let mut m = Moments::default();
    rates.iter().for_each(|&r| m.push(r));
    let mean = m.mean();
    let mut dev = Moments::default();
    rates.iter().for_each(|&r| dev.push((r - mean).powi(2)));
    (mean, dev.sum)
}

fn evaluate_scenario(spec: &ExperimentSpec, s: usize, n: usize) -> Result<Vec<ScenarioRecord>> {
    let model = scenario_model(spec, s, n)?;
    let samples = draw_samples(spec, s, &model)?;
    let options = optimizer_options(spec, s);
    let random_phase = PhaseState::random(model.ris_elements(), &mut scenario_rng(spec.seed, s, STREAM_PHASE));
    let no_ris = model.without_ris();

    let mut out = Vec::with_capacity(spec.methods.len() * spec.power_grid_db.len());
    for &p_db in &spec.power_grid_db {
        let budget = db_to_linear(p_db);
        // One offline design per phase rule, shared by its filter rules.
        let mut designs: Vec<(PhaseRule, OptimizerState, f64)> = Vec::new();
        for &method in &spec.methods {
            let t0 = Instant::now();
            let rule = method.phase_rule();
            let mut offline_ms = 0.0;
            if method.filter_rule() == FilterRule::Bilinear || rule == PhaseRule::Optimized {
                if !designs.iter().any(|(r, _, _)| *r == rule) {
                    let state = match rule {
                        PhaseRule::Optimized => optimize(&model, budget, &options)?,
                        PhaseRule::Random => {
                            let fixed = OptimizerOptions {
                                optimize_phase: false,
                                ..options.clone()
                            };
                            optimize_from(&model, budget, &fixed, Some(random_phase.clone()))?
                        }
                        PhaseRule::NoRis => optimize(&no_ris, budget, &options)?,
                    };
                    offline_ms = t0.elapsed().as_secs_f64() * 1e3;
                    designs.push((rule, state, offline_ms));
                } else if let Some((_, _, ms)) = designs.iter().find(|(r, _, _)| *r == rule) {
                    offline_ms = *ms;
                }
            }
            let t1 = Instant::now();
            let design = designs.iter().find(|(r, _, _)| *r == rule).map(|(_, st, _)| st);
            let phase = match rule {
                PhaseRule::Optimized => design.map(|st| st.phase.clone()).expect("optimized design exists"),
                PhaseRule::Random => random_phase.clone(),
                PhaseRule::NoRis => PhaseState::zeros(0),
            };
            let channels = |sample: &ChannelSample| -> Vec<CVec> {
                match rule {
                    PhaseRule::NoRis => sample.hd.clone(),
                    _ => sample.effective_channels(&phase),
                }
            };
            let mut rates = Vec::with_capacity(samples.len());
            let mut iterations = 0.0;
            match method.filter_rule() {
                FilterRule::Bilinear => {
                    let state = design.expect("bilinear design exists");
                    let a = state.transforms();
                    for sample in &samples {
                        let h = channels(sample);
                        let set = if spec.per_sample_power {
                            bilinear_precode_per_sample(&a, &h, budget)
                        } else {
                            bilinear_precode(&a, &h, budget)
                        };
                        rates.push(instantaneous_rate(&h, &set.p));
                    }
                    iterations = state.sweeps() as f64;
                }
                FilterRule::Bcd => {
                    let mut total = 0usize;
                    for sample in &samples {
                        let h = channels(sample);
                        let outcome = instantaneous_fp_bcd(&h, budget, &spec.bcd)?;
                        total += outcome.trace.len() - 1;
                        rates.push(*outcome.trace.last().expect("trace is nonempty"));
                    }
                    iterations = total as f64 / samples.len() as f64;
                }
                FilterRule::ZeroForcing => {
                    for sample in &samples {
                        rates.push(zf_waterfilling(&channels(sample), budget)?.rate());
                    }
                }
            }
            let (mean_rate, sum_sq_dev) = summarize(&rates);
            out.push(ScenarioRecord {
                method,
                power_db: p_db,
                n,
                scenario: s,
                samples: rates.len(),
                mean_rate,
                sum_sq_dev,
                iterations,
                wall_ms: offline_ms + t1.elapsed().as_secs_f64() * 1e3,
                seed: spec.seed,
            });
        }
    }
    Ok(out)
}

/// Pools per-scenario records in scenario order. The standard error treats
/// all `scenarios × samples` rates as one sample.
fn aggregate(records: &[ScenarioRecord], spec: &ExperimentSpec) -> Vec<AggregateRecord> {
    let mut out = Vec::new();
    for &n in &spec.ris_sizes() {
        for &p_db in &spec.power_grid_db {
            for &method in &spec.methods {
                let group: Vec<&ScenarioRecord> = records
                    .iter()
                    .filter(|r| r.method == method && r.power_db == p_db && r.n == n)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let mut weighted = Moments::default();
                let mut iters = Moments::default();
                let total: usize = group.iter().map(|r| r.samples).sum();
                for r in &group {
                    weighted.push(r.mean_rate * r.samples as f64);
                    iters.push(r.iterations);
                }
                let mean = weighted.sum / total as f64;
                let mut ss = Moments::default();
                for r in &group {
                    ss.push(r.sum_sq_dev);
                    ss.push(r.samples as f64 * (r.mean_rate - mean).powi(2));
                }
                let std_error = if total > 1 {
                    (ss.sum / (total - 1) as f64 / total as f64).sqrt()
                } else {
                    0.0
                };
                out.push(AggregateRecord {
                    method,
                    power_db: p_db,
                    n,
                    scenarios: group.len(),
                    samples: total,
                    mean_rate: mean,
                    std_error,
                    mean_iterations: iters.mean(),
                    seed: spec.seed,
                });
            }
        }
    }
    out
}

fn csv_text<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// One row per method × grid point × scenario, including wall time.
pub fn scenario_table(result: &ExperimentResult) -> Result<String> {
    csv_text(&result.records)
}

/// Aggregate rows; free of timing so repeated runs compare byte for byte.
pub fn aggregate_table(result: &ExperimentResult) -> Result<String> {
    csv_text(&result.aggregate)
}

#[derive(Serialize)]
struct TraceRow {
    scenario: usize,
    power_db: f64,
    sweep: usize,
    surrogate: f64,
    rate: f64,
    kappa: f64,
    grad_norm: f64,
    power: f64,
    seed: u64,
}

/// Long-format sweep table of every convergence trace.
pub fn trace_table(result: &ExperimentResult) -> Result<String> {
    let rows: Vec<TraceRow> = result
        .traces
        .iter()
        .flat_map(|t| {
            std::iter::once(&t.initial).chain(&t.trace).map(move |r| TraceRow {
                scenario: t.scenario,
                power_db: t.power_db,
                sweep: r.sweep,
                surrogate: r.surrogate,
                rate: r.rate,
                kappa: r.kappa,
                grad_norm: r.grad_norm,
                power: r.power,
                seed: t.seed,
            })
        })
        .collect();
    csv_text(&rows)
}
