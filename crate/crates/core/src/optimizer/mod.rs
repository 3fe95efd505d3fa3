//! Block coordinate ascent over `(λ, χ, a, φ)` for the fractional-programming
//! form of the statistical lower-bound sum rate.
//!
//! Rates are handled in nats internally and reported in bits.

pub mod gradient;

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::channel::StatisticalModel;
use crate::error::{Error, Result};
use crate::linalg::{self, kron, real, unvec, vec_of, CMat, CVec, C64};
use crate::stats::{
    effective_covariance, sinr_terms, transmit_power, variance_context, variance_operators, EffectiveCovarianceSet,
    PhaseState, SinrTerms, VarianceContext,
};

pub use gradient::{build_gradient_cache, phase_gradient, GradientCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AUpdate {
    /// Noise term replaced by normalised power, then scaled.
    ClosedForm,
    /// Lagrange multiplier found by bisection.
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerScaling {
    /// Scale down only when the budget is exceeded.
    #[default]
    IfViolating,
    /// Always scale to exactly the budget.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseObjective {
    /// The surrogate with unit noise power.
    Surrogate,
    /// The surrogate with noise replaced by transmit power over `P`, which is
    /// invariant to rescaling `(a, χ) → (s·a, χ/s)`.
    PowerNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmijoOptions {
    pub kappa0: f64,
    /// When set, the first trial step moves the largest angle by this much
    /// instead of starting from `kappa0`.
    #[serde(default)]
    pub max_initial_angle: Option<f64>,
    pub tau: f64,
    pub c: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoOptions {
    fn default() -> Self {
        Self {
            kappa0: 1.0,
            max_initial_angle: Some(0.5),
            tau: 0.5,
            c: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    /// Relative change of the lower-bound rate that stops the loop.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: ArmijoOptions,
    pub a_update: AUpdate,
    pub scaling: PowerScaling,
    pub phase_objective: PhaseObjective,
    /// Armijo steps per sweep.
    pub inner_steps: usize,
    /// Retry singular solves once with a small diagonal load.
    pub jitter: bool,
    /// Fail when the rate decreases by more than `1e-9`.
    pub check_monotone: bool,
    /// When false the phase block is skipped (filter-only design).
    pub optimize_phase: bool,
    /// Try a step along the previous sweep's phase change after every sweep,
    /// kept only when it raises the lower-bound rate.
    #[serde(default)]
    pub extrapolate: bool,
    pub seed: u64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            armijo: ArmijoOptions::default(),
            a_update: AUpdate::ClosedForm,
            scaling: PowerScaling::Exact,
            phase_objective: PhaseObjective::PowerNormalized,
            inner_steps: 1,
            jitter: true,
            check_monotone: true,
            optimize_phase: true,
            extrapolate: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sweep: usize,
    /// Surrogate value (nats) at the end of the sweep.
    pub surrogate: f64,
    /// Lower-bound sum rate in bits per channel use.
    pub rate: f64,
    /// Accepted Armijo step, zero when the phase step stalled.
    pub kappa: f64,
    pub grad_norm: f64,
    /// Σ tr(A_k C_k A_kᴴ) at the end of the sweep.
    pub power: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lambda: Vec<f64>,
    pub chi: Vec<C64>,
    pub a: Vec<CVec>,
    pub phase: PhaseState,
    /// State after initialisation, before the first sweep.
    pub initial: TraceRecord,
    /// One record per completed sweep.
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
}

impl OptimizerState {
    pub fn transforms(&self) -> Vec<CMat> {
        self.a
            .iter()
            .map(|v| {
                let m = (v.len() as f64).sqrt().round() as usize;
                unvec(v, m, m)
            })
            .collect()
    }

    pub fn final_rate(&self) -> f64 {
        self.trace.last().map_or(self.initial.rate, |r| r.rate)
    }

    pub fn sweeps(&self) -> usize {
        self.trace.len()
    }

    /// Rates of the initial point followed by every sweep.
    pub fn rates(&self) -> Vec<f64> {
        std::iter::once(self.initial.rate)
            .chain(self.trace.iter().map(|r| r.rate))
            .collect()
    }
}

/// Everything the `a`, `λ`, `χ` blocks need at one phase state.
#[derive(Debug, Clone)]
pub struct Statistics {
    pub cov: EffectiveCovarianceSet,
    pub ctx: VarianceContext,
}

impl Statistics {
    /// With explicit `J_k`, as needed by the `a`-update.
    pub fn full(model: &StatisticalModel, phase: &PhaseState) -> Result<Self> {
        Ok(Self {
            cov: effective_covariance(model, phase)?,
            ctx: variance_context(model, phase)?,
        })
    }

    /// Matrix-free variant for objective evaluations.
    pub fn light(model: &StatisticalModel, phase: &PhaseState) -> Result<Self> {
        Ok(Self {
            cov: effective_covariance(model, phase)?,
            ctx: variance_operators(model, phase)?,
        })
    }

    pub fn terms(&self, a: &[CVec]) -> Result<Vec<SinrTerms>> {
        sinr_terms(a, &self.cov, &self.ctx)
    }

    pub fn power(&self, a: &[CVec]) -> f64 {
        transmit_power(a, &self.cov.c)
    }
}

/// `Σ_k [ln(1+λ) − λ + 2√(1+λ) Re{χ* cᴴa} − |χ|²(|cᴴa|² + I_k + aᴴJa + noise)]`.
fn surrogate_with_noise(lambda: &[f64], chi: &[C64], terms: &[SinrTerms], noise: f64) -> f64 {
    lambda
        .iter()
        .zip(chi)
        .zip(terms)
        .map(|((&l, x), t)| {
            l.ln_1p() - l + 2.0 * (1.0 + l).sqrt() * (x.conj() * t.useful).re
                - x.norm_sqr() * (t.useful.norm_sqr() + t.interference + t.fourth_order + noise)
        })
        .sum()
}

/// The surrogate `f` in nats.
pub fn surrogate_objective(lambda: &[f64], chi: &[C64], terms: &[SinrTerms]) -> f64 {
    surrogate_with_noise(lambda, chi, terms, 1.0)
}

/// The surrogate with the unit noise replaced by `power / P`.
pub fn surrogate_objective_normalized(
    lambda: &[f64],
    chi: &[C64],
    terms: &[SinrTerms],
    power: f64,
    budget: f64,
) -> f64 {
    surrogate_with_noise(lambda, chi, terms, power / budget)
}

/// `Σ ln(1 + γ_k)`.
pub fn log_rate(terms: &[SinrTerms]) -> f64 {
    terms.iter().map(|t| t.sinr().ln_1p()).sum()
}

/// `λ = γ`.
pub fn update_lambda(gammas: &[f64]) -> Result<Vec<f64>> {
    if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0)) {
        return Err(Error::Domain(format!("SINR must be nonnegative, got {g}")));
    }
    Ok(gammas.to_vec())
}

/// `χ_k = √(1+λ_k) cᴴa / (|cᴴa|² + I_k + aᴴJa + 1)`.
pub fn update_chi(lambda: &[f64], terms: &[SinrTerms]) -> Vec<C64> {
    lambda
        .iter()
        .zip(terms)
        .map(|(&l, t)| t.useful * ((1.0 + l).sqrt() / (t.useful.norm_sqr() + t.denominator())))
        .collect()
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Domain(format!("power budget must be positive, got {budget}")));
    }
    Ok(())
}

/// Solves `(|χ_k|²(c cᴴ + J_k) + C_kᵀ ⊗ (Σ_j |χ_j|² C_j + μ I)) a_k = χ_k √(1+λ_k) c_k`.
fn solve_a(lambda: &[f64], chi: &[C64], stats: &Statistics, mu: f64, jitter: bool) -> Result<Vec<CVec>> {
    let c = &stats.cov.c;
    let m = c.first().map_or(0, |x| x.nrows());
    let mut s = CMat::identity(m, m) * real(mu);
    for (x, cj) in chi.iter().zip(c) {
        s += cj * real(x.norm_sqr());
    }
    (0..c.len())
        .map(|k| {
            let ck = vec_of(&c[k]);
            if chi[k] == C64::new(0.0, 0.0) {
                return Ok(CVec::zeros(m * m));
            }
            let w = chi[k].norm_sqr();
            let mut h = kron(&c[k].transpose(), &s);
            h += (&ck * ck.adjoint() + &stats.ctx.j[k]) * real(w);
            let rhs = &ck * (chi[k] * (1.0 + lambda[k]).sqrt());
            linalg::solve_hermitian_vec(&h, &rhs, jitter).map_err(|e| match e {
                Error::Singular { .. } => Error::Degenerate(format!("a-update system for user {k} is singular")),
                other => other,
            })
        })
        .collect()
}

/// Closed-form `a`-update with the noise replaced by `Σ_j |χ_j|²/P`.
pub fn update_a_unconstrained(
    lambda: &[f64],
    chi: &[C64],
    stats: &Statistics,
    budget: f64,
    jitter: bool,
) -> Result<Vec<CVec>> {
    check_budget(budget)?;
    let total: f64 = chi.iter().map(|x| x.norm_sqr()).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all χ are zero".into()));
    }
    solve_a(lambda, chi, stats, total / budget, jitter)
}

/// Result of the bisection-based `a`-update.
#[derive(Debug, Clone)]
pub struct BisectionOutcome {
    pub a: Vec<CVec>,
    pub mu: f64,
    pub power: f64,
}

/// `a`-update with the Lagrange multiplier `μ` of the power constraint found
/// by bisection. `μ = 0` when the unconstrained maximiser is feasible.
pub fn update_a_bisection(
    lambda: &[f64],
    chi: &[C64],
    stats: &Statistics,
    budget: f64,
    jitter: bool,
) -> Result<BisectionOutcome> {
    check_budget(budget)?;
    let total: f64 = chi.iter().map(|x| x.norm_sqr()).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all χ are zero".into()));
    }
    let eval = |mu: f64| -> Result<(Vec<CVec>, f64)> {
        let a = solve_a(lambda, chi, stats, mu, jitter)?;
        let p = stats.power(&a);
        Ok((a, p))
    };
    if let Ok((a, p)) = eval(0.0) {
        if p.is_finite() && p <= budget {
            return Ok(BisectionOutcome { a, mu: 0.0, power: p });
        }
    }
    let mut hi = total / budget;
    let mut hi_eval = None;
    for _ in 0..200 {
        let (a, p) = eval(hi)?;
        if p <= budget {
            hi_eval = Some((a, p));
            break;
        }
        hi *= 2.0;
    }
    let Some(mut best) = hi_eval else {
        return Err(Error::Numerical("power bisection could not bracket the budget".into()));
    };
    let mut lo = 0.0;
    for _ in 0..200 {
        if budget - best.1 <= 1e-8 * budget {
            break;
        }
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        match eval(mid) {
            Ok((a, p)) if p <= budget => {
                hi = mid;
                best = (a, p);
            }
            Ok(_) | Err(Error::Singular { .. }) | Err(Error::Degenerate(_)) => lo = mid,
            Err(e) => return Err(e),
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(BisectionOutcome {
        a: best.0,
        mu: hi,
        power: best.1,
    })
}

/// Scales every `a_k` by the common factor `√(P / power)`, either always
/// (`Exact`) or only when the budget is exceeded. Returns the factor applied.
pub fn scale_to_power(a: &[CVec], c: &[CMat], budget: f64, policy: PowerScaling) -> (Vec<CVec>, f64) {
    let power = transmit_power(a, c);
    if !(power > 0.0) || !power.is_finite() {
        return (a.to_vec(), 1.0);
    }
    let scale = match policy {
        PowerScaling::Exact => (budget / power).sqrt(),
        PowerScaling::IfViolating if power > budget => (budget / power).sqrt(),
        PowerScaling::IfViolating => 1.0,
    };
    if scale == 1.0 {
        return (a.to_vec(), 1.0);
    }
    (a.iter().map(|v| v * real(scale)).collect(), scale)
}

/// Outcome of one backtracking step.
#[derive(Debug, Clone)]
pub struct ArmijoOutcome {
    pub phase: PhaseState,
    pub value: f64,
    /// Accepted step size, zero when no step was accepted.
    pub kappa: f64,
}

/// Backtracking ascent `ϕ ← ϕ + κ g`, accepting when
/// `f(new) ≥ f(old) + c κ ‖g‖²`. Returns the old phase on a stall.
pub fn armijo_ascent_step<F>(
    phase: &PhaseState,
    value: f64,
    gradient: &[f64],
    mut evaluate: F,
    opts: &ArmijoOptions,
) -> Result<ArmijoOutcome>
where
    F: FnMut(&PhaseState) -> Result<f64>,
{
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite objective before phase step".into()));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite phase gradient".into()));
    }
    let norm_sq: f64 = gradient.iter().map(|g| g * g).sum();
    let stalled = ArmijoOutcome {
        phase: phase.clone(),
        value,
        kappa: 0.0,
    };
    if norm_sq == 0.0 {
        return Ok(stalled);
    }
    let mut kappa = match opts.max_initial_angle {
        Some(angle) => angle / gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        None => opts.kappa0,
    };
    for _ in 0..=opts.max_backtracks {
        let step: Vec<f64> = gradient.iter().map(|g| kappa * g).collect();
        let trial = phase.shifted(&step);
        let v = evaluate(&trial)?;
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite objective during line search".into()));
        }
        if v >= value + opts.c * kappa * norm_sq {
            return Ok(ArmijoOutcome {
                phase: trial,
                value: v,
                kappa,
            });
        }
        kappa *= opts.tau;
    }
    Ok(stalled)
}

/// Phase-block objective at fixed `(λ, χ, a)`.
pub fn phase_objective(
    model: &StatisticalModel,
    phase: &PhaseState,
    lambda: &[f64],
    chi: &[C64],
    a: &[CVec],
    budget: f64,
    kind: PhaseObjective,
) -> Result<f64> {
    let stats = Statistics::light(model, phase)?;
    let terms = stats.terms(a)?;
    Ok(match kind {
        PhaseObjective::Surrogate => surrogate_objective(lambda, chi, &terms),
        PhaseObjective::PowerNormalized => surrogate_objective_normalized(lambda, chi, &terms, stats.power(a), budget),
    })
}

/// Runs the block coordinate ascent for power budget `budget` (linear),
/// starting from uniformly random phases.
pub fn optimize(model: &StatisticalModel, budget: f64, options: &OptimizerOptions) -> Result<OptimizerState> {
    optimize_from(model, budget, options, None)
}

/// As [`optimize`], optionally from a given initial phase.
pub fn optimize_from(
    model: &StatisticalModel,
    budget: f64,
    options: &OptimizerOptions,
    initial_phase: Option<PhaseState>,
) -> Result<OptimizerState> {
    check_budget(budget)?;
    model.check_dimensions()?;
    let k_users = model.users();
    let n = model.ris_elements();
    let mut phase = match initial_phase {
        Some(p) if p.len() == n => p,
        Some(p) => {
            return Err(Error::Dimension(format!(
                "initial phase has {} entries, RIS has {n} elements",
                p.len()
            )))
        }
        None => PhaseState::random(n, &mut ChaCha20Rng::seed_from_u64(options.seed)),
    };
    let mut lambda = vec![1.0; k_users];
    let mut chi = vec![real(0.1); k_users];

    let mut stats = Statistics::full(model, &phase)?;
    let a0 = update_a(&lambda, &chi, &stats, budget, options)?;
    let (mut a, s) = scale_to_power(&a0, &stats.cov.c, budget, options.scaling);
    rescale_chi(&mut chi, s, options.scaling);

    let mut terms = stats.terms(&a)?;
    let mut rate = log_rate(&terms);
    let initial = TraceRecord {
        sweep: 0,
        surrogate: surrogate_objective(&lambda, &chi, &terms),
        rate: rate / LN_2,
        kappa: 0.0,
        grad_norm: 0.0,
        power: stats.power(&a),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_angles = phase.angles.clone();
    let mut omega = 1.0;

    for sweep in 1..=options.max_iter {
        // λ and χ blocks.
        let gammas: Vec<f64> = terms.iter().map(SinrTerms::sinr).collect();
        lambda = update_lambda(&gammas)?;
        chi = update_chi(&lambda, &terms);
        if chi.iter().all(|x| x.norm_sqr() == 0.0) {
            chi = vec![real(0.1); k_users];
        }

        // a block, kept only if it does not lower the block objective.
        let block_value = |a: &[CVec], chi: &[C64], stats: &Statistics| -> Result<f64> {
            let t = stats.terms(a)?;
            Ok(surrogate_objective_normalized(&lambda, chi, &t, stats.power(a), budget))
        };
        let before = block_value(&a, &chi, &stats)?;
        match update_a(&lambda, &chi, &stats, budget, options) {
            Ok(candidate) => {
                let (scaled, s) = scale_to_power(&candidate, &stats.cov.c, budget, options.scaling);
                let mut chi_c = chi.clone();
                rescale_chi(&mut chi_c, s, options.scaling);
                if block_value(&scaled, &chi_c, &stats)? >= before {
                    a = scaled;
                    chi = chi_c;
                }
            }
            Err(e @ Error::Degenerate(_)) if !options.jitter => return Err(e),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }

        // φ block.
        let mut kappa = 0.0;
        let mut grad_norm = 0.0;
        if n > 0 && options.optimize_phase {
            let kind = options.phase_objective;
            let weight = match kind {
                PhaseObjective::Surrogate => 0.0,
                PhaseObjective::PowerNormalized => chi.iter().map(|x| x.norm_sqr()).sum::<f64>() / budget,
            };
            let mats: Vec<CMat> = a.iter().map(|v| unvec(v, model.antennas(), model.antennas())).collect();
            for _ in 0..options.inner_steps.max(1) {
                let cache = build_gradient_cache(model, &phase, &mats, &lambda, &chi, weight)?;
                let grad = phase_gradient(&cache, &phase);
                grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                let value = phase_objective(model, &phase, &lambda, &chi, &a, budget, kind)?;
                let outcome = armijo_ascent_step(
                    &phase,
                    value,
                    &grad,
                    |p| phase_objective(model, p, &lambda, &chi, &a, budget, kind),
                    &options.armijo,
                )?;
                kappa = outcome.kappa;
                phase = outcome.phase;
                if outcome.kappa == 0.0 {
                    break;
                }
            }
            stats = Statistics::full(model, &phase)?;
            let (scaled, s) = scale_to_power(&a, &stats.cov.c, budget, options.scaling);
            a = scaled;
            rescale_chi(&mut chi, s, options.scaling);
        }

        terms = stats.terms(&a)?;
        let mut new_rate = log_rate(&terms);
        if options.extrapolate && n > 0 && options.optimize_phase {
            let step: Vec<f64> = phase
                .angles
                .iter()
                .zip(&prev_angles)
                .map(|(x, y)| omega * (x - y))
                .collect();
            if step.iter().any(|d| *d != 0.0) {
                let trial = extrapolated(model, &phase.shifted(&step), &a, &chi, budget, options)?;
                if let Some(t) = trial.filter(|t| t.rate > new_rate) {
                    phase = t.phase;
                    stats = t.stats;
                    lambda = t.lambda;
                    chi = t.chi;
                    a = t.a;
                    terms = t.terms;
                    new_rate = t.rate;
                    omega = (2.0 * omega).min(MAX_EXTRAPOLATION);
                } else {
                    omega = (0.5 * omega).max(MIN_EXTRAPOLATION);
                }
            }
            prev_angles = phase.angles.clone();
        }
        trace.push(TraceRecord {
            sweep,
            surrogate: surrogate_objective(&lambda, &chi, &terms),
            rate: new_rate / LN_2,
            kappa,
            grad_norm,
            power: stats.power(&a),
        });
        if options.check_monotone && new_rate / LN_2 < rate / LN_2 - 1e-9 {
            return Err(Error::Consistency(format!(
                "lower-bound rate decreased at sweep {sweep}: {} -> {}",
                rate / LN_2,
                new_rate / LN_2
            )));
        }
        let change = (new_rate - rate).abs() / rate.abs().max(f64::MIN_POSITIVE);
        rate = new_rate;
        if change < options.tol {
            converged = true;
            break;
        }
    }

    Ok(OptimizerState {
        lambda,
        chi,
        a,
        phase,
        initial,
        trace,
        converged,
    })
}

const MAX_EXTRAPOLATION: f64 = 16.0;
const MIN_EXTRAPOLATION: f64 = 0.25;

struct Extrapolated {
    phase: PhaseState,
    stats: Statistics,
    lambda: Vec<f64>,
    chi: Vec<C64>,
    a: Vec<CVec>,
    terms: Vec<SinrTerms>,
    rate: f64,
}

/// One `λ, χ, a` round at a trial phase. `None` when the round cannot be
/// completed (degenerate weights), which simply rejects the trial.
fn extrapolated(
    model: &StatisticalModel,
    phase: &PhaseState,
    a: &[CVec],
    chi: &[C64],
    budget: f64,
    options: &OptimizerOptions,
) -> Result<Option<Extrapolated>> {
    let stats = Statistics::full(model, phase)?;
    let (a, s) = scale_to_power(a, &stats.cov.c, budget, options.scaling);
    let mut chi = chi.to_vec();
    rescale_chi(&mut chi, s, options.scaling);
    let terms = stats.terms(&a)?;
    let gammas: Vec<f64> = terms.iter().map(SinrTerms::sinr).collect();
    let lambda = update_lambda(&gammas)?;
    let mut chi = update_chi(&lambda, &terms);
    let candidate = match update_a(&lambda, &chi, &stats, budget, options) {
        Ok(c) => c,
        Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (a, s) = scale_to_power(&candidate, &stats.cov.c, budget, options.scaling);
    rescale_chi(&mut chi, s, options.scaling);
    let terms = stats.terms(&a)?;
    let rate = log_rate(&terms);
    if !rate.is_finite() {
        return Ok(None);
    }
    Ok(Some(Extrapolated {
        phase: phase.clone(),
        stats,
        lambda,
        chi,
        a,
        terms,
        rate,
    }))
}

fn update_a(
    lambda: &[f64],
    chi: &[C64],
    stats: &Statistics,
    budget: f64,
    options: &OptimizerOptions,
) -> Result<Vec<CVec>> {
    match options.a_update {
        AUpdate::ClosedForm => update_a_unconstrained(lambda, chi, stats, budget, options.jitter),
        AUpdate::Bisection => Ok(update_a_bisection(lambda, chi, stats, budget, options.jitter)?.a),
    }
}

/// Keeps `χ_k · a_k` fixed when `a` was rescaled to the exact budget.
fn rescale_chi(chi: &mut [C64], scale: f64, policy: PowerScaling) {
    if policy == PowerScaling::Exact && scale > 0.0 && scale != 1.0 {
        chi.iter_mut().for_each(|x| *x /= scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_statistical_model, complex_gaussian_vec, ScenarioConfig};
    use crate::linalg::c;

    fn desk_model(m: usize, n: usize, k: usize, seed: u64) -> StatisticalModel {
        let cfg = ScenarioConfig {
            antennas: m,
            ris_elements: n,
            users: k,
            ..ScenarioConfig::default()
        };
        build_statistical_model(&cfg, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_state(model: &StatisticalModel, seed: u64) -> (PhaseState, Statistics, Vec<CVec>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let phase = PhaseState::random(model.ris_elements(), &mut rng);
        let stats = Statistics::full(model, &phase).unwrap();
        let m = model.antennas();
        let a = (0..model.users())
            .map(|_| complex_gaussian_vec(m * m, &mut rng))
            .collect();
        (phase, stats, a)
    }

    fn quick_options() -> OptimizerOptions {
        OptimizerOptions {
            max_iter: 60,
            ..OptimizerOptions::default()
        }
    }

    #[test]
    fn fp_updates_make_surrogate_tight() {
        let model = desk_model(4, 6, 3, 1);
        for seed in 0..5 {
            let (_, stats, a) = random_state(&model, seed);
            let terms = stats.terms(&a).unwrap();
            let gammas: Vec<f64> = terms.iter().map(SinrTerms::sinr).collect();
            let lambda = update_lambda(&gammas).unwrap();
            let chi = update_chi(&lambda, &terms);
            let f = surrogate_objective(&lambda, &chi, &terms);
            assert!((f - log_rate(&terms)).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_and_chi_updates_are_block_maximisers() {
        let model = desk_model(4, 6, 2, 2);
        let (_, stats, a) = random_state(&model, 3);
        let terms = stats.terms(&a).unwrap();
        let gammas: Vec<f64> = terms.iter().map(SinrTerms::sinr).collect();
        let lambda = update_lambda(&gammas).unwrap();
        let chi = update_chi(&lambda, &terms);
        let best = surrogate_objective(&lambda, &chi, &terms);
        for d in [-0.1, -1e-3, 1e-3, 0.1] {
            let l: Vec<f64> = lambda.iter().map(|x| (x + d).max(0.0)).collect();
            let x: Vec<C64> = update_chi(&l, &terms);
            assert!(surrogate_objective(&l, &x, &terms) <= best + 1e-12);
            let x: Vec<C64> = chi.iter().map(|x| x + c(d, -d)).collect();
            assert!(surrogate_objective(&lambda, &x, &terms) <= best + 1e-12);
        }
    }

    #[test]
    fn negative_sinr_is_rejected() {
        assert!(matches!(update_lambda(&[0.5, -1e-3]), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_scaling_hits_the_budget() {
        let model = desk_model(4, 6, 3, 4);
        let (_, stats, a) = random_state(&model, 5);
        for budget in [0.1, 1.0, 1000.0] {
            let (scaled, s) = scale_to_power(&a, &stats.cov.c, budget, PowerScaling::Exact);
            assert!((stats.power(&scaled) - budget).abs() <= 1e-12 * budget);
            assert!(s > 0.0);
        }
        let tiny = stats.power(&a) * 2.0;
        let (kept, s) = scale_to_power(&a, &stats.cov.c, tiny, PowerScaling::IfViolating);
        assert_eq!(s, 1.0);
        assert_eq!(kept, a);
    }

    #[test]
    fn zero_chi_gives_zero_filter() {
        let model = desk_model(4, 6, 3, 6);
        let (_, stats, _) = random_state(&model, 7);
        let chi = vec![c(0.3, 0.1), c(0.0, 0.0), c(-0.2, 0.4)];
        let a = update_a_unconstrained(&[1.0, 1.0, 1.0], &chi, &stats, 10.0, false).unwrap();
        assert!(a[1].iter().all(|z| z.norm() == 0.0));
        assert!(a[0].norm() > 0.0 && a[2].norm() > 0.0);
        let zero = vec![c(0.0, 0.0); 3];
        assert!(matches!(
            update_a_unconstrained(&[1.0; 3], &zero, &stats, 10.0, false),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bisection_meets_budget_when_active() {
        let model = desk_model(4, 6, 3, 8);
        let (_, stats, a) = random_state(&model, 9);
        let terms = stats.terms(&a).unwrap();
        let gammas: Vec<f64> = terms.iter().map(SinrTerms::sinr).collect();
        let lambda = update_lambda(&gammas).unwrap();
        let chi = update_chi(&lambda, &terms);
        for budget in [0.01, 1.0, 100.0] {
            let out = update_a_bisection(&lambda, &chi, &stats, budget, false).unwrap();
            assert!(out.power <= budget * (1.0 + 1e-12));
            if out.mu > 0.0 {
                assert!((out.power - budget).abs() <= 1e-6 * budget, "{} vs {budget}", out.power);
            }
        }
    }

    #[test]
    fn bisection_and_closed_form_agree_at_fixed_phase() {
        for seed in 0..3 {
            let model = desk_model(4, 8, 2, 20 + seed);
            let fixed = OptimizerOptions {
                optimize_phase: false,
                max_iter: 500,
                ..quick_options()
            };
            let closed = optimize(&model, 10.0, &fixed).unwrap();
            let bisect = optimize(
                &model,
                10.0,
                &OptimizerOptions {
                    a_update: AUpdate::Bisection,
                    ..fixed
                },
            )
            .unwrap();
            let (x, y) = (closed.final_rate(), bisect.final_rate());
            assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn armijo_ascends_a_toy_objective() {
        let target = [0.4, -1.2, 2.0];
        let f = |p: &PhaseState| -> Result<f64> { Ok(p.angles.iter().zip(target).map(|(a, t)| (a - t).cos()).sum()) };
        let phase = PhaseState::zeros(3);
        let value = f(&phase).unwrap();
        let grad: Vec<f64> = target.iter().map(|t| t.sin()).collect();
        let opts = ArmijoOptions::default();
        let out = armijo_ascent_step(&phase, value, &grad, f, &opts).unwrap();
        let norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        assert!(out.kappa > 0.0);
        assert!(out.value >= value + opts.c * out.kappa * norm_sq);
    }

    #[test]
    fn armijo_stalls_on_zero_gradient() {
        let phase = PhaseState::zeros(2);
        let out = armijo_ascent_step(&phase, 1.0, &[0.0, 0.0], |_| Ok(0.0), &ArmijoOptions::default()).unwrap();
        assert_eq!(out.kappa, 0.0);
        assert_eq!(out.phase, phase);
    }

    #[test]
    fn gradient_vanishes_without_chi() {
        let model = desk_model(4, 6, 2, 10);
        let (phase, _, a) = random_state(&model, 11);
        let mats: Vec<CMat> = a.iter().map(|v| unvec(v, 4, 4)).collect();
        let cache = build_gradient_cache(&model, &phase, &mats, &[1.0, 1.0], &[c(0.0, 0.0); 2], 0.0).unwrap();
        assert!(phase_gradient(&cache, &phase).iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn trace_is_monotone_and_feasible() {
        let model = desk_model(8, 16, 3, 12);
        for budget in [1.0, 1000.0] {
            let state = optimize(&model, budget, &quick_options()).unwrap();
            assert!(state.converged);
            for w in state.rates().windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            for r in &state.trace {
                assert!(r.power <= budget * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn single_user_converges() {
        let model = desk_model(4, 8, 1, 13);
        let state = optimize(&model, 10.0, &quick_options()).unwrap();
        assert!(state.converged);
        assert!(state.final_rate() > state.initial.rate);
    }

    #[test]
    fn no_ris_leaves_phase_empty() {
        let model = desk_model(4, 0, 2, 14);
        let state = optimize(&model, 10.0, &quick_options()).unwrap();
        assert!(state.phase.is_empty());
        assert!(state.trace.iter().all(|r| r.kappa == 0.0 && r.grad_norm == 0.0));
    }

    #[test]
    fn same_seed_same_result() {
        let model = desk_model(4, 8, 2, 15);
        let x = optimize(&model, 10.0, &quick_options()).unwrap();
        let y = optimize(&model, 10.0, &quick_options()).unwrap();
        assert_eq!(x.trace, y.trace);
        assert_eq!(x.phase, y.phase);
    }

    #[test]
    fn mismatched_initial_phase_is_rejected() {
        let model = desk_model(4, 8, 2, 16);
        let err = optimize_from(&model, 1.0, &quick_options(), Some(PhaseState::zeros(3))).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(matches!(optimize(&model, 0.0, &quick_options()), Err(Error::Domain(_))));
    }
}
