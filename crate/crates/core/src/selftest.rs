//! Fast oracle suite: fourth moment, useful-signal variance, phase gradient
//! and FP tightness, each checked against an independent computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::channel::{
    build_statistical_model, complex_gaussian_mat, complex_gaussian_vec, ChannelSampler, ScenarioConfig,
    StatisticalModel,
};
use crate::error::Result;
use crate::linalg::{c, hermitize, real, unvec, vec_of, CMat, CVec, C64};
use crate::optimizer::{
    build_gradient_cache, phase_gradient, phase_objective, surrogate_objective, update_a_unconstrained, update_chi,
    update_lambda, PhaseObjective, Statistics,
};
use crate::stats::{
    effective_covariance, gaussian_fourth_moment, variance_context, variance_of_useful_signal, PhaseState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

/// Closed-form `var(hᴴ A h)` for user `k`.
pub type VarianceFn<'a> = dyn Fn(&StatisticalModel, &PhaseState, usize, &CMat) -> Result<f64> + 'a;

pub fn closed_form_variance(model: &StatisticalModel, phase: &PhaseState, k: usize, a: &CMat) -> Result<f64> {
    let cov = effective_covariance(model, phase)?;
    let ctx = variance_context(model, phase)?;
    variance_of_useful_signal(&vec_of(a), &ctx, k, &cov.c[k])
}

fn random_psd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let g = complex_gaussian_mat(n, n, rng);
    &g * g.adjoint() / real(n as f64)
}

fn random_hermitian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    hermitize(&complex_gaussian_mat(n, n, rng))
}

/// Runs every check. `quick` lowers sample counts and widens tolerances.
pub fn run_selftest(quick: bool) -> Vec<Check> {
    vec![
        check_fourth_moment(quick),
        check_useful_variance(quick, &closed_form_variance),
        check_gradient(),
        check_fp_tightness(),
    ]
}

pub fn check_fourth_moment(quick: bool) -> Check {
    const NAME: &str = "fourth-moment";
    let (samples, tol) = if quick { (50_000, 0.05) } else { (200_000, 0.02) };
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let cm = random_psd(3, &mut rng);
    let m1 = random_psd(3, &mut rng) + random_hermitian(3, &mut rng) * real(0.3);
    let m2 = random_psd(3, &mut rng);
    let closed = match gaussian_fourth_moment(&cm, &m1, &m2) {
        Ok(v) => v,
        Err(e) => return Check::failed(NAME, e),
    };
    let root = match crate::linalg::psd_sqrt(&cm) {
        Ok(r) => r,
        Err(e) => return Check::failed(NAME, e),
    };
    let mut acc = C64::new(0.0, 0.0);
    for _ in 0..samples {
        let u: CVec = &root * complex_gaussian_vec(3, &mut rng);
        acc += u.dotc(&(&m1 * &u)) * u.dotc(&(&m2 * &u));
    }
    let sampled = acc / samples as f64;
    let rel = (sampled - closed).norm() / closed.norm();
    Check::new(
        NAME,
        rel <= tol,
        format!("closed {closed:.6}, sampled {sampled:.6}, relative error {rel:.2e} (limit {tol})"),
    )
}

/// Compares `variance` against the sample variance of `hᴴ A h`.
pub fn check_useful_variance(quick: bool, variance: &VarianceFn<'_>) -> Check {
    const NAME: &str = "useful-signal-variance";
    let samples = if quick { 40_000 } else { 200_000 };
    let cfg = ScenarioConfig {
        antennas: 3,
        ris_elements: 4,
        users: 1,
        beta: 0.5,
        ..ScenarioConfig::default()
    };
    let run = || -> Result<(f64, f64, f64)> {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let model = build_statistical_model(&cfg, &mut rng)?;
        let phase = PhaseState::random(4, &mut rng);
        let a = CMat::identity(3, 3) + complex_gaussian_mat(3, 3, &mut rng) * real(0.3);
        let closed = variance(&model, &phase, 0, &a)?;
        let sampler = ChannelSampler::new(&model)?;
        let xs: Vec<C64> = (0..samples)
            .map(|_| {
                let h = &sampler.sample(&phase, &mut rng).h[0];
                h.dotc(&(&a * h))
            })
            .collect();
        let mean = xs.iter().sum::<C64>() / samples as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean).norm_sqr()).collect();
        let var = dev.iter().sum::<f64>() / (samples - 1) as f64;
        let sd = (dev.iter().map(|d| (d - var).powi(2)).sum::<f64>() / samples as f64).sqrt();
        Ok((closed, var, sd / (samples as f64).sqrt()))
    };
    match run() {
        Ok((closed, sampled, se)) => {
            let z = (closed - sampled).abs() / se;
            let rel = (closed - sampled).abs() / sampled;
            Check::new(
                NAME,
                z <= 4.0 && rel <= 0.05,
                format!("closed {closed:.6e}, sampled {sampled:.6e}, {z:.2} standard errors, relative {rel:.2e}"),
            )
        }
        Err(e) => Check::failed(NAME, e),
    }
}

pub fn check_gradient() -> Check {
    const NAME: &str = "phase-gradient";
    let run = || -> Result<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let cfg = ScenarioConfig {
            antennas: 4,
            ris_elements: 8,
            users: 2,
            ..ScenarioConfig::default()
        };
        let model = build_statistical_model(&cfg, &mut rng)?;
        let phase = PhaseState::random(8, &mut rng);
        let budget = 10.0;
        let stats = Statistics::full(&model, &phase)?;
        let lambda = vec![0.7, 1.3];
        let chi = vec![c(0.4, 0.2), c(-0.3, 0.5)];
        let a = update_a_unconstrained(&lambda, &chi, &stats, budget, true)?;
        let mats: Vec<CMat> = a.iter().map(|v| unvec(v, 4, 4)).collect();
        let mut worst = 0.0f64;
        for kind in [PhaseObjective::Surrogate, PhaseObjective::PowerNormalized] {
            let weight = match kind {
                PhaseObjective::Surrogate => 0.0,
                PhaseObjective::PowerNormalized => chi.iter().map(|x| x.norm_sqr()).sum::<f64>() / budget,
            };
            let cache = build_gradient_cache(&model, &phase, &mats, &lambda, &chi, weight)?;
            let analytic = phase_gradient(&cache, &phase);
            let h = 1e-5;
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, g) in analytic.iter().enumerate() {
                let mut e = vec![0.0; 8];
                e[i] = h;
                let up = phase_objective(&model, &phase.shifted(&e), &lambda, &chi, &a, budget, kind)?;
                e[i] = -h;
                let down = phase_objective(&model, &phase.shifted(&e), &lambda, &chi, &a, budget, kind)?;
                let fd = (up - down) / (2.0 * h);
                num += (g - fd).powi(2);
                den += fd * fd;
            }
            worst = worst.max((num / den).sqrt());
        }
        Ok(worst)
    };
    match run() {
        Ok(rel) => Check::new(NAME, rel <= 1e-5, format!("relative error {rel:.2e} (limit 1e-5)")),
        Err(e) => Check::failed(NAME, e),
    }
}

pub fn check_fp_tightness() -> Check {
    const NAME: &str = "fp-tightness";
    let run = || -> Result<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let cfg = ScenarioConfig {
            antennas: 4,
            ris_elements: 6,
            users: 3,
            ..ScenarioConfig::default()
        };
        let model = build_statistical_model(&cfg, &mut rng)?;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let phase = PhaseState::random(6, &mut rng);
            let stats = Statistics::full(&model, &phase)?;
            let a: Vec<CVec> = (0..3).map(|_| complex_gaussian_vec(16, &mut rng)).collect();
            let terms = stats.terms(&a)?;
            let gammas: Vec<f64> = terms.iter().map(|t| t.sinr()).collect();
            let lambda = update_lambda(&gammas)?;
            let chi = update_chi(&lambda, &terms);
            let f = surrogate_objective(&lambda, &chi, &terms);
            let exact: f64 = gammas.iter().map(|g| g.ln_1p()).sum();
            worst = worst.max((f - exact).abs());
        }
        Ok(worst)
    };
    match run() {
        Ok(gap) => Check::new(NAME, gap <= 1e-9, format!("largest gap {gap:.2e} (limit 1e-9)")),
        Err(e) => Check::failed(NAME, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::trace_prod;

    /// `J` with the sign of its `β(u vᴴ + v uᴴ)` term flipped, for mutation tests.
    fn flipped_cross_term_variance(model: &StatisticalModel, phase: &PhaseState, k: usize, a: &CMat) -> Result<f64> {
        let correct = closed_form_variance(model, phase, k, a)?;
        let ctx = variance_context(model, phase)?;
        let cross = 2.0 * model.beta * (trace_prod(&model.rtx, a).conj() * trace_prod(&ctx.b[k], a)).re;
        Ok(correct - 2.0 * cross)
    }

    #[test]
    fn quick_suite_passes() {
        for check in run_selftest(true) {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let check = check_useful_variance(true, &flipped_cross_term_variance);
        assert!(!check.passed, "{}", check.detail);
    }

    #[test]
    fn quick_suite_is_deterministic() {
        assert_eq!(run_selftest(true), run_selftest(true));
    }
}
