//! Property tests over randomly drawn scenarios, phases and filters.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use statris::channel::{
    build_statistical_model, complex_gaussian_mat, complex_gaussian_vec, steering_vector, synthesize_covariance,
    ScenarioConfig, StatisticalModel,
};
use statris::linalg::{frobenius, hermitian_defect, kron, min_eigenvalue, psd_sqrt, real, unvec, vec_of, CMat, CVec};
use statris::optimizer::{surrogate_objective, update_chi, update_lambda, Statistics};
use statris::precoding::{instantaneous_fp_bcd, residual_interference, waterfill, zf_waterfilling, BcdOptions};
use statris::stats::{effective_covariance, transmit_power, PhaseState};

fn is_psd(m: &CMat) -> bool {
    let scale = frobenius(m).max(1e-300);
    hermitian_defect(m) <= 1e-12 * scale && min_eigenvalue(m) >= -1e-10 * scale
}

fn model(seed: u64, beta: f64, n: usize) -> StatisticalModel {
    let cfg = ScenarioConfig {
        antennas: 4,
        ris_elements: n,
        users: 2,
        beta,
        ..ScenarioConfig::default()
    };
    build_statistical_model(&cfg, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steering_entries_have_unit_modulus(angle in -3.2f64..3.2, len in 1usize..40) {
        let x = steering_vector(angle, len);
        prop_assert!(x.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn synthesized_covariance_is_psd_with_fixed_trace(seed: u64, alpha in 1e-6f64..1e3, dims in 1usize..12) {
        let c = synthesize_covariance(alpha, dims, 6, 20, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(is_psd(&c));
        let tr = c.trace().re;
        prop_assert!((tr - alpha * dims as f64).abs() <= 1e-9 * alpha * dims as f64);
    }

    #[test]
    fn model_matrices_are_psd(seed: u64, beta in 0.0f64..=1.0) {
        let m = model(seed, beta, 6);
        prop_assert!(m.cd.iter().chain(&m.cr).all(is_psd));
        prop_assert!(is_psd(&m.rris) && is_psd(&m.rtx));
    }

    #[test]
    fn effective_covariance_is_psd_and_ignores_common_phase(
        seed: u64,
        beta in 0.0f64..=1.0,
        offset in -3.2f64..3.2,
    ) {
        let m = model(seed, beta, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5a5a);
        let phase = PhaseState::random(6, &mut rng);
        let rotated = phase.shifted(&[offset; 6]);
        let c0 = effective_covariance(&m, &phase).unwrap();
        let c1 = effective_covariance(&m, &rotated).unwrap();
        for (a, b) in c0.c.iter().zip(&c1.c) {
            prop_assert!(is_psd(a));
            prop_assert!(frobenius(&(a - b)) <= 1e-10 * frobenius(a));
        }
    }

    #[test]
    fn shifted_phases_stay_on_the_unit_circle(seed: u64, steps in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let phase = PhaseState::random(steps.len(), &mut ChaCha20Rng::seed_from_u64(seed));
        let moved = phase.shifted(&steps);
        prop_assert!(moved.phi.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn vec_identity_for_kronecker(seed: u64, n in 1usize..5) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = complex_gaussian_mat(n, n, &mut rng);
        let x = complex_gaussian_mat(n, n, &mut rng);
        let b = complex_gaussian_mat(n, n, &mut rng);
        let lhs = vec_of(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec_of(&x);
        prop_assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
        prop_assert_eq!(unvec(&vec_of(&x), n, n), x);
    }

    #[test]
    fn psd_square_root_squares_back(seed: u64, n in 1usize..6) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let g = complex_gaussian_mat(n, n, &mut rng);
        let c = &g * g.adjoint();
        let r = psd_sqrt(&c).unwrap();
        prop_assert!(frobenius(&(&r * &r - &c)) <= 1e-9 * frobenius(&c));
    }

    #[test]
    fn power_scales_quadratically(seed: u64, s in 1e-3f64..1e3) {
        let m = model(seed, 0.2, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
        let c = effective_covariance(&m, &PhaseState::random(4, &mut rng)).unwrap().c;
        let a: Vec<CVec> = (0..2).map(|_| complex_gaussian_vec(16, &mut rng)).collect();
        let scaled: Vec<CVec> = a.iter().map(|v| v * real(s)).collect();
        let (p, q) = (transmit_power(&a, &c), transmit_power(&scaled, &c));
        prop_assert!(p > 0.0);
        prop_assert!((q - s * s * p).abs() <= 1e-9 * q);
    }

    #[test]
    fn fp_surrogate_is_tight_after_closed_form_updates(seed: u64, scale in -3.0f64..3.0) {
        let m = model(seed, 0.2, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(2));
        let stats = Statistics::full(&m, &PhaseState::random(4, &mut rng)).unwrap();
        let a: Vec<CVec> = (0..2).map(|_| complex_gaussian_vec(16, &mut rng) * real(10f64.powf(scale))).collect();
        let terms = stats.terms(&a).unwrap();
        let gammas: Vec<f64> = terms.iter().map(|t| t.sinr()).collect();
        prop_assert!(gammas.iter().all(|g| *g >= 0.0));
        let lambda = update_lambda(&gammas).unwrap();
        let chi = update_chi(&lambda, &terms);
        let exact: f64 = gammas.iter().map(|g| g.ln_1p()).sum();
        prop_assert!((surrogate_objective(&lambda, &chi, &terms) - exact).abs() <= 1e-9);
    }

    #[test]
    fn waterfilling_spends_the_budget(gains in prop::collection::vec(1e-3f64..1e3, 1..8), budget in 1e-3f64..1e4) {
        let (q, level) = waterfill(&gains, budget);
        prop_assert!(q.iter().all(|x| *x >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - budget).abs() <= 1e-9 * budget);
        for (x, g) in q.iter().zip(&gains) {
            if *x > 0.0 {
                prop_assert!((x + 1.0 / g - level).abs() <= 1e-9 * level);
            } else {
                prop_assert!(1.0 / g >= level * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn zero_forcing_nulls_interference(seed: u64, k in 1usize..5, budget in 1e-2f64..1e4) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let h: Vec<CVec> = (0..k).map(|_| complex_gaussian_vec(6, &mut rng)).collect();
        let zf = zf_waterfilling(&h, budget).unwrap();
        prop_assert!(residual_interference(&h, &zf.precoders.p) <= 1e-10);
    }

    #[test]
    fn instantaneous_bcd_is_monotone_and_feasible(seed: u64, budget in 1e-2f64..1e3) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let h: Vec<CVec> = (0..3).map(|_| complex_gaussian_vec(4, &mut rng)).collect();
        let out = instantaneous_fp_bcd(&h, budget, &BcdOptions::default()).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let power: f64 = out.precoders.p.iter().map(|p| p.norm_squared()).sum();
        prop_assert!(power <= budget * (1.0 + 1e-9));
    }
}
