//! Sampling oracles for the closed-form channel moments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statris::channel::{build_statistical_model, ChannelSampler, ScenarioConfig};
use statris::linalg::{c, frobenius, trace_prod, unvec, vec_of, CMat, CVec};
use statris::stats::{effective_covariance, variance_context, variance_of_useful_signal, PhaseState};

fn model(beta: f64, seed: u64) -> statris::channel::StatisticalModel {
    let cfg = ScenarioConfig {
        antennas: 4,
        ris_elements: 8,
        users: 2,
        beta,
        ..ScenarioConfig::default()
    };
    build_statistical_model(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn covariance_matches_sampling() {
    for (i, beta) in [0.0, 0.2, 1.0].into_iter().enumerate() {
        let m = model(beta, 40 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let phase = PhaseState::random(8, &mut rng);
        let cov = effective_covariance(&m, &phase).unwrap();
        let sampler = ChannelSampler::new(&m).unwrap();
        let n = 100_000;
        let mut acc = vec![CMat::zeros(4, 4); 2];
        for _ in 0..n {
            let s = sampler.sample(&phase, &mut rng);
            for (a, h) in acc.iter_mut().zip(&s.h) {
                *a += h * h.adjoint();
            }
        }
        for (a, ck) in acc.iter().zip(&cov.c) {
            let emp = a / c(n as f64, 0.0);
            let rel = frobenius(&(emp - ck)) / frobenius(ck);
            assert!(rel < 0.03, "beta {beta}: relative error {rel}");
        }
    }
}

#[test]
fn useful_signal_variance_matches_sampling() {
    for (i, beta) in [0.0, 0.2, 1.0].into_iter().enumerate() {
        let m = model(beta, 70 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let phase = PhaseState::random(8, &mut rng);
        let cov = effective_covariance(&m, &phase).unwrap();
        let ctx = variance_context(&m, &phase).unwrap();
        let a: CVec = CVec::from_fn(16, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let am = unvec(&a, 4, 4);
        let sampler = ChannelSampler::new(&m).unwrap();
        let n = 200_000;
        let xs: Vec<_> = (0..n)
            .map(|_| {
                let h = &sampler.sample(&phase, &mut rng).h[0];
                h.dotc(&(&am * h))
            })
            .collect();
        let mean = xs.iter().sum::<statris::linalg::C64>() / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean).norm_sqr()).collect();
        let var = dev.iter().sum::<f64>() / (n - 1) as f64;
        let sd = (dev.iter().map(|d| (d - var).powi(2)).sum::<f64>() / n as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        let closed = variance_of_useful_signal(&a, &ctx, 0, &cov.c[0]).unwrap();
        let mean_closed = trace_prod(&cov.c[0], &am);
        eprintln!("beta {beta}: closed {closed:.6e} sampled {var:.6e} se {se:.3e}");
        assert!((var - closed).abs() < 4.0 * se, "beta {beta}");
        assert!((mean - mean_closed).norm() < 0.02 * mean_closed.norm().max(var.sqrt() / 50.0));
        let _ = vec_of(&am);
    }
}
