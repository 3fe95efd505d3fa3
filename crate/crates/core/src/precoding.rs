//! Per-coherence-interval transmit filters: bilinear precoding from the
//! statistical design, instantaneous FP-BCD, and zero-forcing with
//! waterfilling.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, real, CMat, CVec};

#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub p: Vec<CVec>,
    pub power_budget: f64,
}

impl PrecoderSet {
    pub fn total_power(&self) -> f64 {
        self.p.iter().map(|p| p.norm_squared()).sum()
    }
}

/// `p_k = A_k h_k`. The budget holds in expectation only.
pub fn bilinear_precode(a: &[CMat], h: &[CVec], budget: f64) -> PrecoderSet {
    PrecoderSet {
        p: a.iter().zip(h).map(|(ak, hk)| ak * hk).collect(),
        power_budget: budget,
    }
}

/// Bilinear precoding rescaled so that every sample uses exactly the budget.
pub fn bilinear_precode_per_sample(a: &[CMat], h: &[CVec], budget: f64) -> PrecoderSet {
    let mut set = bilinear_precode(a, h, budget);
    let total = set.total_power();
    if total > 0.0 {
        let s = real((budget / total).sqrt());
        set.p.iter_mut().for_each(|p| *p *= s);
    }
    set
}

/// `γ_k = |h_kᴴ p_k|² / (Σ_{j≠k} |h_kᴴ p_j|² + 1)`.
pub fn instantaneous_sinr(h: &[CVec], p: &[CVec]) -> Vec<f64> {
    h.iter()
        .enumerate()
        .map(|(k, hk)| {
            let mut signal = 0.0;
            let mut interference = 0.0;
            for (j, pj) in p.iter().enumerate() {
                let g = hk.dotc(pj).norm_sqr();
                if j == k {
                    signal = g;
                } else {
                    interference += g;
                }
            }
            signal / (interference + 1.0)
        })
        .collect()
}

/// `Σ_k log2(1 + γ_k)` with unit noise power.
pub fn instantaneous_rate(h: &[CVec], p: &[CVec]) -> f64 {
    instantaneous_sinr(h, p).iter().map(|g| g.ln_1p()).sum::<f64>() / LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcdOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BcdOutcome {
    pub precoders: PrecoderSet,
    /// Sum rate (bits) after initialisation and after every iteration.
    pub trace: Vec<f64>,
}

/// FP-BCD on instantaneous channels, starting from matched filters that
/// share the budget equally. Precoders are rescaled to the exact budget
/// after every update, which keeps the rate trace nondecreasing.
pub fn instantaneous_fp_bcd(h: &[CVec], budget: f64, opts: &BcdOptions) -> Result<BcdOutcome> {
    if h.is_empty() {
        return Err(Error::Dimension("at least one user is required".into()));
    }
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Domain(format!("power budget must be positive, got {budget}")));
    }
    let k_users = h.len();
    let m = h[0].len();
    let share = budget / k_users as f64;
    let mut p: Vec<CVec> = h
        .iter()
        .map(|hk| {
            let n = hk.norm();
            if n == 0.0 {
                CVec::zeros(m)
            } else {
                hk * real(share.sqrt() / n)
            }
        })
        .collect();
    let mut rate = instantaneous_rate(h, &p);
    let mut trace = vec![rate];
    if rate == 0.0 {
        return Ok(BcdOutcome {
            precoders: PrecoderSet {
                p,
                power_budget: budget,
            },
            trace,
        });
    }

    for _ in 0..opts.max_iter {
        let gammas = instantaneous_sinr(h, &p);
        let mut chi = Vec::with_capacity(k_users);
        for (k, hk) in h.iter().enumerate() {
            let total: f64 = p.iter().map(|pj| hk.dotc(pj).norm_sqr()).sum::<f64>() + 1.0;
            chi.push(hk.dotc(&p[k]) * ((1.0 + gammas[k]).sqrt() / total));
        }
        let weight: f64 = chi.iter().map(|x| x.norm_sqr()).sum();
        if weight == 0.0 {
            break;
        }
        let mut mat = CMat::identity(m, m) * real(weight / budget);
        for (x, hj) in chi.iter().zip(h) {
            mat += hj * hj.adjoint() * real(x.norm_sqr());
        }
        let rhs = CMat::from_fn(m, k_users, |i, k| h[k][i] * chi[k] * (1.0 + gammas[k]).sqrt());
        let sol = linalg::solve_hermitian(&mat, &rhs, true)?;
        let mut cand: Vec<CVec> = (0..k_users).map(|k| sol.column(k).into_owned()).collect();
        let total: f64 = cand.iter().map(|c| c.norm_squared()).sum();
        if !(total > 0.0) {
            break;
        }
        let s = real((budget / total).sqrt());
        cand.iter_mut().for_each(|c| *c *= s);
        let new_rate = instantaneous_rate(h, &cand);
        if new_rate < rate {
            break;
        }
        let change = (new_rate - rate) / rate;
        p = cand;
        rate = new_rate;
        trace.push(rate);
        if change < opts.tol {
            break;
        }
    }
    Ok(BcdOutcome {
        precoders: PrecoderSet {
            p,
            power_budget: budget,
        },
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct ZfSolution {
    pub precoders: PrecoderSet,
    /// Power per user.
    pub powers: Vec<f64>,
    /// Interference-free gains `1 / [(H Hᴴ)⁻¹]_kk`.
    pub gains: Vec<f64>,
    pub water_level: f64,
    pub condition_number: f64,
}

impl ZfSolution {
    /// `Σ log2(1 + q_k g_k)`.
    pub fn rate(&self) -> f64 {
        self.powers
            .iter()
            .zip(&self.gains)
            .map(|(q, g)| (q * g).ln_1p())
            .sum::<f64>()
            / LN_2
    }
}

/// Users whose channel lies (numerically) in the span of earlier users'.
fn dependent_users(h: &[CVec]) -> Vec<usize> {
    let mut basis: Vec<CVec> = Vec::new();
    let mut bad = Vec::new();
    for (k, hk) in h.iter().enumerate() {
        let mut r = hk.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dotc(&r);
                r -= q * c;
            }
        }
        let n = r.norm();
        if n <= 1e-10 * hk.norm() || hk.norm() == 0.0 {
            bad.push(k);
        } else {
            basis.push(r / real(n));
        }
    }
    bad
}

/// Waterfilling `q_k = max(0, μ − 1/g_k)`, `Σ q_k = P`.
pub fn waterfill(gains: &[f64], budget: f64) -> (Vec<f64>, f64) {
    let floors: Vec<f64> = gains.iter().map(|g| 1.0 / g).collect();
    let filled = |mu: f64| floors.iter().map(|f| (mu - f).max(0.0)).sum::<f64>();
    let mut lo = floors.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = lo + budget;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) > budget {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    // Exact level on the active set found by bisection.
    let mu0 = 0.5 * (lo + hi);
    let active: Vec<usize> = (0..floors.len()).filter(|&k| floors[k] < mu0).collect();
    let level = (budget + active.iter().map(|&k| floors[k]).sum::<f64>()) / active.len() as f64;
    let q = floors.iter().map(|f| (level - f).max(0.0)).collect();
    (q, level)
}

/// Zero-forcing directions from the normalised pseudoinverse columns with
/// waterfilling power allocation.
pub fn zf_waterfilling(h: &[CVec], budget: f64) -> Result<ZfSolution> {
    let k_users = h.len();
    if k_users == 0 {
        return Err(Error::Dimension("at least one user is required".into()));
    }
    let m = h[0].len();
    if k_users > m {
        return Err(Error::Config(format!(
            "zero-forcing needs M >= K (M = {m}, K = {k_users})"
        )));
    }
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Domain(format!("power budget must be positive, got {budget}")));
    }
    let bad = dependent_users(h);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { users: bad });
    }
    // Rows of H are h_kᴴ.
    let hmat = CMat::from_fn(k_users, m, |k, i| h[k][i].conj());
    let gram = &hmat * hmat.adjoint();
    let eig = linalg::hermitian_eigenvalues(&gram);
    let (emin, emax) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition_number = (emax / emin.max(f64::MIN_POSITIVE)).sqrt();
    let inv = gram.clone().try_inverse().ok_or(Error::Singular { dim: k_users })?;
    let w = hmat.adjoint() * inv;
    let mut gains = Vec::with_capacity(k_users);
    let mut dirs = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let col = w.column(k).into_owned();
        let n2 = col.norm_squared();
        gains.push(1.0 / n2);
        dirs.push(col / real(n2.sqrt()));
    }
    let (powers, water_level) = waterfill(&gains, budget);
    let p = dirs.iter().zip(&powers).map(|(d, q)| d * real(q.sqrt())).collect();
    Ok(ZfSolution {
        precoders: PrecoderSet {
            p,
            power_budget: budget,
        },
        powers,
        gains,
        water_level,
        condition_number,
    })
}

/// Largest `|h_kᴴ p_j| / (‖h_k‖‖p_j‖)` over `j ≠ k`.
pub fn residual_interference(h: &[CVec], p: &[CVec]) -> f64 {
    let mut worst = 0.0f64;
    for (k, hk) in h.iter().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            let denom = hk.norm() * pj.norm();
            if j != k && denom > 0.0 {
                worst = worst.max(hk.dotc(pj).norm() / denom);
            }
        }
    }
    worst
}

/// `|h_kᴴ p_k|²` per user.
pub fn useful_gains(h: &[CVec], p: &[CVec]) -> Vec<f64> {
    h.iter().zip(p).map(|(hk, pk)| hk.dotc(pk).norm_sqr()).collect()
}
