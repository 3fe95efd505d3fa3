//! Gradient of the phase-block objective with respect to `φ*`, built from
//! cached quadratic and quartic forms in `φ`.

use crate::channel::StatisticalModel;
use crate::error::{Error, Result};
use crate::linalg::{self, hadamard, quad_form, real, trace_prod, CMat, CVec, C64};
use crate::stats::PhaseState;

/// Matrices of the phase-block objective at fixed `λ̄`, `χ̄`, `ā`.
///
/// Up to constants, the objective reads
/// `φᴴ𝒢φ − Σ|φᴴ𝒳₂φ|² − Σ(φᴴΓφ)(φᴴ𝒳₅φ) − (φᴴY₁φ)(φᴴ𝒳₆φ) − (S-terms) − (M-terms)
///  − w·φᴴ𝒲φ`, where the last term only appears for the power-normalised
/// objective.
#[derive(Debug, Clone)]
pub struct GradientCache {
    pub dbar: Vec<CMat>,
    pub x1: CMat,
    pub x2: Vec<CMat>,
    pub x3: CMat,
    pub x4: Vec<CMat>,
    pub x5: Vec<CMat>,
    pub x6: CMat,
    pub g: CMat,
    pub gamma: Vec<CMat>,
    pub s: Vec<CMat>,
    pub m: Vec<CMat>,
    pub y1: CMat,
    pub y2: CMat,
    pub y3: Vec<CMat>,
    pub y4: Vec<CMat>,
    pub y5: Vec<CMat>,
    /// `|χ_k|²`.
    pub chi_sq: Vec<f64>,
    /// `C_r,kᵀ`.
    pub cr_t: Vec<CMat>,
    /// `φ`-dependent part of the transmit power, `Σ_j tr(C_j A_jᴴA_j) = φᴴ𝒲φ + const`.
    pub power: CMat,
    /// Weight of the power term; `Σ|χ_k|²/P` or zero.
    pub power_weight: f64,
}

/// Builds every cache matrix at the current phase.
///
/// `power_weight` is zero for the plain surrogate and `Σ|χ_k|²/P` for the
/// objective whose noise term is replaced by the normalised transmit power.
pub fn build_gradient_cache(
    model: &StatisticalModel,
    phase: &PhaseState,
    a: &[CMat],
    lambda: &[f64],
    chi: &[C64],
    power_weight: f64,
) -> Result<GradientCache> {
    model.check_dimensions()?;
    let k_users = model.users();
    let n = model.ris_elements();
    let m = model.antennas();
    if a.len() != k_users || lambda.len() != k_users || chi.len() != k_users {
        return Err(Error::Dimension("optimizer blocks and model user count differ".into()));
    }
    if phase.len() != n {
        return Err(Error::Dimension("phase length differs from N".into()));
    }
    if a.iter().any(|ak| ak.shape() != (m, m)) {
        return Err(Error::Dimension("A_k must be MxM".into()));
    }
    let beta = model.beta;
    let tbar = &model.tbar;
    let rtx = &model.rtx;
    let rris = &model.rris;
    let zero = || CMat::zeros(n, n);
    let chi_sq: Vec<f64> = chi.iter().map(|c| c.norm_sqr()).collect();
    let cr_t: Vec<CMat> = model.cr.iter().map(|c| c.transpose()).collect();
    let gamma: Vec<CMat> = cr_t.iter().map(|crt| hadamard(rris, crt) * real(beta)).collect();
    let p: Vec<CMat> = model
        .cr
        .iter()
        .map(|cr| linalg::phase_conjugate(cr, &phase.phi))
        .collect();
    let sandwich = |x: &CMat| tbar * x * tbar.adjoint();

    let s: Vec<CMat> = a.iter().map(&sandwich).collect();
    let tr_rtx_a: Vec<C64> = a.iter().map(|ak| trace_prod(rtx, ak)).collect();
    let dbar: Vec<CMat> = (0..k_users)
        .map(|k| hadamard(&s[k], &cr_t[k]) + &gamma[k] * tr_rtx_a[k])
        .collect();

    let mut x1 = zero();
    let mut x3 = zero();
    for k in 0..k_users {
        let w = (1.0 + lambda[k]).sqrt();
        let dh = dbar[k].adjoint();
        x1 += (&dbar[k] * chi[k].conj() + &dh * chi[k]) * real(w);
        let tr_cd_a = trace_prod(&model.cd[k], &a[k]);
        x3 += (&dbar[k] * tr_cd_a.conj() + &dh * tr_cd_a) * real(chi_sq[k]);
    }
    let x2: Vec<CMat> = (0..k_users).map(|k| &dbar[k] * real(chi[k].norm())).collect();

    // Per-j quantities shared by the interference expansions.
    let a_cd_ah: Vec<CMat> = (0..k_users).map(|j| &a[j] * &model.cd[j] * a[j].adjoint()).collect();
    let tr_rtx_acdah: Vec<f64> = a_cd_ah.iter().map(|x| trace_prod(rtx, x).re).collect();
    let t_acdah_t: Vec<CMat> = a_cd_ah.iter().map(&sandwich).collect();
    let a_rtx_ah: Vec<CMat> = a.iter().map(|aj| aj * rtx * aj.adjoint()).collect();
    let ah_rtx_a: Vec<CMat> = a.iter().map(|aj| aj.adjoint() * rtx * aj).collect();

    let x4: Vec<CMat> = (0..k_users)
        .map(|k| {
            let mut acc = zero();
            for j in 0..k_users {
                let inner = a[j].adjoint() * &model.cd[k] * &a[j];
                acc += hadamard(&sandwich(&inner), &cr_t[j]);
                acc += &gamma[j] * real(trace_prod(&model.cd[k], &a_rtx_ah[j]).re);
                acc += hadamard(&t_acdah_t[j], &cr_t[k]);
                acc += &gamma[k] * real(tr_rtx_acdah[j]);
            }
            acc
        })
        .collect();

    let mut y2 = zero();
    let mut y1 = zero();
    for k in 0..k_users {
        y2 += &model.cr[k] * real(chi_sq[k]);
        y1 += &gamma[k] * real(chi_sq[k]);
    }
    let y2_t = y2.transpose();

    let x5: Vec<CMat> = (0..k_users).map(|j| hadamard(&sandwich(&a_rtx_ah[j]), &y2_t)).collect();
    let mut x6 = zero();
    for j in 0..k_users {
        x6 += hadamard(&sandwich(&ah_rtx_a[j]), &cr_t[j]);
        x6 += &gamma[j] * real(trace_prod(rtx, &a_rtx_ah[j]).re);
    }

    let mut g = &x1 - &x3;
    for k in 0..k_users {
        g -= &x4[k] * real(chi_sq[k]);
    }

    let mmat: Vec<CMat> = (0..k_users)
        .map(|k| {
            let ak = &a[k];
            let quad = tr_rtx_a[k].norm_sqr() + trace_prod(&(rtx * ak * rtx), &ak.adjoint()).re;
            let mut mk = rris * real(beta * beta * quad);
            mk += sandwich(ak) * (tr_rtx_a[k].conj() * beta);
            mk += sandwich(&ak.adjoint()) * (tr_rtx_a[k] * beta);
            mk += sandwich(&a_rtx_ah[k]) * real(beta);
            mk += sandwich(&ah_rtx_a[k]) * real(beta);
            mk
        })
        .collect();

    let phi_y2 = linalg::phase_conjugate(&y2, &phase.phi);
    let y3: Vec<CMat> = s.iter().map(|sk| sk.adjoint() * &phi_y2 * sk).collect();
    let y4: Vec<CMat> = (0..k_users).map(|k| &s[k] * &p[k] * s[k].adjoint()).collect();
    let y5: Vec<CMat> = (0..k_users).map(|k| rris * &p[k] * &mmat[k]).collect();

    let mut power = zero();
    if power_weight != 0.0 {
        for j in 0..k_users {
            let xj = a[j].adjoint() * &a[j];
            power += hadamard(&sandwich(&xj), &cr_t[j]);
            power += &gamma[j] * real(trace_prod(rtx, &xj).re);
        }
    }

    Ok(GradientCache {
        dbar,
        x1,
        x2,
        x3,
        x4,
        x5,
        x6,
        g,
        gamma,
        s,
        m: mmat,
        y1,
        y2,
        y3,
        y4,
        y5,
        chi_sq,
        cr_t,
        power,
        power_weight,
    })
}

/// Wirtinger gradient `Δ = ∂f/∂φ*` of the phase-block objective.
pub fn wirtinger_gradient(cache: &GradientCache, phase: &PhaseState) -> CVec {
    let phi = &phase.phi;
    let n = phi.len();
    if n == 0 {
        return CVec::zeros(0);
    }
    let mut delta = &cache.g * phi;
    for x2 in &cache.x2 {
        let x2phi = x2 * phi;
        let x2h_phi = x2.adjoint() * phi;
        delta -= &x2h_phi * phi.dotc(&x2phi);
        delta -= &x2phi * phi.dotc(&x2h_phi);
    }
    for (gamma, x5) in cache.gamma.iter().zip(&cache.x5) {
        let gphi = gamma * phi;
        let x5phi = x5 * phi;
        delta -= &x5phi * phi.dotc(&gphi);
        delta -= &gphi * phi.dotc(&x5phi);
    }
    let y1phi = &cache.y1 * phi;
    let x6phi = &cache.x6 * phi;
    delta -= &x6phi * phi.dotc(&y1phi);
    delta -= &y1phi * phi.dotc(&x6phi);
    let y2_t = cache.y2.transpose();
    for k in 0..cache.y3.len() {
        let crt = &cache.cr_t[k];
        delta -= hadamard(&cache.y3[k], crt) * phi;
        delta -= hadamard(&cache.y4[k], &y2_t) * phi;
        let w = real(cache.chi_sq[k]);
        delta -= (hadamard(&cache.y5[k], crt) + hadamard(&cache.y5[k].adjoint(), crt)) * phi * w;
    }
    if cache.power_weight != 0.0 {
        delta -= &cache.power * phi * real(cache.power_weight);
    }
    delta
}

/// Gradient with respect to the angles, `2 Re{−j φ* ⊙ Δ}`.
pub fn phase_gradient(cache: &GradientCache, phase: &PhaseState) -> Vec<f64> {
    let delta = wirtinger_gradient(cache, phase);
    phase
        .phi
        .iter()
        .zip(delta.iter())
        .map(|(p, d)| 2.0 * (-linalg::J * p.conj() * d).re)
        .collect()
}

/// The `φ`-dependent part of the phase objective evaluated from the cache,
/// used to cross-check the cache against direct evaluation.
pub fn cached_objective(cache: &GradientCache, model: &StatisticalModel, phase: &PhaseState) -> f64 {
    let phi = &phase.phi;
    if phi.is_empty() {
        return 0.0;
    }
    let mut f = quad_form(&cache.g, phi).re;
    for x2 in &cache.x2 {
        f -= quad_form(x2, phi).norm_sqr();
    }
    for (gamma, x5) in cache.gamma.iter().zip(&cache.x5) {
        f -= (quad_form(gamma, phi) * quad_form(x5, phi)).re;
    }
    f -= (quad_form(&cache.y1, phi) * quad_form(&cache.x6, phi)).re;
    let phi_y2 = linalg::phase_conjugate(&cache.y2, phi);
    for (j, sj) in cache.s.iter().enumerate() {
        let pj = linalg::phase_conjugate(&model.cr[j], phi);
        f -= trace_prod(&(sj.adjoint() * &phi_y2 * sj), &pj).re;
    }
    for k in 0..cache.m.len() {
        let pk = linalg::phase_conjugate(&model.cr[k], phi);
        f -= cache.chi_sq[k] * trace_prod(&(&pk * &cache.m[k] * &pk), &model.rris).re;
    }
    if cache.power_weight != 0.0 {
        f -= cache.power_weight * quad_form(&cache.power, phi).re;
    }
    f
}
