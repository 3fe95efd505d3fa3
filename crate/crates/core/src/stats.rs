//! Closed-form second- and fourth-order statistics of the effective channel
//! `h_k = h_{d,k} + Tᴴ Φ r_k` and the resulting SINR lower bound.

use rand::Rng;
use std::f64::consts::PI;

use crate::channel::StatisticalModel;
use crate::error::{Error, Result};
use crate::linalg::{self, kron, real, trace, trace_prod, vec_of, CMat, CVec, C64};

/// RIS phases, stored as angles so that `|φ_n| = 1` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub angles: Vec<f64>,
    pub phi: CVec,
}

impl PhaseState {
    pub fn from_angles(angles: Vec<f64>) -> Self {
        let phi = CVec::from_iterator(angles.len(), angles.iter().map(|&a| C64::from_polar(1.0, a)));
        Self { angles, phi }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_angles(vec![0.0; n])
    }

    /// Angles i.i.d. uniform on `[0, 2π)`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self::from_angles((0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// `ϕ + step`, elementwise.
    pub fn shifted(&self, step: &[f64]) -> Self {
        assert_eq!(step.len(), self.len());
        Self::from_angles(self.angles.iter().zip(step).map(|(a, s)| a + s).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveCovarianceSet {
    pub c: Vec<CMat>,
    pub phase: PhaseState,
}

fn check_phase(model: &StatisticalModel, phase: &PhaseState) -> Result<()> {
    model.check_dimensions()?;
    if phase.len() != model.ris_elements() {
        return Err(Error::Dimension(format!(
            "phase has {} entries, RIS has {} elements",
            phase.len(),
            model.ris_elements()
        )));
    }
    Ok(())
}

/// `φᴴ (R_RIS ⊙ C_rᵀ) φ = tr(R_RIS Φ C_r Φᴴ)`, real and nonnegative.
pub fn ris_scattering_power(rris: &CMat, cr: &CMat, phi: &CVec) -> f64 {
    if phi.is_empty() {
        return 0.0;
    }
    let g = linalg::hadamard(rris, &cr.transpose());
    linalg::quad_form(&g, phi).re.max(0.0)
}

/// `C_k = C_d + T̄ᴴ Φ C_r Φᴴ T̄ + β (φᴴ (R_RIS ⊙ C_rᵀ) φ) R_Tx`.
pub fn effective_covariance(model: &StatisticalModel, phase: &PhaseState) -> Result<EffectiveCovarianceSet> {
    check_phase(model, phase)?;
    let c = model
        .cd
        .iter()
        .zip(&model.cr)
        .map(|(cd, cr)| {
            if phase.is_empty() {
                return cd.clone();
            }
            let p = linalg::phase_conjugate(cr, &phase.phi);
            let s = ris_scattering_power(&model.rris, cr, &phase.phi);
            let los = model.tbar.adjoint() * p * &model.tbar;
            linalg::hermitize(&(cd + los + &model.rtx * real(model.beta * s)))
        })
        .collect();
    Ok(EffectiveCovarianceSet {
        c,
        phase: phase.clone(),
    })
}

/// `E[uᴴM₁u · uᴴM₂u] = tr(C M₁ C M₂) + tr(C M₁) tr(C M₂)` for `u ~ CN(0, C)`.
pub fn gaussian_fourth_moment(c: &CMat, m1: &CMat, m2: &CMat) -> Result<C64> {
    let n = c.nrows();
    if !c.is_square() || m1.shape() != (n, n) || m2.shape() != (n, n) {
        return Err(Error::Dimension("fourth moment needs equal square matrices".into()));
    }
    let cm1 = c * m1;
    let cm2 = c * m2;
    Ok(trace_prod(&cm1, &cm2) + trace(&cm1) * trace(&cm2))
}

/// Per-user fourth-order terms of the useful-signal variance.
#[derive(Debug, Clone)]
pub struct VarianceContext {
    /// `J_k`, `M² × M²`.
    pub j: Vec<CMat>,
    /// `Q_k = Φ C_r Φᴴ R_RIS Φ C_r Φᴴ`.
    pub q: Vec<CMat>,
    /// `B_k = T̄ᴴ Q_k T̄`.
    pub b: Vec<CMat>,
    /// `tr(Q_k R_RIS)`.
    pub tqr: Vec<f64>,
    pub rtx: CMat,
    pub beta: f64,
}

impl VarianceContext {
    pub fn users(&self) -> usize {
        self.q.len()
    }

    /// `a_kᴴ J_k a_k` for `a_k = vec(A)`, matrix-free.
    pub fn quadratic(&self, k: usize, a: &CMat) -> f64 {
        let beta = self.beta;
        if beta == 0.0 {
            return 0.0;
        }
        let r = &self.rtx;
        let b = &self.b[k];
        let tra = trace_prod(r, a);
        let tba = trace_prod(b, a);
        let ah = a.adjoint();
        let ra = r * a;
        let rar = trace_prod(&(&ah * &ra), r);
        let bar = trace_prod(&(&ah * b * a), r);
        let rab = trace_prod(&(ah * ra), b);
        beta * beta * self.tqr[k] * (tra.norm_sqr() + rar.re)
            + 2.0 * beta * (tra.conj() * tba).re
            + beta * (bar.re + rab.re)
    }

    /// `J_k a` without forming `J_k`.
    pub fn apply(&self, k: usize, a: &CVec) -> CVec {
        let m = self.rtx.nrows();
        let beta = self.beta;
        if beta == 0.0 {
            return CVec::zeros(a.len());
        }
        let am = linalg::unvec(a, m, m);
        let r = &self.rtx;
        let b = &self.b[k];
        let u = vec_of(r);
        let v = vec_of(b);
        let ua = trace_prod(r, &am);
        let va = trace_prod(b, &am);
        let mut out = (&u * ua + vec_of(&(r * &am * r))) * real(beta * beta * self.tqr[k]);
        out += (&u * va + &v * ua) * real(beta);
        out += vec_of(&(b * &am * r + r * &am * b)) * real(beta);
        out
    }
}

/// Builds `Q_k` and `J_k` for every user.
pub fn variance_context(model: &StatisticalModel, phase: &PhaseState) -> Result<VarianceContext> {
    let mut ctx = variance_operators(model, phase)?;
    let m = model.antennas();
    let beta = model.beta;
    let r = &model.rtx;
    let u = vec_of(r);
    let rr = kron(&r.transpose(), r);
    ctx.j = (0..ctx.users())
        .map(|k| {
            if beta == 0.0 || phase.is_empty() {
                return CMat::zeros(m * m, m * m);
            }
            let b = &ctx.b[k];
            let v = vec_of(b);
            let mut j = (&u * u.adjoint() + &rr) * real(beta * beta * ctx.tqr[k]);
            j += (&u * v.adjoint() + &v * u.adjoint()) * real(beta);
            j += (kron(&r.transpose(), b) + kron(&b.transpose(), r)) * real(beta);
            linalg::hermitize(&j)
        })
        .collect();
    Ok(ctx)
}

/// Like [`variance_context`] but leaves `j` empty; the matrix-free
/// [`VarianceContext::quadratic`] and [`VarianceContext::apply`] still work.
pub fn variance_operators(model: &StatisticalModel, phase: &PhaseState) -> Result<VarianceContext> {
    check_phase(model, phase)?;
    let m = model.antennas();
    let mut out = VarianceContext {
        j: Vec::new(),
        q: Vec::new(),
        b: Vec::new(),
        tqr: Vec::new(),
        rtx: model.rtx.clone(),
        beta: model.beta,
    };
    for cr in &model.cr {
        let (q, b, tqr) = if phase.is_empty() {
            (CMat::zeros(0, 0), CMat::zeros(m, m), 0.0)
        } else {
            let p = linalg::phase_conjugate(cr, &phase.phi);
            let q = &p * &model.rris * &p;
            let b = linalg::hermitize(&(model.tbar.adjoint() * &q * &model.tbar));
            let tqr = trace_prod(&q, &model.rris).re;
            (q, b, tqr)
        };
        out.q.push(q);
        out.b.push(b);
        out.tqr.push(tqr);
    }
    Ok(out)
}

/// `a_kᴴ J_k a_k + tr(A C Aᴴ C)`, clipped at zero.
pub fn variance_of_useful_signal(a: &CVec, ctx: &VarianceContext, k: usize, c: &CMat) -> Result<f64> {
    let m = c.nrows();
    if a.len() != m * m {
        return Err(Error::Dimension(format!(
            "a has length {}, expected {}",
            a.len(),
            m * m
        )));
    }
    let am = linalg::unvec(a, m, m);
    let gauss = trace_prod(&(&am * c * am.adjoint()), c).re;
    let v = ctx.quadratic(k, &am) + gauss;
    Ok(clip_nonnegative(v, gauss.abs()))
}

fn clip_nonnegative(v: f64, scale: f64) -> f64 {
    if v < 0.0 && v >= -1e-12 * scale.max(f64::MIN_POSITIVE) {
        0.0
    } else {
        v.max(0.0)
    }
}

/// Terms of the lower-bound SINR for one user.
#[derive(Debug, Clone, Copy)]
pub struct SinrTerms {
    /// `tr(C_k A_k)`.
    pub useful: C64,
    /// `Σ_j tr(C_k A_j C_j A_jᴴ)`, including `j = k`.
    pub interference: f64,
    /// `a_kᴴ J_k a_k`.
    pub fourth_order: f64,
}

impl SinrTerms {
    pub fn denominator(&self) -> f64 {
        self.interference + self.fourth_order + 1.0
    }

    pub fn sinr(&self) -> f64 {
        self.useful.norm_sqr() / self.denominator()
    }
}

pub fn sinr_terms(a: &[CVec], cov: &EffectiveCovarianceSet, ctx: &VarianceContext) -> Result<Vec<SinrTerms>> {
    let k_users = cov.c.len();
    if a.len() != k_users || ctx.users() != k_users {
        return Err(Error::Dimension("user counts differ".into()));
    }
    let m = cov.c.first().map_or(0, |c| c.nrows());
    let mats: Vec<CMat> = a
        .iter()
        .map(|v| {
            if v.len() != m * m {
                Err(Error::Dimension(format!(
                    "a has length {}, expected {}",
                    v.len(),
                    m * m
                )))
            } else {
                Ok(linalg::unvec(v, m, m))
            }
        })
        .collect::<Result<_>>()?;
    // A_j C_j A_jᴴ is shared by every user's interference sum.
    let spread: Vec<CMat> = mats.iter().zip(&cov.c).map(|(aj, cj)| aj * cj * aj.adjoint()).collect();
    Ok((0..k_users)
        .map(|k| {
            let ck = &cov.c[k];
            let interference: f64 = spread.iter().map(|s| trace_prod(ck, s).re).sum();
            SinrTerms {
                useful: trace_prod(ck, &mats[k]),
                interference: interference.max(0.0),
                fourth_order: ctx.quadratic(k, &mats[k]).max(0.0),
            }
        })
        .collect())
}

/// `γ_k = |tr(C_k A_k)|² / (Σ_j tr(C_k A_j C_j A_jᴴ) + a_kᴴ J_k a_k + 1)`.
pub fn sinr_lower_bound(a: &[CVec], cov: &EffectiveCovarianceSet, ctx: &VarianceContext) -> Result<Vec<f64>> {
    Ok(sinr_terms(a, cov, ctx)?.iter().map(SinrTerms::sinr).collect())
}

/// `Σ_k log2(1 + γ_k)` in bits per channel use.
pub fn sum_rate_lower_bound(gammas: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &g in gammas {
        if !(g >= 0.0) {
            return Err(Error::Domain(format!("SINR must be nonnegative, got {g}")));
        }
        total += g.ln_1p();
    }
    Ok(total / std::f64::consts::LN_2)
}

/// Transmit power `Σ_k tr(A_k C_k A_kᴴ)`.
pub fn transmit_power(a: &[CVec], c: &[CMat]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(v, ck)| {
            let m = ck.nrows();
            let am = linalg::unvec(v, m, m);
            trace_prod(&(&am * ck), &am.adjoint()).re
        })
        .sum()
}
