//! Dense complex linear algebra helpers shared by the statistical model, the
//! closed-form moment identities and the optimizer.
//!
//! Vectorisation stacks columns, so `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const J: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn real(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

/// `tr(A B)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Column-stacking vectorisation.
pub fn vec_of(m: &CMat) -> CVec {
    // nalgebra storage is column-major, so the raw slice is already vec(m).
    CVec::from_column_slice(m.as_slice())
}

pub fn unvec(v: &CVec, rows: usize, cols: usize) -> CMat {
    assert_eq!(v.len(), rows * cols, "unvec: length mismatch");
    CMat::from_column_slice(rows, cols, v.as_slice())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn hadamard(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.shape(), b.shape(), "hadamard: shape mismatch");
    a.component_mul(b)
}

/// `(M + Mᴴ) / 2`.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * real(0.5)
}

/// `‖M − Mᴴ‖_F / ‖M‖_F`, zero for the zero matrix.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let n = frobenius(m);
    if n == 0.0 {
        0.0
    } else {
        frobenius(&(m - m.adjoint())) / n
    }
}

/// Eigenvalues of a Hermitian matrix (input is symmetrised first).
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let e = SymmetricEigen::new(hermitize(m));
    e.eigenvalues.iter().copied().collect()
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Principal square root of a Hermitian PSD matrix. Eigenvalues in
/// `(-tol, 0)` with `tol = 1e-10·tr/N` are treated as zero; anything more
/// negative is reported.
pub fn psd_sqrt(m: &CMat) -> Result<CMat> {
    let n = m.nrows();
    if n == 0 {
        return Ok(CMat::zeros(0, 0));
    }
    let h = hermitize(m);
    let tol = psd_tolerance(&h);
    let e = SymmetricEigen::new(h);
    let mut d = CMat::zeros(n, n);
    for (i, &lam) in e.eigenvalues.iter().enumerate() {
        if lam < -tol {
            return Err(Error::NotPsd {
                min_eigenvalue: lam,
                tolerance: tol,
            });
        }
        d[(i, i)] = real(lam.max(0.0).sqrt());
    }
    let v = &e.eigenvectors;
    Ok(v * d * v.adjoint())
}

/// Negative-eigenvalue tolerance `1e-10·tr(M)/N` used throughout.
pub fn psd_tolerance(m: &CMat) -> f64 {
    let n = m.nrows().max(1) as f64;
    1e-10 * trace(m).re.abs() / n
}

/// Hermitian symmetrisation plus clipping of round-off negative eigenvalues.
pub fn psd_repair(m: &CMat) -> Result<CMat> {
    let h = hermitize(m);
    if h.nrows() == 0 {
        return Ok(h);
    }
    let tol = psd_tolerance(&h);
    let e = SymmetricEigen::new(h.clone());
    let min = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(h);
    }
    if min < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            tolerance: tol,
        });
    }
    let n = h.nrows();
    let mut d = CMat::zeros(n, n);
    for (i, &lam) in e.eigenvalues.iter().enumerate() {
        d[(i, i)] = real(lam.max(0.0));
    }
    let v = &e.eigenvectors;
    Ok(hermitize(&(v * d * v.adjoint())))
}

/// Solves `H x = b` for Hermitian positive definite `H` via Cholesky.
///
/// With `jitter` set, a failed factorisation is retried once with
/// `1e-10·tr(H)/n` added to the diagonal.
pub fn solve_hermitian(h: &CMat, b: &CMat, jitter: bool) -> Result<CMat> {
    let n = h.nrows();
    if n == 0 {
        return Ok(CMat::zeros(0, b.ncols()));
    }
    let hs = hermitize(h);
    if let Some(ch) = Cholesky::new(hs.clone()) {
        return Ok(ch.solve(b));
    }
    if jitter {
        let eps = 1e-10 * trace(&hs).re.abs().max(f64::MIN_POSITIVE) / n as f64;
        let mut hj = hs;
        for i in 0..n {
            hj[(i, i)] += real(eps);
        }
        if let Some(ch) = Cholesky::new(hj) {
            return Ok(ch.solve(b));
        }
    }
    Err(Error::Singular { dim: n })
}

pub fn solve_hermitian_vec(h: &CMat, b: &CVec, jitter: bool) -> Result<CVec> {
    let bm = CMat::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_hermitian(h, &bm, jitter)?;
    Ok(CVec::from_column_slice(x.as_slice()))
}

pub fn diag_phase(phi: &CVec) -> CMat {
    CMat::from_diagonal(phi)
}

/// `Φ X Φᴴ` for diagonal `Φ = diag(φ)`, i.e. `X ⊙ φφᴴ`.
pub fn phase_conjugate(x: &CMat, phi: &CVec) -> CMat {
    let n = phi.len();
    CMat::from_fn(n, n, |i, j| phi[i] * x[(i, j)] * phi[j].conj())
}

/// `xᴴ M x`.
pub fn quad_form(m: &CMat, x: &CVec) -> C64 {
    x.dotc(&(m * x))
}
