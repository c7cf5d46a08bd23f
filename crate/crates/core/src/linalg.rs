//! Small dense complex linear algebra on top of `nalgebra`.
//!
//! Everything here works on `M×M` matrices with `M` in the single digits to
//! low tens, so clarity wins over blocking or in-place tricks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn conj(m: &CMat) -> CMat {
    m.map(|z| z.conj())
}

/// Frobenius norm.
pub fn fro(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Spectral norm, via the largest eigenvalue of `A†A`.
pub fn op_norm(m: &CMat) -> f64 {
    let g = m.adjoint() * m;
    let g = hermitize(&g);
    let (ev, _) = eigh_unchecked(&g);
    ev.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * c(0.5, 0.0)
}

pub fn hermiticity_residual(m: &CMat) -> f64 {
    fro(&(m - m.adjoint())) / fro(m).max(1.0)
}

/// Make the largest-modulus entry of `v` real and positive. Ties are broken
/// by the lowest index, so the output is deterministic.
pub fn fix_phase(v: &mut nalgebra::DVectorViewMut<'_, C64>) {
    let mut best = 0usize;
    let mut best_mod = -1.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best_mod * (1.0 + 1e-12) {
            best = i;
            best_mod = m;
        }
    }
    if best_mod > 0.0 {
        let ph = v[best].conj() / best_mod;
        for z in v.iter_mut() {
            *z *= ph;
        }
    }
}

/// Ascending eigen-decomposition of a Hermitian matrix with phase-fixed
/// eigenvectors. Does not check the residual.
pub fn eigh_unchecked(h: &CMat) -> (Vec<f64>, CMat) {
    let n = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
        let mut col = vecs.column_mut(dst);
        fix_phase(&mut col);
    }
    (values, vecs)
}

/// Checked Hermitian eigen-decomposition: fails when `‖Hv − εv‖` exceeds
/// `1e-10·max(‖H‖, 1)` for any pair.
pub fn eigh(h: &CMat) -> Result<(Vec<f64>, CMat)> {
    let (vals, vecs) = eigh_unchecked(h);
    let scale = fro(h).max(1.0);
    let mut worst = 0.0f64;
    for (i, &e) in vals.iter().enumerate() {
        let v = vecs.column(i);
        let r = h * v - v * c(e, 0.0);
        worst = worst.max(r.norm());
    }
    if !worst.is_finite() || worst > 1e-10 * scale {
        return Err(Error::Eigensolver { residual: worst });
    }
    Ok((vals, vecs))
}

/// `V f(Λ) V†` for Hermitian `h`.
pub fn hermitian_fn(h: &CMat, f: impl Fn(f64) -> C64) -> CMat {
    let (vals, vecs) = eigh_unchecked(h);
    let n = h.nrows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let fj = f(vals[j]);
        scaled.column_mut(j).iter_mut().for_each(|z| *z *= fj);
    }
    scaled * vecs.adjoint()
}

/// Inverse square root of a positive-definite Hermitian matrix, together
/// with its smallest eigenvalue.
pub fn inv_sqrt_pd(g: &CMat) -> (CMat, f64) {
    let g = hermitize(g);
    let (vals, _) = eigh_unchecked(&g);
    let min = vals.first().copied().unwrap_or(1.0);
    (hermitian_fn(&g, |x| c(1.0 / x.max(1e-300).sqrt(), 0.0)), min)
}

/// Closest unitary in Frobenius norm (polar factor).
pub fn unitarize(u: &CMat) -> CMat {
    let (inv, _) = inv_sqrt_pd(&(u.adjoint() * u));
    u * inv
}

/// Eigen-decomposition of a unitary (normal) matrix through the complex
/// Schur form. Returns eigenphases in `(-π, π]` and the unitary eigenbasis.
pub fn unitary_eig(u: &CMat) -> (Vec<f64>, CMat) {
    let n = u.nrows();
    let schur = u.clone().schur();
    let (q, t) = schur.unpack();
    let phases = (0..n).map(|i| t[(i, i)].arg()).collect();
    (phases, unitarize(&q))
}

/// Logarithm of a unitary with the branch cut at angle `cut`: eigenphases
/// are mapped into `(cut − 2π, cut]`. Returns an anti-Hermitian matrix.
pub fn unitary_log(u: &CMat, cut: f64) -> CMat {
    let (phases, q) = unitary_eig(u);
    let n = u.nrows();
    let mut d = CMat::zeros(n, n);
    for (i, &p) in phases.iter().enumerate() {
        d[(i, i)] = c(0.0, wrap_below(p, cut));
    }
    let l = &q * d * q.adjoint();
    (&l - l.adjoint()) * c(0.5, 0.0)
}

/// Map angle `a` into `(cut − 2π, cut]`.
pub fn wrap_below(a: f64, cut: f64) -> f64 {
    let mut x = a;
    while x > cut {
        x -= 2.0 * PI;
    }
    while x <= cut - 2.0 * PI {
        x += 2.0 * PI;
    }
    x
}

/// Principal angle in `(-π, π]`.
pub fn principal(a: f64) -> f64 {
    wrap_below(a, PI)
}

/// `exp(L)` for anti-Hermitian `L`.
pub fn expm_skew(l: &CMat) -> CMat {
    // L = iH with H Hermitian
    let h = hermitize(&(l * c(0.0, -1.0)));
    hermitian_fn(&h, |x| c(x.cos(), x.sin()))
}

/// `U^s` using the principal branch of the logarithm.
pub fn unitary_pow(u: &CMat, s: f64) -> CMat {
    expm_skew(&(unitary_log(u, PI) * c(s, 0.0)))
}

pub fn det(m: &CMat) -> C64 {
    m.clone().determinant()
}

/// Top-`rank` eigenvectors of a projector, phase fixed. Deterministic for
/// identical input.
pub fn canonical_frame(p: &CMat, rank: usize) -> CMat {
    let (_, vecs) = eigh_unchecked(&hermitize(p));
    let n = p.nrows();
    vecs.columns(n - rank, rank).into_owned()
}

/// `Φ Φ†`.
pub fn frame_projector(frame: &CMat) -> CMat {
    frame * frame.adjoint()
}

pub fn from_real_rows(rows: &[Vec<f64>]) -> CMat {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    CMat::from_fn(n, m, |i, j| c(rows[i][j], 0.0))
}
