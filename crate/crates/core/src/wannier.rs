//! Global Bloch frames on the torus grid, hopping matrices, decay profiles
//! and band interpolation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::disentangle::DisentangledField;
use crate::error::{Error, Result};
use crate::frames::{self, FrameOptions};
use crate::geometry::{self, GRAM_FLOOR};
use crate::io::MatrixDoc;
use crate::linalg::{self, c, CMat, C64};
use crate::model::{self, KPoint, ModelSpec, Trs};

// ---------------------------------------------------------------------------
// Discrete Fourier transforms of matrix fields

/// Number of nodes of a grid.
pub fn grid_len(grid: [usize; 3]) -> usize {
    grid[0] * grid[1] * grid[2]
}

/// In-place forward 3D FFT of a scalar field stored with the last axis
/// fastest.
fn fft3(data: &mut [C64], grid: [usize; 3], planner: &mut FftPlanner<f64>) {
    let [_, n1, n2] = grid;
    let strides = [n1 * n2, n2, 1];
    for axis in 0..3 {
        let n = grid[axis];
        let fft = planner.plan_fft_forward(n);
        let mut buf = vec![C64::new(0.0, 0.0); n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..grid[others[0]] {
            for b in 0..grid[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for (x, v) in buf.iter_mut().enumerate() {
                    *v = data[base + x * strides[axis]];
                }
                fft.process(&mut buf);
                for (x, v) in buf.iter().enumerate() {
                    data[base + x * strides[axis]] = *v;
                }
            }
        }
    }
}

/// Lattice vectors that a grid index stands for. Even grids split the
/// Nyquist index `n/2` evenly between `±n/2`.
fn index_to_lattice(r: usize, n: usize) -> Vec<(i64, f64)> {
    let r = r as i64;
    let n = n as i64;
    if n % 2 == 0 && r == n / 2 {
        vec![(n / 2, 0.5), (-n / 2, 0.5)]
    } else if r > n / 2 {
        vec![(r - n, 1.0)]
    } else {
        vec![(r, 1.0)]
    }
}

/// Fourier coefficients `A_R = ⟨A(k) e^{−2πik·R}⟩_k` of a matrix field on
/// a uniform grid (`l` fastest).
pub fn fourier_coefficients(grid: [usize; 3], values: &[CMat]) -> Result<Vec<([i64; 3], CMat)>> {
    let nk = grid_len(grid);
    if values.len() != nk || nk == 0 {
        return Err(Error::Precondition(format!("field has {} nodes, grid needs {nk}", values.len())));
    }
    let (rows, cols) = values[0].shape();
    let entries: Vec<Vec<C64>> = (0..rows * cols)
        .into_par_iter()
        .map(|e| {
            let (i, j) = (e / cols, e % cols);
            let mut data: Vec<C64> = values.iter().map(|m| m[(i, j)] / nk as f64).collect();
            let mut planner = FftPlanner::new();
            fft3(&mut data, grid, &mut planner);
            data
        })
        .collect();
    let mut out = Vec::new();
    for r0 in 0..grid[0] {
        for r1 in 0..grid[1] {
            for r2 in 0..grid[2] {
                let idx = (r0 * grid[1] + r1) * grid[2] + r2;
                let base = CMat::from_fn(rows, cols, |i, j| entries[i * cols + j][idx]);
                for (a, wa) in index_to_lattice(r0, grid[0]) {
                    for (b, wb) in index_to_lattice(r1, grid[1]) {
                        for (d, wd) in index_to_lattice(r2, grid[2]) {
                            out.push(([a, b, d], &base * c(wa * wb * wd, 0.0)));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_R A_R e^{2πik·R}`.
pub fn fourier_sum(terms: &[([i64; 3], CMat)], k: [f64; 3]) -> CMat {
    let (rows, cols) = terms.first().map_or((0, 0), |t| t.1.shape());
    let mut out = CMat::zeros(rows, cols);
    for (r, a) in terms {
        let ph = 2.0 * PI * (k[0] * r[0] as f64 + k[1] * r[1] as f64 + k[2] * r[2] as f64);
        out += a * C64::from_polar(1.0, ph);
    }
    out
}

pub fn shell_of(r: &[i64; 3]) -> usize {
    r.iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Decay profiles

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellStat {
    pub shell: usize,
    pub radius: f64,
    /// Largest Frobenius norm of a coefficient in the shell.
    pub max_norm: f64,
    pub count: usize,
}

/// Least-squares fit of `log(max_norm)` against the shell radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Root-mean-square residual of the fit in natural-log units.
    pub residual: f64,
    /// Set when some shell in the range vanishes exactly; the fit is then
    /// reported flat.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub shells: Vec<ShellStat>,
    /// Log-log slope between shells `s − 1` and `s`, for `s ≥ 2`; `None`
    /// when either shell vanishes.
    pub loglog_slopes: Vec<(usize, Option<f64>)>,
    pub fit: LogLinearFit,
    pub fit_range: (usize, usize),
}

/// Minimum number of nonempty shells for a decay profile.
pub const MIN_SHELLS: usize = 6;

/// Decay statistics of a set of Fourier coefficients. The exponential fit
/// uses shells `1..=last`, where `last` defaults to the largest shell not
/// touched by the Nyquist split.
pub fn decay_profile(terms: &[([i64; 3], CMat)], fit_last: Option<usize>) -> Result<DecayProfile> {
    let smax = terms.iter().map(|(r, _)| shell_of(r)).max().unwrap_or(0);
    let mut shells: Vec<ShellStat> =
        (0..=smax).map(|s| ShellStat { shell: s, radius: s as f64, max_norm: 0.0, count: 0 }).collect();
    for (r, a) in terms {
        let st = &mut shells[shell_of(r)];
        st.count += 1;
        st.max_norm = st.max_norm.max(linalg::fro(a));
    }
    let nonempty = shells.iter().filter(|s| s.count > 0).count();
    if nonempty < MIN_SHELLS {
        return Err(Error::InsufficientData(format!("{nonempty} nonempty shells, need {MIN_SHELLS}")));
    }
    let last = fit_last.unwrap_or(smax.saturating_sub(1)).min(smax);
    let loglog_slopes = (2..=smax)
        .map(|s| {
            let (a, b) = (shells[s - 1].max_norm, shells[s].max_norm);
            let slope = (a > 0.0 && b > 0.0).then(|| (b / a).ln() / (s as f64 / (s - 1) as f64).ln());
            (s, slope)
        })
        .collect();
    let pts: Vec<(f64, f64)> = (1..=last).map(|s| (s as f64, shells[s].max_norm)).collect();
    let fit = if pts.iter().any(|&(_, y)| y <= 0.0) || pts.len() < 2 {
        LogLinearFit { slope: 0.0, intercept: 0.0, r2: 1.0, residual: 0.0, degenerate: true }
    } else {
        let n = pts.len() as f64;
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
        LogLinearFit { slope, intercept, r2, residual: (sse / n).sqrt(), degenerate: false }
    };
    Ok(DecayProfile { shells, loglog_slopes, fit, fit_range: (1, last) })
}

impl DecayProfile {
    /// Whether the log-log slope magnitudes increase strictly from shell 2
    /// through `through`.
    pub fn slopes_increasing_through(&self, through: usize) -> bool {
        let mags: Vec<f64> = self
            .loglog_slopes
            .iter()
            .filter(|(s, _)| *s <= through)
            .map(|(_, m)| m.map_or(f64::NAN, |x| -x))
            .collect();
        mags.len() + 1 >= through && mags.windows(2).all(|w| w[1] > w[0])
    }

    /// Largest log-log slope magnitude over shells strictly beyond `after`.
    pub fn max_slope_magnitude_after(&self, after: usize) -> f64 {
        self.loglog_slopes
            .iter()
            .filter(|(s, _)| *s > after)
            .filter_map(|(_, m)| m.map(|x| -x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shell,radius,max_norm,count,loglog_slope\n");
        for st in &self.shells {
            let slope = self.loglog_slopes.iter().find(|(s, _)| *s == st.shell).and_then(|(_, m)| *m);
            let slope = slope.map_or(String::new(), |m| format!("{m:.16e}"));
            out.push_str(&format!("{},{:.16e},{:.16e},{},{}\n", st.shell, st.radius, st.max_norm, st.count, slope));
        }
        out
    }
}

/// Decay profile of a matrix field sampled on a grid.
pub fn field_decay(grid: [usize; 3], values: &[CMat]) -> Result<DecayProfile> {
    decay_profile(&fourier_coefficients(grid, values)?, None)
}

// ---------------------------------------------------------------------------
// Global frames

/// Orthonormal frames of a projector field on the whole torus grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameField {
    pub grid: [usize; 3],
    pub rank: usize,
    pub frames: Vec<CMat>,
    /// Largest `‖U − 1‖` of the closure holonomies removed along each axis.
    pub holonomy: [f64; 3],
    pub trs: bool,
}

impl FrameField {
    pub fn projectors(&self) -> Vec<CMat> {
        self.frames.iter().map(linalg::frame_projector).collect()
    }

    /// Largest `‖ΦΦ† − P‖` against a projector field.
    pub fn frame_residual(&self, projectors: &[CMat]) -> f64 {
        self.frames.iter().zip(projectors).map(|(f, p)| linalg::fro(&(linalg::frame_projector(f) - p))).fold(0.0, f64::max)
    }

    /// Largest Frobenius distance between frames at grid neighbours.
    pub fn max_increment(&self) -> f64 {
        max_neighbour_distance(self.grid, &self.frames)
    }
}

pub fn max_neighbour_distance(grid: [usize; 3], values: &[CMat]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..grid[0] as isize {
        for j in 0..grid[1] as isize {
            for l in 0..grid[2] as isize {
                let a = model::grid_index(grid, i, j, l);
                for b in [model::grid_index(grid, i + 1, j, l), model::grid_index(grid, i, j + 1, l), model::grid_index(grid, i, j, l + 1)] {
                    worst = worst.max(linalg::fro(&(&values[a] - &values[b])));
                }
            }
        }
    }
    worst
}

/// Löwdin transport through `count` nodes starting at `start`, returning
/// the frame at every node plus the frame carried back to the first node.
fn transport_line(projectors: &[CMat], line: impl Fn(usize) -> usize, count: usize, start: &CMat) -> Result<(Vec<CMat>, CMat)> {
    let mut out = Vec::with_capacity(count);
    out.push(start.clone());
    for s in 1..count {
        let next = geometry::loewdin(&projectors[line(s)], &out[s - 1], GRAM_FLOOR)?;
        out.push(next);
    }
    let back = geometry::loewdin(&projectors[line(0)], &out[count - 1], GRAM_FLOOR)?;
    Ok((out, back))
}

fn det_arg(u: &CMat) -> C64 {
    let d = linalg::det(u);
    d / d.norm()
}

/// Unwrapped `arg det` along a cyclic sequence and its winding number.
fn det_lift_cyclic(values: &[CMat], start: f64) -> (Vec<f64>, i64) {
    let mut lift = Vec::with_capacity(values.len());
    let mut prev = det_arg(&values[0]);
    let mut acc = start + linalg::principal(prev.arg() - start);
    lift.push(acc);
    for u in &values[1..] {
        let z = det_arg(u);
        acc += (z / prev).arg();
        lift.push(acc);
        prev = z;
    }
    let closing = acc + (det_arg(&values[0]) / prev).arg();
    (lift.clone(), ((closing - lift[0]) / (2.0 * PI)).round() as i64)
}

/// Right corrections `X(t_s)` with `X = 1` at `s = 0` and `X = U⁻¹` at
/// `s = count`, built from a homotopy of the holonomy family to the identity.
fn closure_corrections(holonomies: &[CMat], lift: &[f64], count: usize, opts: &FrameOptions) -> Result<Vec<Vec<CMat>>> {
    let ts: Vec<f64> = (0..count).map(|s| 1.0 - s as f64 / count as f64).collect();
    let h = frames::contract_unitary_family(holonomies, lift, &ts, opts)?;
    Ok(h.into_iter().map(|row| row.into_iter().map(|u| linalg::unitarize(&u.adjoint())).collect()).collect())
}

fn op_dev(u: &CMat) -> f64 {
    linalg::op_norm(&(u - linalg::identity(u.nrows())))
}

/// Sweep-and-correct global frame of a projector field on a grid: transport
/// along the `k₁` line through the origin, then along `k₂` lines, then along
/// `k₃` lines, removing each family of closure holonomies with a homotopy to
/// the identity. Nonzero determinant windings of those families are the
/// Chern numbers of the coordinate slices and make a frame impossible.
pub fn global_frame_of(grid: [usize; 3], projectors: &[CMat], rank: usize, trs: Option<&Trs>, opts: &FrameOptions) -> Result<FrameField> {
    let [n0, n1, n2] = grid;
    if projectors.len() != grid_len(grid) || grid_len(grid) == 0 {
        return Err(Error::Precondition(format!("{} projectors for grid {grid:?}", projectors.len())));
    }
    if rank == 0 {
        let m = projectors[0].nrows();
        let frames = vec![CMat::zeros(m, 0); projectors.len()];
        return Ok(FrameField { grid, rank, frames, holonomy: [0.0; 3], trs: trs.is_some() });
    }
    let idx = |i: usize, j: usize, l: usize| (i * n1 + j) * n2 + l;
    let mut frames = vec![CMat::zeros(0, 0); projectors.len()];
    let mut holonomy = [0.0f64; 3];

    // k₁ line through the origin.
    let start = linalg::canonical_frame(&projectors[0], rank);
    let (line, back) = transport_line(projectors, |s| idx(s, 0, 0), n0, &start)?;
    let u0 = start.adjoint() * back;
    holonomy[0] = op_dev(&u0);
    let x0 = closure_corrections(std::slice::from_ref(&u0), &[linalg::det(&u0).arg()], n0, opts)?;
    for i in 0..n0 {
        frames[idx(i, 0, 0)] = &line[i] * &x0[i][0];
    }

    // k₂ lines.
    let lines1: Vec<(Vec<CMat>, CMat)> = (0..n0)
        .into_par_iter()
        .map(|i| transport_line(projectors, |s| idx(i, s, 0), n1, &frames[idx(i, 0, 0)]))
        .collect::<Result<_>>()?;
    let u1: Vec<CMat> = lines1.iter().map(|(l, b)| l[0].adjoint() * b).collect();
    holonomy[1] = u1.iter().map(op_dev).fold(0.0, f64::max);
    let (lift1, w1) = det_lift_cyclic(&u1, 0.0);
    if w1 != 0 {
        return Err(Error::TopologicalObstruction { chern: w1 });
    }
    let x1 = closure_corrections(&u1, &lift1, n1, opts)?;
    for i in 0..n0 {
        for j in 0..n1 {
            frames[idx(i, j, 0)] = &lines1[i].0[j] * &x1[j][i];
        }
    }

    // k₃ lines over the (k₁, k₂) torus.
    let lines2: Vec<(Vec<CMat>, CMat)> = (0..n0 * n1)
        .into_par_iter()
        .map(|ij| transport_line(projectors, |s| idx(ij / n1, ij % n1, s), n2, &frames[idx(ij / n1, ij % n1, 0)]))
        .collect::<Result<_>>()?;
    let u2: Vec<CMat> = lines2.iter().map(|(l, b)| l[0].adjoint() * b).collect();
    holonomy[2] = u2.iter().map(op_dev).fold(0.0, f64::max);
    let row0: Vec<CMat> = (0..n0).map(|i| u2[i * n1].clone()).collect();
    let (lift_row, wa) = det_lift_cyclic(&row0, 0.0);
    if wa != 0 {
        return Err(Error::TopologicalObstruction { chern: wa });
    }
    let mut lift2 = vec![0.0; n0 * n1];
    for i in 0..n0 {
        let col: Vec<CMat> = u2[i * n1..(i + 1) * n1].to_vec();
        let (l, wb) = det_lift_cyclic(&col, lift_row[i]);
        if wb != 0 {
            return Err(Error::TopologicalObstruction { chern: wb });
        }
        lift2[i * n1..(i + 1) * n1].copy_from_slice(&l);
    }
    let x2 = closure_corrections(&u2, &lift2, n2, opts)?;
    for ij in 0..n0 * n1 {
        for l in 0..n2 {
            frames[idx(ij / n1, ij % n1, l)] = &lines2[ij].0[l] * &x2[l][ij];
        }
    }

    let mut field = FrameField { grid, rank, frames, holonomy, trs: false };
    if let Some(t) = trs {
        symmetrize_frames(&mut field, projectors, t)?;
    }
    Ok(field)
}

/// Lattice Chern number of a projector field on a periodic `n_a × n_b`
/// torus (`values[a * n_b + b]`), from plaquette products of links between
/// canonical frames.
pub fn torus_chern(na: usize, nb: usize, values: &[CMat]) -> Result<(i64, f64)> {
    if values.len() != na * nb || na < 2 || nb < 2 {
        return Err(Error::Precondition(format!("{} values for a {na}×{nb} torus", values.len())));
    }
    let fr: Vec<CMat> = values.par_iter().map(geometry::link_frame).collect();
    let at = |a: usize, b: usize| &fr[(a % na) * nb + b % nb];
    let fluxes: Vec<f64> = (0..na * nb)
        .into_par_iter()
        .map(|ab| {
            let (a, b) = (ab / nb, ab % nb);
            let z = geometry::link_of_frames(at(a, b), at(a + 1, b))?
                * geometry::link_of_frames(at(a + 1, b), at(a + 1, b + 1))?
                * geometry::link_of_frames(at(a + 1, b + 1), at(a, b + 1))?
                * geometry::link_of_frames(at(a, b + 1), at(a, b))?;
            Ok(z.arg())
        })
        .collect::<Result<_>>()?;
    let total = fluxes.iter().sum::<f64>() / (2.0 * PI);
    let ch = total.round();
    Ok((ch as i64, (total - ch).abs()))
}

/// Chern numbers of the three coordinate slices through the origin of a
/// projector field on a grid: `(k₂,k₃)`, `(k₁,k₃)` and `(k₁,k₂)` tori.
pub fn slice_cherns(grid: [usize; 3], projectors: &[CMat]) -> Result<[i64; 3]> {
    let [n0, n1, n2] = grid;
    let idx = |i: usize, j: usize, l: usize| (i * n1 + j) * n2 + l;
    let s0: Vec<CMat> = (0..n1 * n2).map(|x| projectors[idx(0, x / n2, x % n2)].clone()).collect();
    let s1: Vec<CMat> = (0..n0 * n2).map(|x| projectors[idx(x / n2, 0, x % n2)].clone()).collect();
    let s2: Vec<CMat> = (0..n0 * n1).map(|x| projectors[idx(x / n1, x % n1, 0)].clone()).collect();
    Ok([torus_chern(n1, n2, &s0)?.0, torus_chern(n0, n2, &s1)?.0, torus_chern(n0, n1, &s2)?.0])
}

/// Global frame of a disentangled field.
pub fn global_frame(field: &DisentangledField, trs: Option<&Trs>, opts: &FrameOptions) -> Result<FrameField> {
    global_frame_of(field.grid, &field.projectors, field.rank(), trs, opts)
}

/// Tolerance on `P(−k) = θP(k)θ⁻¹` for TRS mode.
pub const TRS_TOL: f64 = 1e-8;

/// Replace `Φ(k)` by `Φ(k) G(k)^{1/2}` with `G(k) = Φ(k)† θΦ(−k)`, which
/// satisfies `Φ(−k) = θΦ(k)`; the partner of each pair is then set to `θΦ`
/// exactly.
fn symmetrize_frames(field: &mut FrameField, projectors: &[CMat], trs: &Trs) -> Result<()> {
    let grid = field.grid;
    let partner = |a: usize| {
        let l = (a % grid[2]) as isize;
        let j = ((a / grid[2]) % grid[1]) as isize;
        let i = (a / (grid[1] * grid[2])) as isize;
        model::grid_index(grid, -i, -j, -l)
    };
    let mut worst = 0.0f64;
    for a in 0..projectors.len() {
        worst = worst.max(linalg::fro(&(&projectors[partner(a)] - trs.conjugate_operator(&projectors[a]))));
    }
    if worst > TRS_TOL {
        return Err(Error::Symmetry { residual: worst });
    }
    let old = field.frames.clone();
    let owners: Vec<usize> = (0..old.len()).filter(|&a| partner(a) >= a).collect();
    let overlaps: Vec<CMat> = owners.par_iter().map(|&a| linalg::unitarize(&(old[a].adjoint() * trs.apply(&old[partner(a)])))).collect();
    // One branch of the square root for the whole grid keeps the result
    // continuous; at a TRIM any branch gives a θ-fixed frame.
    let cut = frames::common_gap(&overlaps)
        .ok_or_else(|| Error::ContractionFailure("TRS overlaps have no common eigenphase gap".into()))?;
    let mut sym: Vec<Option<CMat>> = vec![None; old.len()];
    for (&a, g) in owners.iter().zip(&overlaps) {
        sym[a] = Some(&old[a] * linalg::expm_skew(&(linalg::unitary_log(g, cut) * c(0.5, 0.0))));
    }
    for a in 0..old.len() {
        if let Some(f) = &sym[a] {
            let b = partner(a);
            field.frames[a] = f.clone();
            if b != a {
                field.frames[b] = trs.apply(f);
            }
        }
    }
    field.trs = true;
    Ok(())
}

/// `max ‖Φ(−k) − θΦ(k)‖` over the grid.
pub fn trs_frame_residual(field: &FrameField, trs: &Trs) -> f64 {
    let g = field.grid;
    let mut worst = 0.0f64;
    for i in 0..g[0] as isize {
        for j in 0..g[1] as isize {
            for l in 0..g[2] as isize {
                let a = model::grid_index(g, i, j, l);
                let b = model::grid_index(g, -i, -j, -l);
                worst = worst.max(linalg::fro(&(&field.frames[b] - trs.apply(&field.frames[a]))));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Hoppings and interpolation

#[derive(Serialize, Deserialize)]
struct TermDoc {
    #[serde(rename = "R")]
    r: [i64; 3],
    matrix: MatrixDoc,
}

#[derive(Serialize, Deserialize)]
struct HoppingDoc {
    grid: [usize; 3],
    rank: usize,
    terms: Vec<TermDoc>,
}

/// Fourier coefficients `A_R` of `A(k) = Φ(k)† H(k) Φ(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HoppingTensor {
    pub grid: [usize; 3],
    pub rank: usize,
    pub terms: Vec<([i64; 3], CMat)>,
}

pub fn hoppings(frames: &FrameField, model: &ModelSpec) -> Result<HoppingTensor> {
    let pts = model::grid_points(frames.grid);
    let a: Vec<CMat> = pts
        .par_iter()
        .zip(frames.frames.par_iter())
        .map(|(k, f)| Ok(linalg::hermitize(&(f.adjoint() * model::eval(model, k)?.matrix() * f))))
        .collect::<Result<_>>()?;
    Ok(HoppingTensor { grid: frames.grid, rank: frames.rank, terms: fourier_coefficients(frames.grid, &a)? })
}

impl HoppingTensor {
    /// `Σ_R A_R e^{2πik·R}`.
    pub fn matrix_at(&self, k: &KPoint) -> CMat {
        linalg::hermitize(&fourier_sum(&self.terms, k.coords))
    }

    /// `max ‖A_{−R} − A_R†‖`.
    pub fn hermiticity_residual(&self) -> f64 {
        let map: std::collections::HashMap<[i64; 3], &CMat> = self.terms.iter().map(|(r, a)| (*r, a)).collect();
        self.terms
            .iter()
            .map(|(r, a)| match map.get(&[-r[0], -r[1], -r[2]]) {
                Some(b) => linalg::fro(&(*b - a.adjoint())),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    pub fn decay(&self) -> Result<DecayProfile> {
        decay_profile(&self.terms, None)
    }

    /// `Σ_R ‖A_R‖²`.
    pub fn norm_sq(&self) -> f64 {
        self.terms.iter().map(|(_, a)| linalg::fro(a).powi(2)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = HoppingDoc {
            grid: self.grid,
            rank: self.rank,
            terms: self.terms.iter().map(|(r, a)| TermDoc { r: *r, matrix: MatrixDoc::from_matrix(a) }).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: HoppingDoc = serde_json::from_str(text)?;
        let terms = doc.terms.iter().map(|t| Ok((t.r, t.matrix.to_matrix()?))).collect::<Result<Vec<_>>>()?;
        if terms.iter().any(|(_, a)| a.shape() != (doc.rank, doc.rank)) {
            return Err(Error::Parse(format!("hopping matrices must be {0}×{0}", doc.rank)));
        }
        Ok(HoppingTensor { grid: doc.grid, rank: doc.rank, terms })
    }
}

/// Ascending eigenvalues of the interpolated `A(k)`.
pub fn interpolate_bands(h: &HoppingTensor, k: &KPoint) -> Vec<f64> {
    linalg::eigh_unchecked(&h.matrix_at(k)).0
}

/// Trigonometric interpolation of individual bands sampled on a grid.
#[derive(Clone, Debug)]
pub struct DirectInterpolator {
    pub grid: [usize; 3],
    terms: Vec<Vec<([i64; 3], C64)>>,
}

impl DirectInterpolator {
    /// `bands[b][node]` is band `b` at grid node `node`.
    pub fn new(grid: [usize; 3], bands: &[Vec<f64>]) -> Result<Self> {
        let terms = bands
            .iter()
            .map(|band| {
                let vals: Vec<CMat> = band.iter().map(|&x| CMat::from_element(1, 1, c(x, 0.0))).collect();
                Ok(fourier_coefficients(grid, &vals)?.into_iter().map(|(r, m)| (r, m[(0, 0)])).collect())
            })
            .collect::<Result<_>>()?;
        Ok(DirectInterpolator { grid, terms })
    }

    pub fn eval(&self, k: &KPoint) -> Vec<f64> {
        self.terms
            .iter()
            .map(|band| {
                band.iter()
                    .map(|(r, a)| {
                        let ph = 2.0 * PI * (k.coords[0] * r[0] as f64 + k.coords[1] * r[1] as f64 + k.coords[2] * r[2] as f64);
                        (a * C64::from_polar(1.0, ph)).re
                    })
                    .sum()
            })
            .collect()
    }
}

/// One-shot form of [`DirectInterpolator`].
pub fn direct_fourier_interp(grid: [usize; 3], bands: &[Vec<f64>], k: &KPoint) -> Result<Vec<f64>> {
    Ok(DirectInterpolator::new(grid, bands)?.eval(k))
}

/// Exact eigenvalues of the lowest `nbands` bands on every grid node,
/// indexed `[band][node]`.
pub fn band_grid(model: &ModelSpec, grid: [usize; 3], nbands: usize) -> Result<Vec<Vec<f64>>> {
    let spectra: Vec<Vec<f64>> =
        model::grid_points(grid).par_iter().map(|k| Ok(model::spectrum_at(model, k)?.eigenvalues[..nbands].to_vec())).collect::<Result<_>>()?;
    Ok((0..nbands).map(|b| spectra.iter().map(|s| s[b]).collect()).collect())
}

/// Additive-recurrence low-discrepancy points (generalized golden ratio),
/// shifted by a seeded random offset, skipping points within `radius` of any
/// point in `avoid`.
pub fn probe_points(count: usize, seed: u64, avoid: &[KPoint], radius: f64) -> Vec<KPoint> {
    // Real root of x⁴ = x + 1.
    let g = 1.220_744_084_605_759_5_f64;
    let alpha = [1.0 / g, 1.0 / (g * g), 1.0 / (g * g * g)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
    let mut out = Vec::with_capacity(count);
    let mut n = 0u64;
    while out.len() < count && n < 100 * count as u64 + 1000 {
        n += 1;
        let k = KPoint::new(
            (offset[0] + n as f64 * alpha[0]).fract(),
            (offset[1] + n as f64 * alpha[1]).fract(),
            (offset[2] + n as f64 * alpha[2]).fract(),
        );
        if avoid.iter().all(|a| a.torus_distance(&k) > radius) {
            out.push(k);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub k: KPoint,
    pub exact: Vec<f64>,
    pub interpolated: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl ProbeResult {
    pub fn interp_error(&self) -> f64 {
        self.exact.iter().zip(&self.interpolated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn baseline_error(&self) -> f64 {
        self.exact.iter().zip(&self.baseline).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub bands: usize,
    pub probes: Vec<ProbeResult>,
}

impl InterpolationReport {
    pub fn max_interp_error(&self) -> f64 {
        self.probes.iter().map(ProbeResult::interp_error).fold(0.0, f64::max)
    }

    pub fn max_baseline_error(&self) -> f64 {
        self.probes.iter().map(ProbeResult::baseline_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,k3,band,exact,interpolated,baseline,interp_error,baseline_error\n");
        for p in &self.probes {
            for b in 0..self.bands {
                out.push_str(&format!(
                    "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    p.k.coords[0],
                    p.k.coords[1],
                    p.k.coords[2],
                    b + 1,
                    p.exact[b],
                    p.interpolated[b],
                    p.baseline[b],
                    (p.exact[b] - p.interpolated[b]).abs(),
                    (p.exact[b] - p.baseline[b]).abs()
                ));
            }
        }
        out
    }
}

/// Compare `interpolate_bands` with direct Fourier interpolation of the
/// lowest `n` bands at the given probe points.
pub fn compare_interpolation(model: &ModelSpec, h: &HoppingTensor, n: usize, probes: &[KPoint]) -> Result<InterpolationReport> {
    if n > h.rank {
        return Err(Error::Precondition(format!("{n} bands requested from rank-{} hoppings", h.rank)));
    }
    let direct = DirectInterpolator::new(h.grid, &band_grid(model, h.grid, n)?)?;
    let probes = probes
        .par_iter()
        .map(|k| {
            Ok(ProbeResult {
                k: *k,
                exact: model::spectrum_at(model, k)?.eigenvalues[..n].to_vec(),
                interpolated: interpolate_bands(h, k)[..n].to_vec(),
                baseline: direct.eval(k),
            })
        })
        .collect::<Result<_>>()?;
    Ok(InterpolationReport { bands: n, probes })
}
