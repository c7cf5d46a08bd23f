//! Frames on spheres, loop contraction, mollification, avoided points,
//! extension of projector fields into balls, and the time-reversal
//! symmetric circle and disk constructions.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Frame, LoopSamples, SurfaceMesh, GRAM_FLOOR};
use crate::io::MatrixDoc;
use crate::linalg::{self, c, CMat, C64};
use crate::model::{Projector, Trs};

pub use crate::linalg::CVec;

/// `exp(−1/x)` for `x > 0`, else 0.
fn psi(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// C^∞ step: 0 for `x ≤ 0`, 1 for `x ≥ 1`, flat to all orders at both ends.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = psi(x);
        a / (a + psi(1.0 - x))
    }
}

/// Radial cutoff: 0 on `r ≤ 1/4`, 1 on `r ≥ 3/4`.
pub fn cutoff_h(r: f64) -> f64 {
    smoothstep((r - 0.25) / 0.5)
}

/// Knobs shared by the constructions in this module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOptions {
    pub seed: u64,
    pub avoidance_floor: f64,
    pub avoidance_trials: usize,
    pub shells: usize,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions { seed: 0, avoidance_floor: 0.05, avoidance_trials: 10_000, shells: 32 }
    }
}

// ---------------------------------------------------------------------------
// Obstruction loops and their contraction

/// Loop of `n×n` unitaries with the winding of its determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstructionLoop {
    pub samples: LoopSamples<CMat>,
    pub winding: i64,
}

impl ObstructionLoop {
    pub fn new(samples: LoopSamples<CMat>) -> Result<Self> {
        for (j, u) in samples.payload.iter().enumerate() {
            let r = linalg::fro(&(u.adjoint() * u - linalg::identity(u.nrows())));
            if r > 1e-10 {
                return Err(Error::Precondition(format!("loop sample {j} not unitary ({r:.3e})")));
            }
        }
        let dets = LoopSamples::new(samples.params.clone(), samples.payload.iter().map(det_phase).collect())?;
        let winding = geometry::winding_number(&dets)?;
        Ok(ObstructionLoop { samples, winding })
    }
}

fn det_phase(u: &CMat) -> C64 {
    if u.nrows() == 0 {
        return c(1.0, 0.0);
    }
    let d = linalg::det(u);
    d / d.norm()
}

/// Continuous lift of `arg det` along a cyclic sequence.
fn unwrap_det_phase(values: &[CMat]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut prev: Option<(C64, f64)> = None;
    for u in values {
        let z = det_phase(u);
        let phi = match prev {
            None => z.arg(),
            Some((zp, p)) => p + (z / zp).arg(),
        };
        out.push(phi);
        prev = Some((z, phi));
    }
    out
}

/// Smallest eigenphase gap accepted for the single-logarithm contraction.
const LOG_GAP_MIN: f64 = 0.3;
const RECURSION_CAP: usize = 8;
const COLUMN_SUBSTEPS: usize = 128;

/// Widest eigenphase gap over a family; returns the angle at its middle.
pub(crate) fn common_gap(values: &[CMat]) -> Option<f64> {
    let mut phases: Vec<f64> = values.par_iter().flat_map_iter(|v| linalg::unitary_eig(v).0).collect();
    if phases.is_empty() {
        return Some(PI);
    }
    phases.sort_by(f64::total_cmp);
    let mut best = (phases[0] + 2.0 * PI - phases[phases.len() - 1], phases[phases.len() - 1]);
    for w in phases.windows(2) {
        if w[1] - w[0] > best.0 {
            best = (w[1] - w[0], w[0]);
        }
    }
    (best.0 >= LOG_GAP_MIN).then(|| linalg::principal(best.1 + best.0 / 2.0))
}

/// Contract a family of unitaries to the identity, pointwise in the family
/// index, given a continuous lift of `arg det` over the family.
///
/// The result is indexed `[t][j]` for the requested homotopy parameters;
/// `t = 0` reproduces the input and `t = 1` gives the identity. Every global
/// choice (branch cut, avoided point) is shared by the whole family, so the
/// output inherits whatever continuity the input has.
pub fn contract_unitary_family(values: &[CMat], det_lift: &[f64], ts: &[f64], opts: &FrameOptions) -> Result<Vec<Vec<CMat>>> {
    contract_rec(values, det_lift, ts, opts, 0)
}

fn contract_rec(values: &[CMat], det_lift: &[f64], ts: &[f64], opts: &FrameOptions, depth: usize) -> Result<Vec<Vec<CMat>>> {
    let n = values.first().map_or(0, |v| v.nrows());
    let nf = n.max(1) as f64;
    let stripped: Vec<CMat> =
        values.iter().zip(det_lift).map(|(u, &phi)| u * C64::from_polar(1.0, -phi / nf)).collect();
    let special = contract_special(&stripped, ts, opts, depth)?;
    Ok(ts
        .iter()
        .zip(special)
        .map(|(&t, row)| {
            row.into_iter().zip(det_lift).map(|(w, &phi)| w * C64::from_polar(1.0, (1.0 - t) * phi / nf)).collect()
        })
        .collect())
}

fn contract_special(values: &[CMat], ts: &[f64], opts: &FrameOptions, depth: usize) -> Result<Vec<Vec<CMat>>> {
    let n = values.first().map_or(0, |v| v.nrows());
    if n <= 1 {
        return Ok(ts.iter().map(|_| values.iter().map(|_| linalg::identity(n)).collect()).collect());
    }
    if let Some(cut) = common_gap(values) {
        let logs: Vec<CMat> = values.par_iter().map(|v| linalg::unitary_log(v, cut)).collect();
        return Ok(ts
            .iter()
            .map(|&t| logs.par_iter().map(|l| linalg::expm_skew(&(l * c(1.0 - t, 0.0)))).collect())
            .collect());
    }
    if depth >= RECURSION_CAP {
        return Err(Error::ContractionFailure(format!("no common eigenphase gap after {depth} column reductions")));
    }

    // Move the first column to e₁ through an avoided point, carrying the
    // other columns along by Löwdin transport, then recurse on the block.
    let mut samples: Vec<CVec> = values.iter().map(|v| v.column(0).into_owned()).collect();
    let mut e1 = CVec::zeros(n);
    e1[0] = c(1.0, 0.0);
    samples.push(e1.clone());
    let sub_opts = FrameOptions { seed: opts.seed.wrapping_add(1 + depth as u64), ..opts.clone() };
    let avoided = find_avoided_point(&samples, &sub_opts)?;
    let star = -avoided.point;

    let first_half: Vec<f64> = ts.iter().filter(|&&t| t <= 0.5).map(|&t| 2.0 * t).collect();
    let column_path = |v: &CVec, s: f64| -> CVec {
        let x = if s <= 0.5 {
            v * c(1.0 - 2.0 * s, 0.0) + &star * c(2.0 * s, 0.0)
        } else {
            &star * c(2.0 - 2.0 * s, 0.0) + &e1 * c(2.0 * s - 1.0, 0.0)
        };
        let nx = x.norm();
        x / c(nx, 0.0)
    };

    struct Sweep {
        recorded: Vec<CMat>,
        block: CMat,
        lift: f64,
    }
    let sweeps: Vec<Sweep> = values
        .par_iter()
        .map(|v| -> Result<Sweep> {
            let v0: CVec = v.column(0).into_owned();
            let mut rest = v.columns(1, n - 1).into_owned();
            let mut recorded = Vec::with_capacity(first_half.len());
            let mut s_cur = 0.0;
            let mut det_prev = det_phase(v);
            let mut lift = 0.0;
            let assemble = |col: &CVec, rest: &CMat| {
                let mut y = CMat::zeros(n, n);
                y.set_column(0, col);
                y.columns_mut(1, n - 1).copy_from(rest);
                y
            };
            let mut advance = |target: f64, rest: &mut CMat, s_cur: &mut f64| -> Result<()> {
                let steps = ((target - *s_cur) * COLUMN_SUBSTEPS as f64).ceil().max(0.0) as usize;
                for k in 1..=steps {
                    let s = *s_cur + (target - *s_cur) * k as f64 / steps as f64;
                    let col = column_path(&v0, s);
                    let q = linalg::identity(n) - &col * col.adjoint();
                    *rest = geometry::loewdin(&q, rest, GRAM_FLOOR)?;
                    let z = det_phase(&assemble(&col, rest));
                    lift += (z / det_prev).arg();
                    det_prev = z;
                }
                *s_cur = target;
                Ok(())
            };
            for &s in &first_half {
                advance(s, &mut rest, &mut s_cur)?;
                recorded.push(if s == 0.0 { v.clone() } else { assemble(&column_path(&v0, s), &rest) });
            }
            advance(1.0, &mut rest, &mut s_cur)?;
            let block = linalg::unitarize(&rest.rows(1, n - 1).into_owned());
            Ok(Sweep { recorded, block, lift })
        })
        .collect::<Result<_>>()?;

    let second: Vec<f64> = ts.iter().filter(|&&t| t > 0.5).map(|&t| 2.0 * t - 1.0).collect();
    let blocks: Vec<CMat> = sweeps.iter().map(|s| s.block.clone()).collect();
    let lifts: Vec<f64> = sweeps.iter().map(|s| s.lift).collect();
    let inner = contract_rec(&blocks, &lifts, &second, opts, depth + 1)?;

    let mut out = Vec::with_capacity(ts.len());
    let (mut a, mut b) = (0, 0);
    for &t in ts {
        if t <= 0.5 {
            out.push(sweeps.iter().map(|s| s.recorded[a].clone()).collect());
            a += 1;
        } else {
            out.push(
                inner[b]
                    .iter()
                    .map(|w| {
                        let mut y = CMat::zeros(n, n);
                        y[(0, 0)] = c(1.0, 0.0);
                        y.view_mut((1, 1), (n - 1, n - 1)).copy_from(w);
                        y
                    })
                    .collect(),
            );
            b += 1;
        }
    }
    Ok(out)
}

/// Largest adjacent-sample distance (operator norm) accepted in a homotopy.
pub const CONTINUITY_BOUND: f64 = 0.5;

/// Homotopy `Ũ(ω, t)` from the loop (`t = 0`) to the identity (`t = 1`) on
/// `latitudes` equally spaced values of `t`, indexed `[t][ω]`.
pub fn contract_unitary_loop(lp: &ObstructionLoop, latitudes: usize, opts: &FrameOptions) -> Result<Vec<Vec<CMat>>> {
    if lp.winding != 0 {
        return Err(Error::Precondition(format!("loop determinant winds {} times", lp.winding)));
    }
    if latitudes < 2 {
        return Err(Error::Precondition("need at least two homotopy samples".into()));
    }
    let values = &lp.samples.payload;
    let lift = unwrap_det_phase(values);
    let ts: Vec<f64> = (0..latitudes).map(|i| i as f64 / (latitudes - 1) as f64).collect();
    let mut h = contract_unitary_family(values, &lift, &ts, opts)?;
    h[0] = values.clone();
    let n = values.first().map_or(0, |v| v.nrows());
    let last = h.len() - 1;
    h[last] = vec![linalg::identity(n); values.len()];
    check_homotopy_continuity(&h, true)?;
    Ok(h)
}

fn check_homotopy_continuity(h: &[Vec<CMat>], cyclic: bool) -> Result<()> {
    let l = h.first().map_or(0, |r| r.len());
    for (ti, row) in h.iter().enumerate() {
        let upto = if cyclic { l } else { l.saturating_sub(1) };
        for j in 0..upto {
            let d = linalg::op_norm(&(&row[(j + 1) % l] - &row[j]));
            if d >= CONTINUITY_BOUND {
                return Err(Error::ContractionFailure(format!("jump {d:.3} between loop samples {j} and {} at t-row {ti}", (j + 1) % l)));
            }
        }
        if ti + 1 < h.len() {
            for j in 0..l {
                let d = linalg::op_norm(&(&h[ti + 1][j] - &row[j]));
                if d >= CONTINUITY_BOUND {
                    return Err(Error::ContractionFailure(format!("jump {d:.3} between t-rows {ti} and {} at sample {j}", ti + 1)));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Frames on lat-lon spheres

/// Transported hemisphere frames and the equatorial obstruction loop.
struct Hemispheres {
    north: Vec<CMat>,
    south: Vec<CMat>,
    equator: Vec<CMat>,
}

fn latlon_checked(mesh: &SurfaceMesh) -> Result<(usize, usize)> {
    let (nlat, nlon) = mesh.latlon_dims().ok_or_else(|| Error::Precondition("sphere frames need a lat-lon mesh".into()))?;
    if nlat % 2 != 0 {
        return Err(Error::Precondition("sphere frames need an even latitude count".into()));
    }
    Ok((nlat, nlon))
}

/// Frames transported down every meridian from each pole to the equator.
/// The south pole frame is the north pole frame carried down meridian 0, so
/// the obstruction is the identity on that meridian.
fn hemispheres(mesh: &SurfaceMesh, field: &[CMat], rank: usize) -> Result<Hemispheres> {
    let (nlat, nlon) = latlon_checked(mesh)?;
    let half = nlat / 2;
    let north0 = linalg::canonical_frame(&field[0], rank);
    let meridian0: Vec<CMat> = (0..=nlat).map(|i| field[mesh.latlon_node(i, 0)].clone()).collect();
    let down = geometry::transport(&meridian0, &north0)?;
    let south0 = down[nlat].clone();

    let cols: Vec<(Vec<CMat>, Vec<CMat>)> = (0..nlon)
        .into_par_iter()
        .map(|j| -> Result<(Vec<CMat>, Vec<CMat>)> {
            let np: Vec<CMat> = (0..=half).map(|i| field[mesh.latlon_node(i, j)].clone()).collect();
            let sp: Vec<CMat> = (half..=nlat).rev().map(|i| field[mesh.latlon_node(i, j)].clone()).collect();
            Ok((geometry::transport(&np, &north0)?, geometry::transport(&sp, &south0)?))
        })
        .collect::<Result<_>>()?;

    let mut north = vec![CMat::zeros(0, 0); mesh.nodes.len()];
    let mut south = vec![CMat::zeros(0, 0); mesh.nodes.len()];
    let mut equator = Vec::with_capacity(nlon);
    for (j, (n, s)) in cols.into_iter().enumerate() {
        for (i, f) in n.into_iter().enumerate() {
            north[mesh.latlon_node(i, j)] = f;
        }
        for (k, f) in s.into_iter().enumerate() {
            south[mesh.latlon_node(nlat - k, j)] = f;
        }
        let eq = mesh.latlon_node(half, j);
        equator.push(linalg::unitarize(&(south[eq].adjoint() * &north[eq])));
    }
    Ok(Hemispheres { north, south, equator })
}

/// The equatorial transition `Φ₊†Φ₋` between the northern and southern
/// transported frames of a projector field on a lat-lon sphere. Its winding
/// equals the Chern number of the field.
pub fn obstruction_loop(mesh: &SurfaceMesh, field: &[Projector]) -> Result<ObstructionLoop> {
    let rank = field.first().map_or(0, |p| p.rank);
    let mats: Vec<CMat> = field.iter().map(|p| p.matrix.clone()).collect();
    let h = hemispheres(mesh, &mats, rank)?;
    ObstructionLoop::new(LoopSamples::uniform(h.equator.iter().map(|u| u.adjoint()).collect()))
}

/// Raw-matrix version of [`frame_on_sphere`].
pub fn sphere_frames(mesh: &SurfaceMesh, field: &[CMat], rank: usize, opts: &FrameOptions) -> Result<Vec<CMat>> {
    let (nlat, nlon) = latlon_checked(mesh)?;
    let m = field.first().map_or(0, |p| p.nrows());
    if rank == 0 {
        return Ok(vec![CMat::zeros(m, 0); field.len()]);
    }
    let ch = geometry::chern_number_raw(mesh, field)?;
    if ch.chern != 0 {
        return Err(Error::TopologicalObstruction { chern: ch.chern });
    }
    let h = hemispheres(mesh, field, rank)?;
    let lp = ObstructionLoop::new(LoopSamples::uniform(h.equator.clone()))?;
    if lp.winding != 0 {
        return Err(Error::InconsistentField { residual: lp.winding as f64 });
    }
    let half = nlat / 2;
    let ts: Vec<f64> = (half..=nlat).map(|i| smoothstep((i - half) as f64 / half as f64)).collect();
    let lift = unwrap_det_phase(&h.equator);
    let mut homotopy = contract_unitary_family(&h.equator, &lift, &ts, opts)?;
    homotopy[0] = h.equator.clone();
    let last = homotopy.len() - 1;
    homotopy[last] = vec![linalg::identity(rank); nlon];

    let mut out = h.north;
    for (row, i) in (half..=nlat).enumerate() {
        for j in 0..nlon {
            let node = mesh.latlon_node(i, j);
            if i == nlat && j > 0 {
                continue;
            }
            out[node] = &h.south[node] * &homotopy[row][j];
        }
    }
    Ok(out)
}

/// Global frame of a projector field with vanishing Chern number on a
/// lat-lon sphere: hemisphere transport plus contraction of the
/// equatorial obstruction in the southern hemisphere.
pub fn frame_on_sphere(mesh: &SurfaceMesh, field: &[Projector], opts: &FrameOptions) -> Result<Vec<Frame>> {
    let rank = field.first().map_or(0, |p| p.rank);
    let mats: Vec<CMat> = field.iter().map(|p| p.matrix.clone()).collect();
    Ok(sphere_frames(mesh, &mats, rank, opts)?.into_iter().map(Frame::from_raw).collect())
}

// ---------------------------------------------------------------------------
// Pointwise line-bundle frames on a sphere

/// Parametrized rank-1 projector field on the unit sphere, `(θ, ϕ) ↦ p`.
/// Values at the poles must not depend on `ϕ`.
pub trait SphereField: Sync {
    fn at(&self, theta: f64, phi: f64) -> Result<CMat>;
}

impl<F: Fn(f64, f64) -> Result<CMat> + Sync> SphereField for F {
    fn at(&self, theta: f64, phi: f64) -> Result<CMat> {
        self(theta, phi)
    }
}

fn project_unit(p: &CMat, v: &CVec) -> Result<CVec> {
    let w = p * v;
    let n = w.norm();
    if n * n < GRAM_FLOOR {
        return Err(Error::TransportBreakdown { min_eig: n * n });
    }
    Ok(w / c(n, 0.0))
}

/// Smooth unit-vector frame of a rank-1 projector field with vanishing Chern
/// number, evaluable at any point of the sphere.
///
/// The northern and southern frames come from transport along the meridian
/// with a fixed number of steps, so each is a smooth function of its
/// endpoint. The southern frame is corrected by `e^{i(1−t)λ(ϕ)}`, where
/// `λ` lifts the equatorial phase mismatch, and the two are blended over a
/// band around the equator.
#[derive(Clone, Debug)]
pub struct SphereLineFrame {
    steps: usize,
    north0: CVec,
    south0: CVec,
    lift_table: Vec<f64>,
}

/// Half-width (radians) of the equatorial blending band.
const EQUATOR_BAND: f64 = PI / 8.0;

impl SphereLineFrame {
    /// `steps` is the transport step count along each meridian segment and
    /// `table` the number of longitudes used to lift the equatorial phase.
    pub fn new(field: &impl SphereField, steps: usize, table: usize) -> Result<Self> {
        if steps < 2 || table < 8 {
            return Err(Error::Precondition("sphere frame needs steps >= 2 and a lift table of >= 8 longitudes".into()));
        }
        let pn = field.at(0.0, 0.0)?;
        let rank = pn.trace().re.round() as usize;
        if rank != 1 {
            return Err(Error::Precondition(format!("pointwise sphere frames need a rank-1 field, got rank {rank}")));
        }
        let north0: CVec = linalg::canonical_frame(&pn, 1).column(0).into_owned();
        let mut this = SphereLineFrame { steps, north0: north0.clone(), south0: north0.clone(), lift_table: Vec::new() };
        this.south0 = this.transport(field, 0.0, PI, 0.0, &north0)?;
        let phases: Vec<C64> = (0..table)
            .into_par_iter()
            .map(|j| this.equator_mismatch(field, 2.0 * PI * j as f64 / table as f64))
            .collect::<Result<_>>()?;
        let mut lift = Vec::with_capacity(table);
        let mut acc = phases[0].arg();
        lift.push(acc);
        for j in 1..table {
            acc += (phases[j] / phases[j - 1]).arg();
            lift.push(acc);
        }
        let total = acc + (phases[0] / phases[table - 1]).arg() - lift[0];
        let winding = (total / (2.0 * PI)).round() as i64;
        if winding != 0 {
            return Err(Error::TopologicalObstruction { chern: winding });
        }
        this.lift_table = lift;
        Ok(this)
    }

    fn transport(&self, field: &impl SphereField, from: f64, to: f64, phi: f64, start: &CVec) -> Result<CVec> {
        let mut v = start.clone();
        for i in 1..=self.steps {
            let th = from + (to - from) * i as f64 / self.steps as f64;
            v = project_unit(&field.at(th, phi)?, &v)?;
        }
        Ok(v)
    }

    /// `f₋(π/2, ϕ)† f₊(π/2, ϕ)` as a unit phase.
    fn equator_mismatch(&self, field: &impl SphereField, phi: f64) -> Result<C64> {
        let np = self.transport(field, 0.0, PI / 2.0, phi, &self.north0)?;
        let sp = self.transport(field, PI, PI / 2.0, phi, &self.south0)?;
        let z = sp.dotc(&np);
        Ok(z / z.norm())
    }

    fn lift_at(&self, field: &impl SphereField, phi: f64) -> Result<f64> {
        let z = self.equator_mismatch(field, phi)?;
        let l = self.lift_table.len();
        let x = phi.rem_euclid(2.0 * PI) / (2.0 * PI) * l as f64;
        let j = (x.floor() as usize).min(l - 1);
        let f = x - j as f64;
        let next = if j + 1 < l { self.lift_table[j + 1] } else { self.lift_table[0] };
        let reference = self.lift_table[j] * (1.0 - f) + next * f;
        let a = z.arg();
        Ok(a + 2.0 * PI * ((reference - a) / (2.0 * PI)).round())
    }

    /// Frame vector at `(θ, ϕ)`.
    pub fn eval(&self, field: &impl SphereField, theta: f64, phi: f64) -> Result<CVec> {
        let lo = PI / 2.0 - EQUATOR_BAND;
        let hi = PI / 2.0 + EQUATOR_BAND;
        let north = |th: f64| self.transport(field, 0.0, th, phi, &self.north0);
        let south = |th: f64| -> Result<CVec> {
            let t = smoothstep((th - PI / 2.0) / (PI / 2.0));
            let lam = self.lift_at(field, phi)?;
            Ok(self.transport(field, PI, th, phi, &self.south0)? * C64::from_polar(1.0, (1.0 - t) * lam))
        };
        if theta <= lo {
            north(theta)
        } else if theta >= hi {
            south(theta)
        } else {
            let chi = smoothstep((theta - lo) / (hi - lo));
            let v = north(theta)? * c(1.0 - chi, 0.0) + south(theta)? * c(chi, 0.0);
            let n = v.norm();
            Ok(v / c(n, 0.0))
        }
    }
}

// ---------------------------------------------------------------------------
// Mollification

fn bump(d2: f64, delta: f64) -> f64 {
    let x = 1.0 - d2 / (delta * delta);
    if x <= 0.0 {
        0.0
    } else {
        x * x * x
    }
}

fn mollify(points: &[[f64; 3]], values: &[CMat], delta: f64) -> Vec<CMat> {
    points
        .par_iter()
        .map(|p| {
            let mut acc = CMat::zeros(values[0].nrows(), values[0].ncols());
            let mut wsum = 0.0;
            for (q, v) in points.iter().zip(values) {
                let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
                let w = bump(d2, delta);
                if w > 0.0 {
                    acc += v * c(w, 0.0);
                    wsum += w;
                }
            }
            acc / c(wsum, 0.0)
        })
        .collect()
}

/// Mollify a frame field with an even bump of width `delta`, then restore
/// the frame property against `projectors` with a Löwdin correction.
pub fn smooth_frames(points: &[[f64; 3]], frames: &[CMat], projectors: &[CMat], delta: f64) -> Result<Vec<CMat>> {
    if frames.is_empty() || frames[0].ncols() == 0 {
        return Ok(frames.to_vec());
    }
    let avg = mollify(points, frames, delta);
    avg.par_iter()
        .zip(projectors.par_iter())
        .map(|(f, p)| {
            let x = p * f;
            let (inv, min) = linalg::inv_sqrt_pd(&(x.adjoint() * &x));
            if min < 0.5 {
                return Err(Error::DeltaTooLarge { min_eig: min });
            }
            Ok(x * inv)
        })
        .collect()
}

/// Mollify a projector field, then re-project onto the top `rank`
/// eigenvectors. Fails if the spectrum no longer separates at 1/2.
pub fn smooth_projectors(points: &[[f64; 3]], field: &[CMat], rank: usize, delta: f64) -> Result<Vec<CMat>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    let avg = mollify(points, field, delta);
    avg.par_iter()
        .map(|p| {
            let h = linalg::hermitize(p);
            let (vals, vecs) = linalg::eigh_unchecked(&h);
            let m = vals.len();
            let lo = if rank < m { vals[m - rank - 1] } else { 0.0 };
            let hi = if rank > 0 { vals[m - rank] } else { 1.0 };
            if hi < 0.75 || lo > 0.25 {
                return Err(Error::DeltaTooLarge { min_eig: hi - lo });
            }
            let v = vecs.columns(m - rank, rank);
            Ok(&v * v.adjoint())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Avoided points

/// A unit vector far from every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AvoidedPoint {
    pub point: CVec,
    pub min_distance: f64,
}

fn min_distance(samples: &[CVec], v: &CVec) -> f64 {
    samples.iter().map(|s| (s - v).norm()).fold(f64::INFINITY, f64::min)
}

fn random_unit(rng: &mut ChaCha8Rng, m: usize, real: bool) -> CVec {
    loop {
        let v = CVec::from_fn(m, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = if real { 0.0 } else { StandardNormal.sample(rng) };
            c(re, im)
        });
        let n = v.norm();
        if n > 1e-8 {
            return v / c(n, 0.0);
        }
    }
}

fn search_avoided(samples: &[CVec], opts: &FrameOptions, real: bool) -> Result<AvoidedPoint> {
    let m = samples.first().map_or(0, |s| s.len());
    if m < 2 {
        return Err(Error::Precondition("avoided points need ambient dimension M >= 2".into()));
    }
    let floor = opts.avoidance_floor;
    let mean: CVec = samples.iter().fold(CVec::zeros(m), |a, s| a + s);
    let mut first = -mean;
    if real {
        first = first.map(|z| c(z.re, 0.0));
    }
    let mut best: Option<AvoidedPoint> = None;
    if first.norm() > 1e-6 {
        let nf = first.norm();
        let cand = first / c(nf, 0.0);
        let d = min_distance(samples, &cand);
        best = Some(AvoidedPoint { point: cand, min_distance: d });
    }
    // Keep the farthest candidate of each batch so the blended paths built
    // on top of it stay well conditioned.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = 256;
    let mut tried = 0;
    while tried < opts.avoidance_trials {
        let count = batch.min(opts.avoidance_trials - tried);
        let cands: Vec<CVec> = (0..count).map(|_| random_unit(&mut rng, m, real)).collect();
        let dists: Vec<f64> = cands.par_iter().map(|v| min_distance(samples, v)).collect();
        for (v, d) in cands.into_iter().zip(dists) {
            if best.as_ref().is_none_or(|b| d > b.min_distance) {
                best = Some(AvoidedPoint { point: v, min_distance: d });
            }
        }
        tried += count;
        if let Some(b) = best.as_ref().filter(|b| b.min_distance > floor) {
            return Ok(ascend(samples, b.clone(), real));
        }
    }
    let best = best.map_or(0.0, |b| b.min_distance);
    Err(Error::AvoidanceFailure { trials: tried, best })
}

/// Deterministic pattern search that increases the minimum distance of an
/// accepted point to the samples. Steps halve down to `2^-8`.
fn ascend(samples: &[CVec], start: AvoidedPoint, real: bool) -> AvoidedPoint {
    let m = start.point.len();
    let units: Vec<C64> = if real { vec![c(1.0, 0.0)] } else { vec![c(1.0, 0.0), c(0.0, 1.0)] };
    let mut cur = start;
    let mut step = 0.5;
    while step > 1.0 / 256.0 {
        let mut moved = false;
        for j in 0..m {
            for u in &units {
                for sign in [1.0, -1.0] {
                    let mut v = cur.point.clone();
                    v[j] += u * c(sign * step, 0.0);
                    let v = &v / c(v.norm(), 0.0);
                    let d = min_distance(samples, &v);
                    if d > cur.min_distance {
                        cur = AvoidedPoint { point: v, min_distance: d };
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    cur
}

/// A unit vector at distance above the avoidance floor from every sample.
/// Candidates are the antipode of the sample mean followed by seeded random
/// unit vectors in batches of 256; the farthest candidate seen is returned
/// as soon as it clears the floor.
pub fn find_avoided_point(samples: &[CVec], opts: &FrameOptions) -> Result<AvoidedPoint> {
    search_avoided(samples, opts, false)
}

/// Same search restricted to real unit vectors (the fixed points of complex
/// conjugation).
pub fn find_real_avoided_point(samples: &[CVec], opts: &FrameOptions) -> Result<AvoidedPoint> {
    search_avoided(samples, opts, true)
}

/// Unit vector `v` maximizing `min_i |⟨φ_i, v⟩|` over the samples, found by
/// seeded random candidates followed by a pattern search. When the minimum
/// overlap is positive, `ω ↦ p(ω)v / |p(ω)v|` is a global section of the
/// sampled line field.
pub fn find_section_vector(samples: &[CVec], opts: &FrameOptions) -> Result<(CVec, f64)> {
    let m = samples.first().map_or(0, |s| s.len());
    if m == 0 {
        return Err(Error::Precondition("no samples".into()));
    }
    let overlap = |v: &CVec| samples.iter().map(|s| s.dotc(v).norm()).fold(f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cands: Vec<CVec> = Vec::new();
    let mean: CVec = samples.iter().fold(CVec::zeros(m), |a, s| a + s * s.dotc(&samples[0]).conj());
    if mean.norm() > 1e-6 {
        cands.push(&mean / c(mean.norm(), 0.0));
    }
    cands.extend((0..opts.avoidance_trials.min(1024)).map(|_| random_unit(&mut rng, m, false)));
    let scores: Vec<f64> = cands.par_iter().map(&overlap).collect();
    let (mut best, mut score) = (cands[0].clone(), scores[0]);
    for (v, s) in cands.into_iter().zip(scores) {
        if s > score {
            best = v;
            score = s;
        }
    }
    let mut step = 0.5;
    while step > 1.0 / 256.0 {
        let mut moved = false;
        for j in 0..m {
            for u in [c(1.0, 0.0), c(0.0, 1.0)] {
                for sign in [1.0, -1.0] {
                    let mut v = best.clone();
                    v[j] += u * c(sign * step, 0.0);
                    let v = &v / c(v.norm(), 0.0);
                    let s = overlap(&v);
                    if s > score {
                        best = v;
                        score = s;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    Ok((best, score))
}

/// `normalize(h·φ + (1−h)·φ*)`.
pub fn blend(h: f64, phi: &CVec, star: &CVec) -> CVec {
    let x = phi * c(h, 0.0) + star * c(1.0 - h, 0.0);
    let n = x.norm();
    x / c(n, 0.0)
}

// ---------------------------------------------------------------------------
// Ball fields

/// Values on concentric copies of a sphere mesh. Shell 0 is the boundary
/// (`r = 1`); the last shell sits at the center.
#[derive(Clone, Debug, PartialEq)]
pub struct BallField<T> {
    pub mesh: SurfaceMesh,
    pub radii: Vec<f64>,
    pub values: Vec<Vec<T>>,
}

/// Uniform radii `1, 1 − 1/S, …, 0`.
pub fn uniform_radii(shells: usize) -> Vec<f64> {
    (0..=shells).map(|s| 1.0 - s as f64 / shells as f64).collect()
}

fn mesh_center(mesh: &SurfaceMesh) -> [f64; 3] {
    match mesh.kind {
        geometry::MeshKind::LatLon { center, .. } | geometry::MeshKind::Box { center, .. } => center,
        geometry::MeshKind::Custom => {
            let n = mesh.nodes.len() as f64;
            let mut c = [0.0; 3];
            for p in &mesh.nodes {
                for a in 0..3 {
                    c[a] += p[a] / n;
                }
            }
            c
        }
    }
}

impl<T> BallField<T> {
    /// Position of node `j` on shell `s`.
    pub fn point(&self, s: usize, j: usize) -> [f64; 3] {
        let c = mesh_center(&self.mesh);
        let p = self.mesh.nodes[j];
        let r = self.radii[s];
        [c[0] + r * (p[0] - c[0]), c[1] + r * (p[1] - c[1]), c[2] + r * (p[2] - c[2])]
    }

    pub fn shells(&self) -> usize {
        self.radii.len()
    }
}

impl BallField<CMat> {
    pub fn constant(mesh: &SurfaceMesh, radii: Vec<f64>, value: CMat) -> Self {
        let values = radii.iter().map(|_| vec![value.clone(); mesh.nodes.len()]).collect();
        BallField { mesh: mesh.clone(), radii, values }
    }

    /// JSON dump with one record per node.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Rec {
            shell: usize,
            node: usize,
            radius: f64,
            payload: MatrixDoc,
        }
        let mut recs = Vec::new();
        for (s, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                recs.push(Rec { shell: s, node: j, radius: self.radii[s], payload: MatrixDoc::from_matrix(v) });
            }
        }
        Ok(serde_json::to_string(&recs)?)
    }
}

/// Extend a unit-vector field on the sphere into the ball by the contraction
/// trick `φ̃(rω) = normalize(h(r)φ(ω) + (1 − h(r))φ*)`.
pub fn extend_rank1(mesh: &SurfaceMesh, phi: &[CVec], opts: &FrameOptions) -> Result<(BallField<CVec>, AvoidedPoint)> {
    let avoided = find_avoided_point(phi, opts)?;
    let star = -avoided.point.clone();
    let radii = uniform_radii(opts.shells);
    let values = radii
        .iter()
        .enumerate()
        .map(|(s, &r)| {
            if s == 0 {
                phi.to_vec()
            } else {
                let h = cutoff_h(r);
                phi.iter().map(|v| blend(h, v, &star)).collect()
            }
        })
        .collect();
    Ok((BallField { mesh: mesh.clone(), radii, values }, avoided))
}

/// Extend a boundary projector field into the ball inside `Ran Q`.
pub fn extend_projector(mesh: &SurfaceMesh, p: &[Projector], q: &BallField<CMat>, opts: &FrameOptions) -> Result<BallField<CMat>> {
    let bd: Vec<CMat> = p.iter().map(|x| x.matrix.clone()).collect();
    let rank = p.first().map_or(0, |x| x.rank);
    for (j, (pj, qj)) in bd.iter().zip(&q.values[0]).enumerate() {
        let r = linalg::fro(&(qj * pj - pj));
        if r >= 1e-8 {
            return Err(Error::Precondition(format!("boundary projector not inside Q at node {j} ({r:.3e})")));
        }
    }
    if rank > 0 {
        let ch = geometry::chern_number_raw(mesh, &bd)?;
        if ch.chern != 0 {
            return Err(Error::TopologicalObstruction { chern: ch.chern });
        }
    }
    let mut values = extend_rec(mesh, &q.radii, &bd, &q.values, rank, opts)?;
    values[0] = bd;
    Ok(BallField { mesh: mesh.clone(), radii: q.radii.clone(), values })
}

fn extend_rec(mesh: &SurfaceMesh, radii: &[f64], bd: &[CMat], q: &[Vec<CMat>], rank: usize, opts: &FrameOptions) -> Result<Vec<Vec<CMat>>> {
    let m = bd[0].nrows();
    let nodes = mesh.nodes.len();
    if rank == 0 {
        return Ok(radii.iter().map(|_| vec![CMat::zeros(m, m); nodes]).collect());
    }
    let last = radii.len() - 1;
    let rq = q[last][0].trace().re.round() as usize;

    // Step 2a: a frame of Q carried out along every ray from the center.
    let center = linalg::canonical_frame(&q[last][0], rq);
    let psi_rays: Vec<Vec<CMat>> = (0..nodes)
        .into_par_iter()
        .map(|j| {
            let path: Vec<CMat> = (0..=last).rev().map(|s| q[s][j].clone()).collect();
            let mut fr = geometry::transport(&path, &center)?;
            fr.reverse();
            Ok(fr)
        })
        .collect::<Result<_>>()?;
    let reduced: Vec<CMat> = (0..nodes).map(|j| linalg::hermitize(&(psi_rays[j][0].adjoint() * &bd[j] * &psi_rays[j][0]))).collect();

    let inner: Vec<Vec<CMat>> = if rank == rq {
        radii.iter().map(|_| vec![linalg::identity(rq); nodes]).collect()
    } else {
        // Step 2b: peel off one frame vector and recurse on the complement.
        let frames = sphere_frames(mesh, &reduced, rank, opts)?;
        let phi: Vec<CVec> = frames.iter().map(|f| f.column(0).into_owned()).collect();
        let (ball, _) = extend_rank1(mesh, &phi, &FrameOptions { shells: last, ..opts.clone() })?;
        let line: Vec<Vec<CMat>> = ball.values.iter().map(|row| row.iter().map(|v| v * v.adjoint()).collect()).collect();
        if rank == 1 {
            line
        } else {
            let q1: Vec<Vec<CMat>> = line.iter().map(|row| row.iter().map(|l| linalg::identity(rq) - l).collect()).collect();
            let bd1: Vec<CMat> = reduced.iter().zip(&line[0]).map(|(p, l)| linalg::hermitize(&(p - l))).collect();
            let sub_opts = FrameOptions { seed: opts.seed.wrapping_add(17), ..opts.clone() };
            let rest = extend_rec(mesh, radii, &bd1, &q1, rank - 1, &sub_opts)?;
            line.iter().zip(rest).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
        }
    };
    Ok((0..radii.len())
        .map(|s| (0..nodes).map(|j| &psi_rays[j][s] * &inner[s][j] * psi_rays[j][s].adjoint()).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// Time-reversal symmetric constructions

/// Orthonormal frame of `p` made of θ-invariant vectors. Requires
/// `θ p θ⁻¹ = p`.
pub fn theta_real_frame(p: &CMat, trs: &Trs) -> Result<CMat> {
    let rank = p.trace().re.round() as usize;
    let v = linalg::canonical_frame(p, rank);
    let tv = trs.apply(&v);
    let mut cands: Vec<CVec> = Vec::new();
    for k in 0..rank {
        cands.push(v.column(k) + tv.column(k));
        cands.push((v.column(k) - tv.column(k)) * linalg::I);
    }
    let mut basis: Vec<CVec> = Vec::new();
    while basis.len() < rank {
        let mut best: Option<(f64, CVec)> = None;
        for w in &cands {
            let mut x = w.clone();
            for b in &basis {
                let coef = b.dotc(&x);
                x -= b * coef;
            }
            let n = x.norm();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, x));
            }
        }
        let (n, x) = best.ok_or_else(|| Error::Symmetry { residual: f64::NAN })?;
        if n < 1e-6 {
            return Err(Error::Symmetry { residual: n });
        }
        basis.push(x / c(n, 0.0));
    }
    let mut out = CMat::zeros(p.nrows(), rank);
    for (k, b) in basis.iter().enumerate() {
        out.set_column(k, b);
    }
    Ok(out)
}

fn check_pair_symmetry(field: &[CMat], pair: impl Fn(usize) -> usize, trs: &Trs, tol: f64) -> Result<()> {
    for (j, p) in field.iter().enumerate() {
        let r = linalg::fro(&(&field[pair(j)] - trs.conjugate_operator(p)));
        if r > tol {
            return Err(Error::Symmetry { residual: r });
        }
    }
    Ok(())
}

/// θ-symmetric frame of a projector field sampled at `α_j = 2πj/L` on a
/// circle centered at a time-reversal invariant point, so that sample
/// `j + L/2` is the image of sample `j`.
pub fn trs_frame_on_circle(samples: &[Projector], trs: &Trs) -> Result<Vec<Frame>> {
    let mats: Vec<CMat> = samples.iter().map(|p| p.matrix.clone()).collect();
    Ok(trs_circle_frames(&mats, trs)?.into_iter().map(Frame::from_raw).collect())
}

pub fn trs_circle_frames(field: &[CMat], trs: &Trs) -> Result<Vec<CMat>> {
    let l = field.len();
    if l < 4 || l % 2 != 0 {
        return Err(Error::Symmetry { residual: f64::INFINITY });
    }
    let half = l / 2;
    check_pair_symmetry(field, |j| (j + half) % l, trs, 1e-9)?;
    let rank = field[0].trace().re.round() as usize;
    let start = linalg::canonical_frame(&field[0], rank);
    let upper = geometry::transport(&field[..=half], &start)?;
    let u_obs = linalg::unitarize(&(trs.apply(&upper[0]).adjoint() * &upper[half]));
    let mut out = vec![CMat::zeros(0, 0); l];
    for j in 0..half {
        let frac = 2.0 * j as f64 / l as f64;
        out[j] = &upper[j] * linalg::unitary_pow(&u_obs, -frac);
    }
    for j in 0..half {
        out[j + half] = trs.apply(&out[j]);
    }
    Ok(out)
}

/// Polar grid on the unit disk: a center node plus `rings × angles` nodes.
/// Node `(i, j)` sits at radius `i / rings` and angle `2πj / angles`; ring
/// `rings` is the boundary circle.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskMesh {
    pub rings: usize,
    pub angles: usize,
}

impl DiskMesh {
    pub fn new(rings: usize, angles: usize) -> Result<Self> {
        if rings < 2 || angles < 4 || angles % 2 != 0 {
            return Err(Error::Precondition("disk mesh needs rings >= 2 and an even angle count >= 4".into()));
        }
        Ok(DiskMesh { rings, angles })
    }

    pub fn len(&self) -> usize {
        1 + self.rings * self.angles
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        if i == 0 {
            0
        } else {
            1 + (i - 1) * self.angles + (j % self.angles)
        }
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        if node == 0 {
            (0, 0)
        } else {
            ((node - 1) / self.angles + 1, (node - 1) % self.angles)
        }
    }

    pub fn point(&self, node: usize) -> [f64; 3] {
        let (i, j) = self.coords(node);
        let r = i as f64 / self.rings as f64;
        let a = 2.0 * PI * j as f64 / self.angles as f64;
        [r * a.cos(), r * a.sin(), 0.0]
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|n| self.point(n)).collect()
    }

    /// The node at `−k`.
    pub fn pair(&self, node: usize) -> usize {
        let (i, j) = self.coords(node);
        self.node(i, j + self.angles / 2)
    }

    pub fn boundary(&self) -> Vec<usize> {
        (0..self.angles).map(|j| self.node(self.rings, j)).collect()
    }
}

/// Which branch of the disk construction ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiskBranch {
    NoRealPoint,
    RealPoint { angle_index: usize },
}

/// Result of the TRS vector extension.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskVectors {
    pub values: Vec<CVec>,
    pub branch: DiskBranch,
}

/// Tolerance for calling a boundary vector real.
const REAL_TOL: f64 = 1e-8;

/// Linear interpolation of boundary vectors at fractional angle index `x`.
fn circle_value(phi: &[CVec], x: f64) -> CVec {
    let l = phi.len();
    let x = x.rem_euclid(l as f64);
    let j = x.floor() as usize % l;
    let f = x - x.floor();
    if f == 0.0 {
        return phi[j].clone();
    }
    let v = &phi[j] * c(1.0 - f, 0.0) + &phi[(j + 1) % l] * c(f, 0.0);
    let n = v.norm();
    v / c(n, 0.0)
}

/// Extend a conjugation-symmetric unit-vector field `φ(−ω) = conj φ(ω)` on
/// the circle to the disk, symmetrically.
pub fn trs_extend_vector_on_disk(disk: &DiskMesh, phi: &[CVec], opts: &FrameOptions, eps: f64, delta: f64) -> Result<DiskVectors> {
    let l = disk.angles;
    let half = l / 2;
    if phi.len() != l {
        return Err(Error::Precondition("boundary vector count differs from disk angles".into()));
    }
    for j in 0..l {
        let r = (&phi[(j + half) % l] - phi[j].map(|z| z.conj())).norm();
        if r > 1e-9 {
            return Err(Error::Symmetry { residual: r });
        }
    }
    let m = phi[0].len();
    let mut values = vec![CVec::zeros(m); disk.len()];
    for (j, &node) in disk.boundary().iter().enumerate() {
        values[node] = phi[j].clone();
    }

    let realness: Vec<f64> = phi.iter().map(|v| (v - v.map(|z| z.conj())).norm()).collect();
    let j0 = (0..l).min_by(|&a, &b| realness[a].total_cmp(&realness[b])).unwrap();

    let branch = if m == 1 || realness[j0] > REAL_TOL {
        // No real boundary value: a real avoided point keeps the blend
        // symmetric.
        let star = if m == 1 {
            // A real boundary value would have been found; any phase works
            // for a line since the blend never cancels with a real target
            // away from ±φ.
            -find_real_avoided_point_line(phi)
        } else {
            -find_real_avoided_point(phi, opts)?.point
        };
        for i in 0..disk.rings {
            let h = cutoff_h(i as f64 / disk.rings as f64);
            for j in 0..l {
                let node = disk.node(i, j);
                values[node] = blend(h, &phi[j], &star);
                if i == 0 {
                    break;
                }
            }
        }
        values[0] = values[0].map(|z| c(z.re, 0.0));
        let n0 = values[0].norm();
        values[0] /= c(n0, 0.0);
        DiskBranch::NoRealPoint
    } else {
        let v0 = {
            let r = phi[j0].map(|z| c(z.re, 0.0));
            let n = r.norm();
            r / c(n, 0.0)
        };
        // Dense samples of ∂D₊: the upper arc and the constant segment.
        let mut bd_samples: Vec<CVec> = Vec::new();
        for k in 0..=(half * 8) {
            bd_samples.push(circle_value(phi, j0 as f64 + k as f64 / 8.0));
        }
        bd_samples.push(v0.clone());
        let star = -find_avoided_point(&bd_samples, opts)?.point;
        let a0 = 2.0 * PI * j0 as f64 / l as f64;
        let rot = |p: [f64; 3]| {
            let (s, co) = (-a0).sin_cos();
            [co * p[0] - s * p[1], s * p[0] + co * p[1]]
        };
        // Star center of the half disk D₊ in rotated coordinates.
        let cp = [0.0, 0.5];
        let upper_value = |x: [f64; 2]| -> CVec {
            let d = [x[0] - cp[0], x[1] - cp[1]];
            // exit parameter along cp + t·d through the arc or the segment
            let a = d[0] * d[0] + d[1] * d[1];
            if a < 1e-300 {
                return star.clone();
            }
            let b = 2.0 * (cp[0] * d[0] + cp[1] * d[1]);
            let cc = cp[0] * cp[0] + cp[1] * cp[1] - 1.0;
            let t_arc = (-b + (b * b - 4.0 * a * cc).sqrt()) / (2.0 * a);
            let t_seg = if d[1] < 0.0 { -cp[1] / d[1] } else { f64::INFINITY };
            let (t, target) = if t_seg < t_arc {
                (t_seg, v0.clone())
            } else {
                let e = [cp[0] + t_arc * d[0], cp[1] + t_arc * d[1]];
                let ang = e[1].atan2(e[0]).clamp(0.0, PI);
                (t_arc, circle_value(phi, j0 as f64 + ang / (2.0 * PI) * l as f64))
            };
            blend(cutoff_h(1.0 / t), &target, &star)
        };
        for node in 0..disk.len() {
            let (i, j) = disk.coords(node);
            if i == disk.rings {
                continue;
            }
            let rel = (j + l - j0) % l;
            if node == 0 || rel == 0 || rel == half {
                values[node] = v0.clone();
            } else if rel < half {
                values[node] = upper_value(rot(disk.point(node)));
            }
        }
        for node in 1..disk.len() {
            let (i, j) = disk.coords(node);
            let rel = (j + l - j0) % l;
            if i < disk.rings && rel > half {
                values[node] = values[disk.pair(node)].map(|z| z.conj());
            }
        }

        // Mollify with an even kernel and blend back to the exact boundary
        // values near the circle.
        let pts = disk.points();
        let mats: Vec<CMat> = values.iter().map(|v| CMat::from_column_slice(m, 1, v.as_slice())).collect();
        let smooth = mollify(&pts, &mats, delta);
        let f_eps = |r: f64| 1.0 - smoothstep((r - (1.0 - 2.0 * eps)) / eps);
        let mut out = values.clone();
        for node in 0..disk.len() {
            let (i, j) = disk.coords(node);
            if i == disk.rings {
                continue;
            }
            let r = i as f64 / disk.rings as f64;
            let f = f_eps(r);
            let sm: CVec = smooth[node].column(0).into_owned();
            if sm.norm() < 0.5 {
                return Err(Error::DeltaTooLarge { min_eig: sm.norm() });
            }
            let x = &phi[j] * c(1.0 - f, 0.0) + sm * c(f, 0.0);
            let n = x.norm();
            if n < 0.5 {
                return Err(Error::DeltaTooLarge { min_eig: n });
            }
            out[node] = x / c(n, 0.0);
        }
        values = out;
        DiskBranch::RealPoint { angle_index: j0 }
    };

    // Exact symmetry: keep one node of every pair and mirror the other.
    for node in 0..disk.len() {
        let p = disk.pair(node);
        if p == node {
            let r = values[node].map(|z| c(z.re, 0.0));
            let n = r.norm();
            values[node] = r / c(n, 0.0);
        } else if p < node && disk.coords(node).0 < disk.rings {
            values[node] = values[p].map(|z| z.conj());
        }
    }
    Ok(DiskVectors { values, branch })
}

/// For `M = 1` every unit vector is a phase; a real target is `±1`.
fn find_real_avoided_point_line(phi: &[CVec]) -> CVec {
    let plus = CVec::from_element(1, c(1.0, 0.0));
    if min_distance(phi, &plus) >= min_distance(phi, &-plus.clone()) {
        plus
    } else {
        -plus
    }
}

/// Output of [`trs_extend_on_disk`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiskField {
    pub mesh: DiskMesh,
    pub projectors: Vec<CMat>,
    pub branches: Vec<DiskBranch>,
}

/// Symmetric extension of a θ-symmetric projector field from the boundary
/// circle into the disk, inside `Ran Q`.
pub fn trs_extend_on_disk(disk: &DiskMesh, circle: &[Projector], q: &[Projector], trs: &Trs, opts: &FrameOptions) -> Result<DiskField> {
    if q.len() != disk.len() || circle.len() != disk.angles {
        return Err(Error::Precondition("field sizes do not match the disk mesh".into()));
    }
    let qm: Vec<CMat> = q.iter().map(|p| p.matrix.clone()).collect();
    let pm: Vec<CMat> = circle.iter().map(|p| p.matrix.clone()).collect();
    check_pair_symmetry(&qm, |n| disk.pair(n), trs, 1e-9)?;
    check_pair_symmetry(&pm, |j| (j + disk.angles / 2) % disk.angles, trs, 1e-9)?;
    let bd = disk.boundary();
    for (j, p) in pm.iter().enumerate() {
        let r = linalg::fro(&(&qm[bd[j]] * p - p));
        if r >= 1e-8 {
            return Err(Error::Precondition(format!("boundary projector not inside Q at angle {j} ({r:.3e})")));
        }
    }
    let rank = circle.first().map_or(0, |p| p.rank);
    let mut branches = Vec::new();
    let mut projectors = disk_rec(disk, &pm, &qm, trs, rank, opts, &mut branches)?;
    for (j, &node) in bd.iter().enumerate() {
        projectors[node] = pm[j].clone();
    }
    Ok(DiskField { mesh: disk.clone(), projectors, branches })
}

fn disk_rec(disk: &DiskMesh, circle: &[CMat], q: &[CMat], trs: &Trs, rank: usize, opts: &FrameOptions, branches: &mut Vec<DiskBranch>) -> Result<Vec<CMat>> {
    let m = q[0].nrows();
    if rank == 0 {
        return Ok(vec![CMat::zeros(m, m); disk.len()]);
    }
    // Real frame of Q at the center, transported along rays; mirrored rays
    // are images under θ so the reduced symmetry is plain conjugation.
    let psi0 = theta_real_frame(&q[0], trs)?;
    let rq = psi0.ncols();
    let half = disk.angles / 2;
    let mut psi = vec![CMat::zeros(m, rq); disk.len()];
    psi[0] = psi0.clone();
    let rays: Vec<Vec<CMat>> = (0..half)
        .into_par_iter()
        .map(|j| {
            let path: Vec<CMat> = std::iter::once(q[0].clone()).chain((1..=disk.rings).map(|i| q[disk.node(i, j)].clone())).collect();
            geometry::transport(&path, &psi0)
        })
        .collect::<Result<_>>()?;
    for (j, ray) in rays.into_iter().enumerate() {
        for i in 1..=disk.rings {
            let f = ray[i].clone();
            psi[disk.node(i, j + half)] = trs.apply(&f);
            psi[disk.node(i, j)] = f;
        }
    }
    let bd = disk.boundary();
    let reduced: Vec<CMat> = bd.iter().zip(circle).map(|(&n, p)| linalg::hermitize(&(psi[n].adjoint() * p * &psi[n]))).collect();
    let conj = Trs::conjugation(rq);

    let inner: Vec<CMat> = if rank == rq {
        vec![linalg::identity(rq); disk.len()]
    } else {
        let frames = trs_circle_frames(&reduced, &conj)?;
        let phi: Vec<CVec> = frames.iter().map(|f| f.column(0).into_owned()).collect();
        let ext = trs_extend_vector_on_disk(disk, &phi, opts, 0.15, 1.5 / disk.rings as f64)?;
        branches.push(ext.branch);
        let line: Vec<CMat> = ext.values.iter().map(|v| v * v.adjoint()).collect();
        if rank == 1 {
            line
        } else {
            let q1: Vec<CMat> = line.iter().map(|l| linalg::identity(rq) - l).collect();
            let c1: Vec<CMat> = reduced.iter().zip(&bd).map(|(p, &n)| linalg::hermitize(&(p - &line[n]))).collect();
            let sub_opts = FrameOptions { seed: opts.seed.wrapping_add(31), ..opts.clone() };
            let rest = disk_rec(disk, &c1, &q1, &conj, rank - 1, &sub_opts, branches)?;
            line.iter().zip(rest).map(|(a, b)| a + b).collect()
        }
    };
    let mut out: Vec<CMat> = (0..disk.len()).map(|n| &psi[n] * &inner[n] * psi[n].adjoint()).collect();
    for node in 0..disk.len() {
        let p = disk.pair(node);
        if p < node {
            out[node] = trs.conjugate_operator(&out[p]);
        } else if p == node {
            out[node] = linalg::hermitize(&(&out[node] + trs.conjugate_operator(&out[node]))) * c(0.5, 0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
