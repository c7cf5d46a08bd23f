//! Periodic Hamiltonian families on the 3-torus, their spectra, spectral
//! projectors and band-crossing detection.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, C64};

/// A point of the Brillouin torus `R³/Z³`, in reduced coordinates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KPoint {
    pub coords: [f64; 3],
}

impl KPoint {
    pub fn new(k1: f64, k2: f64, k3: f64) -> Self {
        KPoint { coords: [k1, k2, k3] }
    }

    /// Representative with every coordinate in `[0, 1)`.
    pub fn canonical(&self) -> Self {
        let mut out = [0.0; 3];
        for (o, &x) in out.iter_mut().zip(self.coords.iter()) {
            let mut y = x - x.floor();
            if y >= 1.0 {
                y -= 1.0;
            }
            *o = y;
        }
        KPoint { coords: out }
    }

    pub fn neg(&self) -> Self {
        KPoint::new(-self.coords[0], -self.coords[1], -self.coords[2])
    }

    pub fn add(&self, d: [f64; 3]) -> Self {
        KPoint::new(self.coords[0] + d[0], self.coords[1] + d[1], self.coords[2] + d[2])
    }

    /// Shortest displacement `other − self` on the torus, each component in
    /// `[-1/2, 1/2)`.
    pub fn torus_delta(&self, other: &KPoint) -> [f64; 3] {
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = wrap_half(other.coords[i] - self.coords[i]);
        }
        d
    }

    pub fn torus_distance(&self, other: &KPoint) -> f64 {
        let d = self.torus_delta(other);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Wrap into `[-1/2, 1/2)`.
pub fn wrap_half(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

impl PartialEq for KPoint {
    fn eq(&self, other: &Self) -> bool {
        self.torus_delta(other).iter().all(|d| d.abs() < 1e-12)
    }
}

impl fmt::Display for KPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.coords[0], self.coords[1], self.coords[2])
    }
}

/// A validated Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(CMat);

impl HermitianMatrix {
    pub fn new(m: CMat) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::ModelDefinition(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols())));
        }
        let r = linalg::hermiticity_residual(&m);
        if !(r <= 1e-12) {
            return Err(Error::ModelDefinition(format!("non-Hermitian matrix (residual {r:.3e})")));
        }
        Ok(HermitianMatrix(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }
}

/// Antiunitary `v ↦ Θ conj(v)` with a real orthogonal involution `Θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trs {
    theta: CMat,
}

impl Trs {
    pub fn new(theta: CMat) -> Result<Self> {
        let n = theta.nrows();
        if theta.ncols() != n {
            return Err(Error::ModelDefinition("theta must be square".into()));
        }
        if theta.iter().any(|z| z.im != 0.0) {
            return Err(Error::ModelDefinition("theta must be real".into()));
        }
        let id = linalg::identity(n);
        if linalg::fro(&(&theta * theta.transpose() - &id)) > 1e-12 {
            return Err(Error::ModelDefinition("theta must be orthogonal".into()));
        }
        if linalg::fro(&(&theta * &theta - &id)) > 1e-12 {
            return Err(Error::ModelDefinition("theta must square to the identity".into()));
        }
        Ok(Trs { theta })
    }

    /// Plain complex conjugation.
    pub fn conjugation(n: usize) -> Self {
        Trs { theta: linalg::identity(n) }
    }

    pub fn theta(&self) -> &CMat {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    /// `Θ conj(A) Θᵀ`: the conjugated operator `θ A θ⁻¹`.
    pub fn conjugate_operator(&self, a: &CMat) -> CMat {
        &self.theta * linalg::conj(a) * self.theta.transpose()
    }

    /// `Θ conj(Φ)`: the image of a frame (or vector) under `θ`.
    pub fn apply(&self, frame: &CMat) -> CMat {
        &self.theta * linalg::conj(frame)
    }
}

/// Parameters of the builtin canonical models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Builtin {
    /// Two-band lattice Weyl model with a pair of Weyl points on the k₃ axis
    /// at `cos(2πk₃) = 2 − m` (needs `1 < m < 3`).
    Weyl2 { m: f64 },
    /// Same family with a mass large enough to gap the two bands.
    Insulator2 { m: f64 },
    /// `weyl2 ⊕ conj(weyl2(−k))`, time-reversal symmetric under conjugation
    /// composed with the block swap.
    Trs4 { m: f64 },
    /// Four bands: a flat band at −6, a `weyl2` pair (bands 2–3) and a
    /// fourth orbital that touches band 3 at two more Weyl points.
    Weyl4 { coupling: f64 },
    /// Periodized local Weyl model `B(k)·σ` with
    /// `B_i = Σ_j J_ij sin(2π(k − k₀)_j) / 2π`.
    LocalWeyl { k0: [f64; 3], jacobian: [[f64; 3]; 3] },
    /// Constant matrix (test reference).
    Constant { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl Builtin {
    pub fn weyl2() -> Self {
        Builtin::Weyl2 { m: 2.0 }
    }
    pub fn insulator2() -> Self {
        Builtin::Insulator2 { m: 10.0 }
    }
    pub fn trs4() -> Self {
        Builtin::Trs4 { m: 2.0 }
    }
    pub fn weyl4() -> Self {
        Builtin::Weyl4 { coupling: 0.5 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Builtin::Weyl2 { .. } | Builtin::Insulator2 { .. } | Builtin::LocalWeyl { .. } => 2,
            Builtin::Trs4 { .. } | Builtin::Weyl4 { .. } => 4,
            Builtin::Constant { re, .. } => re.len(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Builtin::Weyl2 { .. } => "weyl2",
            Builtin::Insulator2 { .. } => "insulator2",
            Builtin::Trs4 { .. } => "trs4",
            Builtin::Weyl4 { .. } => "weyl4",
            Builtin::LocalWeyl { .. } => "localweyl",
            Builtin::Constant { .. } => "constant",
        }
    }

    fn eval(&self, k: &KPoint) -> CMat {
        match self {
            Builtin::Weyl2 { m } | Builtin::Insulator2 { m } => pauli(weyl2_vector(k, *m)),
            Builtin::Trs4 { m } => {
                let a = pauli(weyl2_vector(k, *m));
                let b = linalg::conj(&pauli(weyl2_vector(&k.neg(), *m)));
                let mut h = CMat::zeros(4, 4);
                h.view_mut((0, 0), (2, 2)).copy_from(&a);
                h.view_mut((2, 2), (2, 2)).copy_from(&b);
                h
            }
            Builtin::Weyl4 { coupling } => weyl4(k, *coupling),
            Builtin::LocalWeyl { k0, jacobian } => {
                let mut s = [0.0; 3];
                for j in 0..3 {
                    s[j] = (2.0 * PI * (k.coords[j] - k0[j])).sin() / (2.0 * PI);
                }
                let mut b = [0.0; 3];
                for i in 0..3 {
                    b[i] = (0..3).map(|j| jacobian[i][j] * s[j]).sum();
                }
                pauli(b)
            }
            Builtin::Constant { re, im } => {
                let n = re.len();
                CMat::from_fn(n, n, |i, j| c(re[i][j], im.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)))
            }
        }
    }

    fn trs(&self) -> Option<Trs> {
        match self {
            Builtin::Trs4 { .. } => {
                let mut t = CMat::zeros(4, 4);
                t[(0, 2)] = c(1.0, 0.0);
                t[(1, 3)] = c(1.0, 0.0);
                t[(2, 0)] = c(1.0, 0.0);
                t[(3, 1)] = c(1.0, 0.0);
                Some(Trs { theta: t })
            }
            _ => None,
        }
    }
}

fn weyl2_vector(k: &KPoint, m: f64) -> [f64; 3] {
    let [k1, k2, k3] = k.coords;
    let tau = 2.0 * PI;
    [
        (tau * k1).sin(),
        (tau * k2).sin(),
        (tau * k3).cos() + m - (tau * k1).cos() - (tau * k2).cos(),
    ]
}

/// `b·σ`.
pub fn pauli(b: [f64; 3]) -> CMat {
    let mut h = CMat::zeros(2, 2);
    h[(0, 0)] = c(b[2], 0.0);
    h[(1, 1)] = c(-b[2], 0.0);
    h[(0, 1)] = c(b[0], -b[1]);
    h[(1, 0)] = c(b[0], b[1]);
    h
}

fn weyl4(k: &KPoint, coupling: f64) -> CMat {
    let [k1, k2, k3] = k.coords;
    let tau = 2.0 * PI;
    let mut h = CMat::zeros(4, 4);
    h[(0, 0)] = c(-6.0, 0.0);
    let block = pauli(weyl2_vector(k, 2.0)) * c(0.5, 0.0);
    h.view_mut((1, 1), (2, 2)).copy_from(&block);
    h[(3, 3)] = c(3.0 + 0.5 * ((tau * k1).cos() + (tau * k2).cos()) + (tau * k3).cos(), 0.0);
    let s: C64 = c((tau * k1).sin(), (tau * k2).sin()) * coupling;
    h[(1, 3)] = s;
    h[(3, 1)] = s.conj();
    h
}

/// One Fourier component `T_R` of a tight-binding Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct Hopping {
    pub r: [i64; 3],
    pub matrix: CMat,
}

pub type CustomEvaluator = Arc<dyn Fn(&KPoint) -> CMat + Send + Sync>;

/// How `H(k)` is evaluated.
#[derive(Clone)]
pub enum Evaluator {
    Builtin(Builtin),
    /// `H(k) = Σ_R T_R e^{2πi k·R}`.
    Fourier(Vec<Hopping>),
    /// Arbitrary closure; not serializable. Used for synthetic models.
    Custom(CustomEvaluator),
}

impl fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Evaluator::Builtin(b) => f.debug_tuple("Builtin").field(b).finish(),
            Evaluator::Fourier(h) => write!(f, "Fourier({} terms)", h.len()),
            Evaluator::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A periodic family `k ↦ H(k)` of `dim×dim` Hermitian matrices.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub evaluator: Evaluator,
    pub trs: Option<Trs>,
}

impl ModelSpec {
    pub fn builtin(b: Builtin) -> Self {
        ModelSpec { name: b.name().to_string(), dim: b.dim(), trs: b.trs(), evaluator: Evaluator::Builtin(b) }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        let b = match name {
            "weyl2" => Builtin::weyl2(),
            "insulator2" => Builtin::insulator2(),
            "trs4" => Builtin::trs4(),
            "weyl4" => Builtin::weyl4(),
            other => return Err(Error::ModelDefinition(format!("unknown builtin model `{other}`"))),
        };
        Ok(Self::builtin(b))
    }

    pub fn custom(name: &str, dim: usize, f: impl Fn(&KPoint) -> CMat + Send + Sync + 'static) -> Self {
        ModelSpec { name: name.into(), dim, evaluator: Evaluator::Custom(Arc::new(f)), trs: None }
    }

    /// Tight-binding model; checks `T_{−R} = T_R†` for every term.
    pub fn fourier(name: &str, dim: usize, hoppings: Vec<Hopping>, trs: Option<Trs>) -> Result<Self> {
        for h in &hoppings {
            if h.matrix.nrows() != dim || h.matrix.ncols() != dim {
                return Err(Error::ModelDefinition(format!("hopping R={:?} has wrong shape", h.r)));
            }
            let neg = [-h.r[0], -h.r[1], -h.r[2]];
            let partner = hoppings
                .iter()
                .find(|o| o.r == neg)
                .ok_or_else(|| Error::ModelDefinition(format!("hopping R={:?} has no partner at -R", h.r)))?;
            let r = linalg::fro(&(&partner.matrix - h.matrix.adjoint()));
            if r > 1e-12 {
                return Err(Error::ModelDefinition(format!("T(-R) != T(R)^dagger at R={:?} (residual {r:.3e})", h.r)));
            }
        }
        if let Some(t) = &trs {
            if t.dim() != dim {
                return Err(Error::ModelDefinition("theta dimension mismatch".into()));
            }
        }
        Ok(ModelSpec { name: name.into(), dim, evaluator: Evaluator::Fourier(hoppings), trs })
    }

    fn raw(&self, k: &KPoint) -> CMat {
        match &self.evaluator {
            Evaluator::Builtin(b) => b.eval(k),
            Evaluator::Fourier(terms) => {
                let mut h = CMat::zeros(self.dim, self.dim);
                for t in terms {
                    let phase = 2.0 * PI * (0..3).map(|i| k.coords[i] * t.r[i] as f64).sum::<f64>();
                    h += &t.matrix * c(phase.cos(), phase.sin());
                }
                h
            }
            Evaluator::Custom(f) => f(k),
        }
    }

    /// Residual of the time-reversal relation at `k`.
    pub fn trs_residual(&self, k: &KPoint) -> Option<f64> {
        let t = self.trs.as_ref()?;
        let a = self.raw(&k.neg());
        let b = t.conjugate_operator(&self.raw(k));
        Some(linalg::fro(&(a - b)))
    }
}

/// `H(k)`, validated Hermitian.
pub fn eval(model: &ModelSpec, k: &KPoint) -> Result<HermitianMatrix> {
    if k.coords.iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition(format!("non-finite k-point {k}")));
    }
    let h = model.raw(k);
    if h.nrows() != model.dim {
        return Err(Error::ModelDefinition(format!("evaluator returned {}x{}, expected dim {}", h.nrows(), h.ncols(), model.dim)));
    }
    HermitianMatrix::new(h)
}

/// Eigenvalues in ascending order and orthonormal eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `ε_{n+1} − ε_n` (bands counted from 1).
    pub fn gap(&self, n: usize) -> f64 {
        self.eigenvalues[n] - self.eigenvalues[n - 1]
    }
}

pub fn eigh(h: &HermitianMatrix) -> Result<Spectrum> {
    let (eigenvalues, eigenvectors) = linalg::eigh(h.matrix())?;
    Ok(Spectrum { eigenvalues, eigenvectors })
}

/// Spectrum of `H(k)`.
pub fn spectrum_at(model: &ModelSpec, k: &KPoint) -> Result<Spectrum> {
    eigh(&eval(model, k)?)
}

/// A rank-`rank` orthogonal projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub rank: usize,
    pub matrix: CMat,
}

impl Projector {
    pub fn zero(dim: usize) -> Self {
        Projector { rank: 0, matrix: CMat::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Projector { rank: dim, matrix: linalg::identity(dim) }
    }

    /// Wrap a matrix, deducing the rank from the trace.
    pub fn from_matrix(matrix: CMat) -> Self {
        let tr = matrix.trace().re;
        Projector { rank: tr.round().max(0.0) as usize, matrix }
    }

    pub fn from_frame(frame: &CMat) -> Self {
        Projector { rank: frame.ncols(), matrix: linalg::frame_projector(frame) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn idempotency_residual(&self) -> f64 {
        linalg::fro(&(&self.matrix * &self.matrix - &self.matrix))
    }

    /// Check idempotency, Hermiticity and the trace.
    pub fn validate(&self) -> Result<()> {
        let idem = self.idempotency_residual();
        let herm = linalg::fro(&(&self.matrix - self.matrix.adjoint()));
        let tr = (self.matrix.trace().re - self.rank as f64).abs();
        if idem > 1e-10 || herm > 1e-12 || tr > 1e-8 {
            return Err(Error::Precondition(format!(
                "not a rank-{} projector (idempotency {idem:.2e}, hermiticity {herm:.2e}, trace {tr:.2e})",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Default floor on `ε_{n+1} − ε_n` for a spectral cut.
pub const GAP_FLOOR: f64 = 1e-8;

/// `P_n = Σ_{m ≤ n} |u_m⟩⟨u_m|`. `n = 0` gives the zero projector and
/// `n = M` the identity; neither needs a gap.
pub fn spectral_projector(spectrum: &Spectrum, n: usize, gap_floor: f64, k: &KPoint) -> Result<Projector> {
    let m = spectrum.dim();
    if n > m {
        return Err(Error::Precondition(format!("band index {n} exceeds dimension {m}")));
    }
    if n == 0 {
        return Ok(Projector::zero(m));
    }
    if n < m {
        let gap = spectrum.gap(n);
        if gap <= gap_floor {
            return Err(Error::DegenerateCut { band: n, gap, k: *k });
        }
    }
    let v = spectrum.eigenvectors.columns(0, n);
    Ok(Projector { rank: n, matrix: &v * v.adjoint() })
}

/// `P_n(k)` straight from the model.
pub fn projector_at(model: &ModelSpec, k: &KPoint, n: usize) -> Result<Projector> {
    spectral_projector(&spectrum_at(model, k)?, n, GAP_FLOOR, k)
}

/// One located crossing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub k: KPoint,
    pub gap: f64,
    /// `false` when refinement stalled above `1e-8`: an avoided crossing.
    pub genuine: bool,
}

/// Crossings between bands `band` and `band + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingSet {
    pub band: usize,
    pub points: Vec<Crossing>,
    pub grid: [usize; 3],
    pub tol: f64,
}

impl CrossingSet {
    pub fn empty(band: usize) -> Self {
        CrossingSet { band, points: Vec::new(), grid: [0; 3], tol: 0.0 }
    }

    pub fn from_points(band: usize, pts: &[KPoint]) -> Self {
        CrossingSet {
            band,
            points: pts.iter().map(|k| Crossing { k: *k, gap: 0.0, genuine: true }).collect(),
            grid: [0; 3],
            tol: 0.0,
        }
    }

    /// Only the refined (non-avoided) crossings.
    pub fn genuine(&self) -> Vec<KPoint> {
        self.points.iter().filter(|c| c.genuine).map(|c| c.k).collect()
    }
}

const REFINE_SHRINK: f64 = 0.5;
const REFINE_ITERS: usize = 60;
const CROSSING_GAP: f64 = 1e-8;

fn gap_at(model: &ModelSpec, n: usize, k: &KPoint) -> Result<f64> {
    let s = spectrum_at(model, k)?;
    Ok(s.gap(n))
}

/// Coordinate pattern search on the gap function.
fn refine(model: &ModelSpec, n: usize, start: KPoint, step0: f64) -> Result<(KPoint, f64)> {
    let mut k = start;
    let mut g = gap_at(model, n, &k)?;
    let mut step = step0;
    for _ in 0..REFINE_ITERS {
        if g < CROSSING_GAP {
            break;
        }
        let mut best = (g, k);
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut d = [0.0; 3];
                d[axis] = sign * step;
                let cand = k.add(d);
                let gc = gap_at(model, n, &cand)?;
                if gc < best.0 {
                    best = (gc, cand);
                }
            }
        }
        if best.0 < g {
            g = best.0;
            k = best.1;
        } else {
            step *= REFINE_SHRINK;
        }
    }
    Ok((k.canonical(), g))
}

/// Default detection tolerance: 5% of the combined width of bands `n` and `n+1`.
pub fn default_crossing_tol(model: &ModelSpec, n: usize, grid: [usize; 3]) -> Result<f64> {
    if n == 0 || n >= model.dim {
        return Err(Error::Precondition(format!("band index {n} needs 1 <= n < {}", model.dim)));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in grid_points(grid) {
        let s = spectrum_at(model, &k)?;
        lo = lo.min(s.eigenvalues[n - 1]);
        hi = hi.max(s.eigenvalues[n]);
    }
    Ok(0.05 * (hi - lo))
}

/// Uniform grid `k = (i/n₁, j/n₂, l/n₃)`, `l` fastest.
pub fn grid_points(grid: [usize; 3]) -> Vec<KPoint> {
    let mut out = Vec::with_capacity(grid[0] * grid[1] * grid[2]);
    for i in 0..grid[0] {
        for j in 0..grid[1] {
            for l in 0..grid[2] {
                out.push(KPoint::new(i as f64 / grid[0] as f64, j as f64 / grid[1] as f64, l as f64 / grid[2] as f64));
            }
        }
    }
    out
}

pub fn grid_index(grid: [usize; 3], i: isize, j: isize, l: isize) -> usize {
    let w = |x: isize, n: usize| x.rem_euclid(n as isize) as usize;
    (w(i, grid[0]) * grid[1] + w(j, grid[1])) * grid[2] + w(l, grid[2])
}

/// Locate crossings between bands `n` and `n+1`: grid local minima of the
/// gap below `tol`, each refined by pattern search.
pub fn detect_crossings(model: &ModelSpec, n: usize, grid: [usize; 3], tol: f64) -> Result<CrossingSet> {
    if n == 0 || n >= model.dim {
        return Err(Error::Precondition(format!("band index {n} needs 1 <= n < {}", model.dim)));
    }
    if grid.iter().any(|&g| g < 8) {
        return Err(Error::Precondition("crossing grid needs at least 8 points per axis".into()));
    }
    let pts = grid_points(grid);
    let gaps: Vec<f64> = pts.par_iter().map(|k| gap_at(model, n, k)).collect::<Result<_>>()?;

    let mut seeds = Vec::new();
    for i in 0..grid[0] as isize {
        for j in 0..grid[1] as isize {
            for l in 0..grid[2] as isize {
                let idx = grid_index(grid, i, j, l);
                let g = gaps[idx];
                if g >= tol {
                    continue;
                }
                let mut is_min = true;
                'nb: for di in -1..=1 {
                    for dj in -1..=1 {
                        for dl in -1..=1 {
                            if (di, dj, dl) == (0, 0, 0) {
                                continue;
                            }
                            if gaps[grid_index(grid, i + di, j + dj, l + dl)] < g {
                                is_min = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_min {
                    seeds.push(pts[idx]);
                }
            }
        }
    }

    let step = 0.5 / *grid.iter().max().unwrap() as f64;
    let refined: Vec<(KPoint, f64)> = seeds.par_iter().map(|k| refine(model, n, *k, step)).collect::<Result<_>>()?;

    let mut points: Vec<Crossing> = Vec::new();
    for (k, g) in refined {
        if points.iter().any(|p| p.k.torus_distance(&k) < 1e-4) {
            continue;
        }
        points.push(Crossing { k, gap: g, genuine: g < CROSSING_GAP });
    }
    points.sort_by(|a, b| {
        a.k.coords
            .iter()
            .zip(b.k.coords.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(CrossingSet { band: n, points, grid, tol })
}
