//! Discrete differential geometry of projector fields: Löwdin frames,
//! parallel transport, link phases, lattice Berry flux and winding numbers.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, C64};
use crate::model::{KPoint, Projector};

/// Orthonormal `M×n` column family.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(CMat);

impl Frame {
    pub fn new(m: CMat) -> Result<Self> {
        let n = m.ncols();
        let r = linalg::fro(&(m.adjoint() * &m - linalg::identity(n)));
        if !(r <= 1e-10) {
            return Err(Error::Precondition(format!("frame columns not orthonormal (residual {r:.3e})")));
        }
        Ok(Frame(m))
    }

    /// Wrap without checking orthonormality.
    pub fn from_raw(m: CMat) -> Self {
        Frame(m)
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.0.ncols()
    }

    pub fn projector(&self) -> Projector {
        Projector::from_frame(&self.0)
    }

    pub fn orthonormality_residual(&self) -> f64 {
        linalg::fro(&(self.0.adjoint() * &self.0 - linalg::identity(self.rank())))
    }
}

/// Default floor on the smallest Gram eigenvalue in a Löwdin step.
pub const GRAM_FLOOR: f64 = 1e-6;

/// `PΦ₀ [(PΦ₀)†(PΦ₀)]^{-1/2}` on raw matrices.
pub fn loewdin(p: &CMat, phi0: &CMat, gram_floor: f64) -> Result<CMat> {
    if phi0.ncols() == 0 {
        return Ok(phi0.clone());
    }
    let x = p * phi0;
    let g = x.adjoint() * &x;
    let (inv, min) = linalg::inv_sqrt_pd(&g);
    if !(min > gram_floor) {
        return Err(Error::TransportBreakdown { min_eig: min });
    }
    Ok(x * inv)
}

pub fn loewdin_frame(p: &Projector, phi0: &Frame) -> Result<Frame> {
    Ok(Frame(loewdin(&p.matrix, phi0.matrix(), GRAM_FLOOR)?))
}

/// Largest projector jump allowed between consecutive transport steps.
pub const MAX_TRANSPORT_STEP: f64 = 0.5;

/// Discrete parallel transport on raw matrices: `Φ_{j+1} = Löwdin(P_{j+1}, Φ_j)`.
pub fn transport(projectors: &[CMat], start: &CMat) -> Result<Vec<CMat>> {
    let mut out = Vec::with_capacity(projectors.len());
    let mut cur = start.clone();
    for (j, p) in projectors.iter().enumerate() {
        if j > 0 {
            let jump = linalg::fro(&(p - &projectors[j - 1]));
            if jump >= MAX_TRANSPORT_STEP {
                return Err(Error::Precondition(format!("transport step {j} jumps by {jump:.3} (path not resolved)")));
            }
            cur = loewdin(p, &cur, GRAM_FLOOR)?;
        }
        out.push(cur.clone());
    }
    Ok(out)
}

/// Transport `start` along a path of projectors. The first output is
/// `start` itself, which must frame `projectors[0]`.
pub fn transport_frame(projectors: &[Projector], start: &Frame) -> Result<Vec<Frame>> {
    if let Some(p0) = projectors.first() {
        let r = linalg::fro(&(start.projector().matrix - &p0.matrix));
        if r > 1e-8 {
            return Err(Error::Precondition(format!("start frame does not frame the first projector ({r:.3e})")));
        }
    }
    let mats: Vec<CMat> = projectors.iter().map(|p| p.matrix.clone()).collect();
    Ok(transport(&mats, start.matrix())?.into_iter().map(Frame).collect())
}

/// Deterministic frame of a projector used for link phases.
pub fn link_frame(p: &CMat) -> CMat {
    let rank = p.trace().re.round().max(0.0) as usize;
    linalg::canonical_frame(p, rank)
}

/// Smallest overlap modulus accepted in a link.
pub const LINK_FLOOR: f64 = 1e-8;

/// `conj det(Φ_a†Φ_b) / |det|` for frames of the two projectors. The
/// conjugate fixes the orientation so that the lower band of `B(k)·σ` has
/// charge `sign det B′` on an outward oriented sphere.
pub fn link_of_frames(fa: &CMat, fb: &CMat) -> Result<C64> {
    if fa.ncols() != fb.ncols() {
        return Err(Error::Precondition(format!("rank mismatch in link ({} vs {})", fa.ncols(), fb.ncols())));
    }
    if fa.ncols() == 0 {
        return Ok(c(1.0, 0.0));
    }
    let d = linalg::det(&(fa.adjoint() * fb));
    let m = d.norm();
    if !(m >= LINK_FLOOR) {
        return Err(Error::MeshTooCoarse { modulus: m });
    }
    Ok(d.conj() / m)
}

/// Unit-modulus link variable between two projectors of rank `n`.
pub fn link_phase(pa: &Projector, pb: &Projector, n: usize) -> Result<C64> {
    let fa = linalg::canonical_frame(&pa.matrix, n);
    let fb = linalg::canonical_frame(&pb.matrix, n);
    link_of_frames(&fa, &fb)
}

/// Closed surface made of (possibly degenerate) quads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMesh {
    pub nodes: Vec<[f64; 3]>,
    pub quads: Vec<[usize; 4]>,
    pub kind: MeshKind,
}

/// How the mesh was generated; lat-lon meshes keep their parametrization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MeshKind {
    LatLon { center: [f64; 3], semi_axes: [f64; 3], nlat: usize, nlon: usize },
    Box { center: [f64; 3], half_widths: [f64; 3], n: usize },
    Custom,
}

impl SurfaceMesh {
    /// Latitude–longitude sphere; polar caps are degenerate quads.
    pub fn sphere(center: [f64; 3], radius: f64, nlat: usize, nlon: usize) -> Result<Self> {
        Self::ellipsoid(center, [radius; 3], nlat, nlon)
    }

    pub fn ellipsoid(center: [f64; 3], semi_axes: [f64; 3], nlat: usize, nlon: usize) -> Result<Self> {
        if nlat < 2 || nlon < 3 {
            return Err(Error::Precondition("sphere mesh needs nlat >= 2 and nlon >= 3".into()));
        }
        if semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Precondition("semi-axes must be positive".into()));
        }
        let mut nodes = Vec::with_capacity(2 + (nlat - 1) * nlon);
        let point = |theta: f64, phi: f64| {
            [
                center[0] + semi_axes[0] * theta.sin() * phi.cos(),
                center[1] + semi_axes[1] * theta.sin() * phi.sin(),
                center[2] + semi_axes[2] * theta.cos(),
            ]
        };
        nodes.push(point(0.0, 0.0));
        for i in 1..nlat {
            for j in 0..nlon {
                nodes.push(point(PI * i as f64 / nlat as f64, 2.0 * PI * j as f64 / nlon as f64));
            }
        }
        nodes.push(point(PI, 0.0));
        let kind = MeshKind::LatLon { center, semi_axes, nlat, nlon };
        let mut mesh = SurfaceMesh { nodes, quads: Vec::new(), kind };
        for i in 0..nlat {
            for j in 0..nlon {
                let jn = (j + 1) % nlon;
                mesh.quads.push([
                    mesh.latlon_node(i, j),
                    mesh.latlon_node(i + 1, j),
                    mesh.latlon_node(i + 1, jn),
                    mesh.latlon_node(i, jn),
                ]);
            }
        }
        Ok(mesh)
    }

    /// Node index of ring `i` (0 = north pole, `nlat` = south pole) and
    /// column `j` of a lat-lon mesh.
    pub fn latlon_node(&self, i: usize, j: usize) -> usize {
        match self.kind {
            MeshKind::LatLon { nlat, nlon, .. } => {
                if i == 0 {
                    0
                } else if i == nlat {
                    1 + (nlat - 1) * nlon
                } else {
                    1 + (i - 1) * nlon + (j % nlon)
                }
            }
            _ => panic!("latlon_node on a non lat-lon mesh"),
        }
    }

    pub fn latlon_dims(&self) -> Option<(usize, usize)> {
        match self.kind {
            MeshKind::LatLon { nlat, nlon, .. } => Some((nlat, nlon)),
            _ => None,
        }
    }

    /// Surface of an axis-aligned box, `n×n` quads per face.
    pub fn box_surface(center: [f64; 3], half_widths: [f64; 3], n: usize) -> Result<Self> {
        if n == 0 || half_widths.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Precondition("box mesh needs n >= 1 and positive half-widths".into()));
        }
        let mut index: HashMap<[usize; 3], usize> = HashMap::new();
        let mut nodes = Vec::new();
        let mut node = |g: [usize; 3], nodes: &mut Vec<[f64; 3]>| -> usize {
            *index.entry(g).or_insert_with(|| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = center[a] + half_widths[a] * (2.0 * g[a] as f64 / n as f64 - 1.0);
                }
                nodes.push(p);
                nodes.len() - 1
            })
        };
        let mut quads = Vec::new();
        for a in 0..3 {
            let b = (a + 1) % 3;
            let cc = (a + 2) % 3;
            for side in [0, n] {
                for u in 0..n {
                    for v in 0..n {
                        let g = |du: usize, dv: usize| {
                            let mut x = [0usize; 3];
                            x[a] = side;
                            x[b] = u + du;
                            x[cc] = v + dv;
                            x
                        };
                        let corners = if side == n {
                            [g(0, 0), g(1, 0), g(1, 1), g(0, 1)]
                        } else {
                            [g(0, 0), g(0, 1), g(1, 1), g(1, 0)]
                        };
                        let q = corners.map(|x| node(x, &mut nodes));
                        quads.push(q);
                    }
                }
            }
        }
        Ok(SurfaceMesh { nodes, quads, kind: MeshKind::Box { center, half_widths, n } })
    }

    pub fn kpoints(&self) -> Vec<KPoint> {
        self.nodes.iter().map(|p| KPoint::new(p[0], p[1], p[2])).collect()
    }

    /// Non-degenerate directed edges of every quad, in traversal order.
    fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(4 * self.quads.len());
        for q in &self.quads {
            for s in 0..4 {
                let (a, b) = (q[s], q[(s + 1) % 4]);
                if a != b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Check closedness, consistent orientation and `χ = 2`.
    pub fn validate(&self) -> Result<()> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for &(a, b) in &self.directed_edges() {
            if a >= self.nodes.len() || b >= self.nodes.len() {
                return Err(Error::Precondition(format!("quad references missing node {}", a.max(b))));
            }
            *count.entry((a, b)).or_default() += 1;
        }
        for (&(a, b), &n) in &count {
            if n != 1 || count.get(&(b, a)) != Some(&1) {
                return Err(Error::Precondition(format!("edge ({a},{b}) is not shared by exactly two oppositely oriented quads")));
            }
        }
        let v = self.nodes.len() as i64;
        let e = (count.len() / 2) as i64;
        let f = self.quads.len() as i64;
        let chi = v - e + f;
        if chi != 2 {
            return Err(Error::Precondition(format!("Euler characteristic {chi}, expected 2")));
        }
        Ok(())
    }

    /// Signed enclosed volume (positive when quads are outward oriented).
    pub fn signed_volume(&self) -> f64 {
        let tri = |a: [f64; 3], b: [f64; 3], cc: [f64; 3]| {
            (a[0] * (b[1] * cc[2] - b[2] * cc[1]) - a[1] * (b[0] * cc[2] - b[2] * cc[0]) + a[2] * (b[0] * cc[1] - b[1] * cc[0])) / 6.0
        };
        self.quads
            .iter()
            .map(|q| {
                let p = q.map(|i| self.nodes[i]);
                tri(p[0], p[1], p[2]) + tri(p[0], p[2], p[3])
            })
            .sum()
    }

    /// Node permutation `k ↦ 2c − k` of a lat-lon mesh with even `nlon`.
    pub fn antipodal_map(&self) -> Result<Vec<usize>> {
        let (nlat, nlon) = self.latlon_dims().ok_or_else(|| Error::Precondition("antipodal map needs a lat-lon mesh".into()))?;
        if nlon % 2 != 0 {
            return Err(Error::Precondition("antipodal map needs an even longitude count".into()));
        }
        let mut map = vec![0; self.nodes.len()];
        for i in 0..=nlat {
            for j in 0..nlon {
                map[self.latlon_node(i, j)] = self.latlon_node(nlat - i, j + nlon / 2);
            }
        }
        Ok(map)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MeshDoc { nodes: self.nodes.clone(), quads: self.quads.clone(), orientation: "outward".into() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MeshDoc = serde_json::from_str(s)?;
        if doc.orientation != "outward" {
            return Err(Error::Parse(format!("unsupported orientation `{}`", doc.orientation)));
        }
        let mesh = SurfaceMesh { nodes: doc.nodes, quads: doc.quads, kind: MeshKind::Custom };
        mesh.validate()?;
        Ok(mesh)
    }
}

#[derive(Serialize, Deserialize)]
struct MeshDoc {
    nodes: Vec<[f64; 3]>,
    quads: Vec<[usize; 4]>,
    orientation: String,
}

/// Cyclically ordered samples on `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopSamples<T> {
    pub params: Vec<f64>,
    pub payload: Vec<T>,
}

impl<T> LoopSamples<T> {
    pub fn new(params: Vec<f64>, payload: Vec<T>) -> Result<Self> {
        if params.len() != payload.len() {
            return Err(Error::Precondition("loop parameter and payload lengths differ".into()));
        }
        if params.iter().any(|&t| !(0.0..1.0).contains(&t)) || params.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition("loop parameters must be strictly increasing in [0, 1)".into()));
        }
        Ok(LoopSamples { params, payload })
    }

    /// Samples at `j / L`.
    pub fn uniform(payload: Vec<T>) -> Self {
        let l = payload.len();
        LoopSamples { params: (0..l).map(|j| j as f64 / l as f64).collect(), payload }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Lattice Berry data on a surface mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct BerryData {
    /// Flux angle per quad, in `(-π, π]`.
    pub quad_flux: Vec<f64>,
    /// Link phase per non-degenerate directed edge `(a, b)` with `a < b`.
    pub links: Vec<((usize, usize), C64)>,
    pub total_flux: f64,
}

impl BerryData {
    /// CSV with columns `quad,flux,cumulative`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quad,flux,cumulative\n");
        let mut cum = 0.0;
        for (q, f) in self.quad_flux.iter().enumerate() {
            cum += f;
            let _ = writeln!(s, "{q},{f:.16e},{cum:.16e}");
        }
        s
    }
}

/// Output of [`chern_number`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChernResult {
    pub chern: i64,
    pub raw: f64,
    pub residual: f64,
    pub berry: BerryData,
}

/// Plaquette fluxes beyond this are considered unresolved.
pub const FLUX_GUARD: f64 = PI - 0.1;
/// Largest accepted distance of the raw flux sum from an integer.
pub const CHERN_RESIDUAL: f64 = 0.05;

fn edge_link(cache: &HashMap<(usize, usize), C64>, a: usize, b: usize) -> C64 {
    if a == b {
        c(1.0, 0.0)
    } else if a < b {
        cache[&(a, b)]
    } else {
        cache[&(b, a)].conj()
    }
}

/// Lattice flux of a projector field through each quad and the resulting
/// Chern number. Link phases come from deterministic frames of the
/// projectors; plaquette products are independent of that choice.
pub fn berry_flux(mesh: &SurfaceMesh, field: &[CMat]) -> Result<BerryData> {
    if field.len() != mesh.nodes.len() {
        return Err(Error::Precondition(format!("field has {} nodes, mesh has {}", field.len(), mesh.nodes.len())));
    }
    let frames: Vec<CMat> = field.par_iter().map(link_frame).collect();
    let mut edges: Vec<(usize, usize)> = mesh.directed_edges().into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    edges.sort_unstable();
    edges.dedup();
    let linked: Vec<((usize, usize), C64)> = edges
        .par_iter()
        .map(|&(a, b)| link_of_frames(&frames[a], &frames[b]).map(|z| ((a, b), z)))
        .collect::<Result<_>>()?;
    let cache: HashMap<(usize, usize), C64> = linked.iter().copied().collect();
    let quad_flux: Vec<f64> = mesh
        .quads
        .iter()
        .map(|q| {
            let mut prod = c(1.0, 0.0);
            for s in 0..4 {
                prod *= edge_link(&cache, q[s], q[(s + 1) % 4]);
            }
            prod.arg()
        })
        .collect();
    let total_flux = quad_flux.iter().sum();
    Ok(BerryData { quad_flux, links: linked, total_flux })
}

pub fn chern_number_raw(mesh: &SurfaceMesh, field: &[CMat]) -> Result<ChernResult> {
    let berry = berry_flux(mesh, field)?;
    for (q, &f) in berry.quad_flux.iter().enumerate() {
        if f.abs() >= FLUX_GUARD {
            return Err(Error::RefineMesh { quad: q, flux: f });
        }
    }
    let raw = berry.total_flux / (2.0 * PI);
    let chern = raw.round();
    let residual = (raw - chern).abs();
    if residual >= CHERN_RESIDUAL {
        return Err(Error::InconsistentField { residual });
    }
    Ok(ChernResult { chern: chern as i64, raw, residual, berry })
}

/// Chern number of a projector field on a closed mesh, oriented by the
/// outward normal.
pub fn chern_number(mesh: &SurfaceMesh, field: &[Projector]) -> Result<ChernResult> {
    let mats: Vec<CMat> = field.iter().map(|p| p.matrix.clone()).collect();
    chern_number_raw(mesh, &mats)
}

/// Flux along an arbitrary closed node cycle.
pub fn cycle_flux(field: &[CMat], cycle: &[usize]) -> Result<f64> {
    let frames: Vec<CMat> = cycle.iter().map(|&i| link_frame(&field[i])).collect();
    let mut prod = c(1.0, 0.0);
    for s in 0..cycle.len() {
        let t = (s + 1) % cycle.len();
        if cycle[s] != cycle[t] {
            prod *= link_of_frames(&frames[s], &frames[t])?;
        }
    }
    Ok(prod.arg())
}

/// Winding number of a loop of unit complex numbers.
pub fn winding_number(samples: &LoopSamples<C64>) -> Result<i64> {
    let z = &samples.payload;
    let l = z.len();
    if l == 0 {
        return Ok(0);
    }
    let mut total = 0.0;
    for j in 0..l {
        let d = (z[(j + 1) % l] / z[j]).arg();
        if d.abs() >= PI / 2.0 {
            return Err(Error::RefineLoop { step: j, arg: d });
        }
        total += d;
    }
    let w = total / (2.0 * PI);
    Ok(w.round() as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdditivityReport {
    pub chern_p: i64,
    pub chern_q: i64,
    pub chern_sum: i64,
    /// Largest per-quad difference `F[P+Q] − F[P] − F[Q]`, taken mod 2π.
    pub max_quad_defect: f64,
}

pub fn curvature_additivity_check(p: &[Projector], q: &[Projector], mesh: &SurfaceMesh) -> Result<AdditivityReport> {
    if p.len() != q.len() {
        return Err(Error::Precondition("fields differ in length".into()));
    }
    for (i, (a, b)) in p.iter().zip(q).enumerate() {
        let r = linalg::fro(&(&a.matrix * &b.matrix));
        if r >= 1e-9 {
            return Err(Error::Precondition(format!("P and Q not orthogonal at node {i} ({r:.3e})")));
        }
    }
    let sum: Vec<Projector> = p.iter().zip(q).map(|(a, b)| Projector { rank: a.rank + b.rank, matrix: &a.matrix + &b.matrix }).collect();
    let cp = chern_number(mesh, p)?;
    let cq = chern_number(mesh, q)?;
    let cs = chern_number(mesh, &sum)?;
    let max_quad_defect = (0..mesh.quads.len())
        .map(|i| linalg::principal(cs.berry.quad_flux[i] - cp.berry.quad_flux[i] - cq.berry.quad_flux[i]).abs())
        .fold(0.0, f64::max);
    Ok(AdditivityReport { chern_p: cp.chern, chern_q: cq.chern, chern_sum: cs.chern, max_quad_defect })
}

/// Compare the flux around the image of every quad under a node pairing
/// with minus the flux around the quad. Returns the worst deviation.
pub fn curvature_antisymmetry(mesh: &SurfaceMesh, field: &[CMat], pairing: &[usize]) -> Result<f64> {
    let berry = berry_flux(mesh, field)?;
    let mut worst = 0.0f64;
    for (qi, q) in mesh.quads.iter().enumerate() {
        let image: Vec<usize> = q.iter().map(|&i| pairing[i]).collect();
        let f = cycle_flux(field, &image)?;
        worst = worst.max(linalg::principal(f + berry.quad_flux[qi]).abs());
    }
    Ok(worst)
}
