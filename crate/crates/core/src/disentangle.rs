//! The disentanglement pipeline: a region around the crossings of bands
//! `N+1`/`N+2`, the rank-1 field `p = P_{N+1} − P_N` on its boundary, the
//! charge bookkeeping, the extension of `p` inward, the glue with
//! `P_{N+1}` outside, and verification of the resulting rank-`(N+1)` field.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, CVec, FrameOptions, SphereLineFrame};
use crate::geometry::{self, SurfaceMesh, GRAM_FLOOR};
use crate::io::MatrixDoc;
use crate::linalg::{self, c, CMat};
use crate::model::{self, CrossingSet, KPoint, ModelSpec, Spectrum, Trs, GAP_FLOOR};
use crate::wannier::{self, DecayProfile};

/// Largest semi-axis of a region, so that it never wraps around the torus.
pub const MAX_SEMI_AXIS: f64 = 0.45;

/// Lat-lon resolution of region boundary meshes.
pub const REGION_MESH: (usize, usize) = (32, 64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clearance {
    pub k: KPoint,
    /// Lower bound on the Euclidean distance to `∂Ω`.
    pub distance: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_some(x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// What the region was checked against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCertificates {
    pub inside: Vec<Clearance>,
    /// Distance lower bound from `Ω` to the nearest crossing of bands `N`,
    /// `N+1`; infinite when there are none (`null` in JSON).
    #[serde(with = "infinite_as_null")]
    pub lower: f64,
    /// Same for bands `N+2`, `N+3` when requested.
    pub upper: Option<f64>,
}

/// Ellipsoid `Ω = {k : ρ(k) < 1}` with `ρ(k) = |(k − c) / a|` on the torus,
/// together with the margin `ε` that defines `Ω_ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub margin: f64,
    pub mesh_dims: (usize, usize),
    pub certificates: RegionCertificates,
}

impl Region {
    pub fn new(center: [f64; 3], semi_axes: [f64; 3], margin: f64) -> Result<Self> {
        if semi_axes.iter().any(|&a| !(a > 0.0 && a <= MAX_SEMI_AXIS)) {
            return Err(Error::RegionConstruction(format!("semi-axes {semi_axes:?} outside (0, {MAX_SEMI_AXIS}]")));
        }
        let r = Region {
            center,
            semi_axes,
            margin,
            mesh_dims: REGION_MESH,
            certificates: RegionCertificates { inside: Vec::new(), lower: f64::INFINITY, upper: None },
        };
        if !(margin > 0.0 && margin < r.min_axis() / 4.0) {
            return Err(Error::RegionConstruction(format!("margin {margin} must lie in (0, {})", r.min_axis() / 4.0)));
        }
        Ok(r)
    }

    pub fn min_axis(&self) -> f64 {
        self.semi_axes.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Minimal-image displacement from the center.
    pub fn delta(&self, k: &KPoint) -> [f64; 3] {
        KPoint::new(self.center[0], self.center[1], self.center[2]).torus_delta(k)
    }

    /// `ρ(k)`; `Ω` is `ρ < 1`.
    pub fn gauge(&self, k: &KPoint) -> f64 {
        let d = self.delta(k);
        (0..3).map(|a| (d[a] / self.semi_axes[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Gauge value bounding `Ω_ε`: points with `ρ ≤ inner_gauge()` are at
    /// distance `≥ ε` from `∂Ω`.
    pub fn inner_gauge(&self) -> f64 {
        1.0 - self.margin / self.min_axis()
    }

    /// Lower bound on the distance from `k` to `∂Ω`.
    pub fn boundary_distance(&self, k: &KPoint) -> f64 {
        (self.gauge(k) - 1.0).abs() * self.min_axis()
    }

    /// Boundary point at sphere angles `(θ, ϕ)`.
    pub fn boundary_point(&self, theta: f64, phi: f64) -> KPoint {
        let u = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        KPoint::new(
            self.center[0] + self.semi_axes[0] * u[0],
            self.center[1] + self.semi_axes[1] * u[1],
            self.center[2] + self.semi_axes[2] * u[2],
        )
    }

    /// Sphere angles of the direction of `k` in normalized coordinates.
    pub fn angles(&self, k: &KPoint) -> (f64, f64) {
        let d = self.delta(k);
        let u: Vec<f64> = (0..3).map(|a| d[a] / self.semi_axes[a]).collect();
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        ((u[2] / r).clamp(-1.0, 1.0).acos(), u[1].atan2(u[0]))
    }

    pub fn mesh(&self) -> Result<SurfaceMesh> {
        SurfaceMesh::ellipsoid(self.center, self.semi_axes, self.mesh_dims.0, self.mesh_dims.1)
    }

    fn certify(&mut self, inner: &CrossingSet, lower: &CrossingSet, upper: Option<&CrossingSet>) -> std::result::Result<(), String> {
        let eps = self.margin;
        let mut inside = Vec::new();
        for x in &inner.points {
            let rho = self.gauge(&x.k);
            let d = self.boundary_distance(&x.k);
            if rho >= 1.0 || d <= eps {
                return Err(format!("crossing {} has clearance {d:.4} (gauge {rho:.3})", x.k));
            }
            inside.push(Clearance { k: x.k, distance: d });
        }
        let outside = |set: &CrossingSet| -> std::result::Result<f64, String> {
            let mut best = f64::INFINITY;
            for x in &set.points {
                let rho = self.gauge(&x.k);
                let d = if rho > 1.0 { (rho - 1.0) * self.min_axis() } else { 0.0 };
                if d <= 2.0 * eps {
                    return Err(format!("crossing {} of bands {}/{} within {d:.4} of the region", x.k, set.band, set.band + 1));
                }
                best = best.min(d);
            }
            Ok(best)
        };
        let lo = outside(lower)?;
        let up = upper.map(outside).transpose()?;
        self.certificates = RegionCertificates { inside, lower: lo, upper: up };
        Ok(())
    }
}

/// Search for an admissible ellipsoid around `inner` (crossings of bands
/// `N+1`, `N+2`), keeping clear of `lower` (bands `N`, `N+1`) and, when
/// given, `upper` (bands `N+2`, `N+3`). Larger regions are tried first.
pub fn build_region(inner: &CrossingSet, lower: &CrossingSet, upper: Option<&CrossingSet>, margin: f64) -> Result<Region> {
    Ok(region_candidates(inner, lower, upper, margin)?.swap_remove(0))
}

/// Every admissible ellipsoid of the search, in preference order. Centers
/// are the mean of the crossings, shifts of it by ±0.05 and by 1/2 along
/// each axis (the other way round the torus).
pub fn region_candidates(inner: &CrossingSet, lower: &CrossingSet, upper: Option<&CrossingSet>, margin: f64) -> Result<Vec<Region>> {
    if inner.points.is_empty() {
        return Err(Error::Precondition(format!(
            "no crossings between bands {} and {}: P_{} is already smooth, use it directly",
            inner.band,
            inner.band + 1,
            inner.band
        )));
    }
    let base = inner.points[0].k;
    let offsets: Vec<[f64; 3]> = inner.points.iter().map(|x| base.torus_delta(&x.k)).collect();
    let n = offsets.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|a| offsets.iter().map(|d| d[a]).sum::<f64>() / n);
    let mut centers = vec![mean];
    for s in [0.05, -0.05, 0.5] {
        for a in 0..3 {
            let mut m = mean;
            m[a] += s;
            centers.push(m);
        }
    }
    let mut found = Vec::new();
    let mut last_reason = String::from("no candidate tried");
    for pad in [0.35, 0.3, 0.25, 0.2, 0.15, 0.12, 0.1, 0.08, 0.06] {
        for off in &centers {
            let center: [f64; 3] = std::array::from_fn(|a| base.coords[a] + off[a]);
            let rel: Vec<[f64; 3]> = inner.points.iter().map(|x| KPoint::new(center[0], center[1], center[2]).torus_delta(&x.k)).collect();
            let spread: [f64; 3] = std::array::from_fn(|a| rel.iter().map(|d| d[a].abs()).fold(0.0, f64::max));
            let axes: [f64; 3] = std::array::from_fn(|a| (spread[a] * 3f64.sqrt() + pad).min(MAX_SEMI_AXIS));
            let mut region = match Region::new(KPoint::new(center[0], center[1], center[2]).canonical().coords, axes, margin) {
                Ok(r) => r,
                Err(e) => {
                    last_reason = e.to_string();
                    continue;
                }
            };
            match region.certify(inner, lower, upper) {
                Ok(()) => {
                    if !found.contains(&region) {
                        found.push(region);
                    }
                }
                Err(reason) => last_reason = reason,
            }
        }
    }
    if found.is_empty() {
        return Err(Error::RegionConstruction(format!("no admissible ellipsoid found; last rejection: {last_reason}")));
    }
    Ok(found)
}

/// Resolution of the slices used by [`outside_slice_cherns`].
pub const SLICE_MESH: usize = 24;

/// Chern numbers of `P_{N+1}` on the three coordinate tori through
/// `center + 1/2`, which miss the region. A smooth field equal to
/// `P_{N+1}` outside `Ω` has these slice Chern numbers everywhere, and a
/// global frame needs them to vanish.
pub fn outside_slice_cherns(model: &ModelSpec, n: usize, region: &Region) -> Result<[i64; 3]> {
    if n + 1 >= model.dim {
        return Ok([0; 3]);
    }
    let m = SLICE_MESH;
    let mut out = [0i64; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let vals: Vec<CMat> = (0..m * m)
            .into_par_iter()
            .map(|x| {
                let mut k = [0.0; 3];
                k[axis] = region.center[axis] + 0.5;
                k[a] = (x / m) as f64 / m as f64;
                k[b] = (x % m) as f64 / m as f64;
                let kp = KPoint::new(k[0], k[1], k[2]);
                Ok(model::projector_at(model, &kp, n + 1)?.matrix)
            })
            .collect::<Result<_>>()?;
        *slot = wannier::torus_chern(m, m, &vals)?.0;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Boundary fields and charges

/// `P_{N+1} − P_N` from one spectrum.
fn quasi_projector(s: &Spectrum, n: usize, k: &KPoint) -> Result<CMat> {
    let upper = model::spectral_projector(s, n + 1, GAP_FLOOR, k)?;
    let lower = model::spectral_projector(s, n, GAP_FLOOR, k)?;
    Ok(upper.matrix - lower.matrix)
}

fn p_at(model: &ModelSpec, n: usize, k: &KPoint) -> Result<CMat> {
    quasi_projector(&model::spectrum_at(model, k)?, n, k)
}

/// `p = P_{N+1} − P_N` on the nodes of the region's boundary mesh.
pub fn boundary_quasiprojector(model: &ModelSpec, n: usize, region: &Region) -> Result<Vec<CMat>> {
    if n + 1 > model.dim {
        return Err(Error::Precondition(format!("band N+1 = {} exceeds dimension {}", n + 1, model.dim)));
    }
    let mesh = region.mesh()?;
    mesh.kpoints()
        .par_iter()
        .map(|k| {
            let s = model::spectrum_at(model, k)?;
            let p = quasi_projector(&s, n, k).map_err(|e| Error::RegionInvalid(format!("gap closes on the boundary at {k}: {e}")))?;
            if n > 0 {
                let pn = model::spectral_projector(&s, n, GAP_FLOOR, k)?;
                let r = linalg::fro(&(&p * &pn.matrix));
                if r >= 1e-9 {
                    return Err(Error::RegionInvalid(format!("p not orthogonal to P_N at {k} ({r:.3e})")));
                }
            }
            Ok(p)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeylCharge {
    pub k: KPoint,
    pub charge: i64,
    pub radius: f64,
    pub residual: f64,
}

/// Sphere resolution used for individual charges.
pub const CHARGE_MESH: (usize, usize) = (32, 64);

/// Chern number of `p` on a small sphere around each crossing of bands
/// `N+1`, `N+2`.
pub fn charge_report(model: &ModelSpec, n: usize, crossings: &CrossingSet, radius: f64) -> Result<Vec<WeylCharge>> {
    for (i, a) in crossings.points.iter().enumerate() {
        for b in &crossings.points[i + 1..] {
            let d = a.k.torus_distance(&b.k);
            if d <= 2.0 * radius {
                return Err(Error::Precondition(format!("spheres of radius {radius} around {} and {} overlap (distance {d:.4})", a.k, b.k)));
            }
        }
    }
    crossings
        .points
        .iter()
        .map(|x| {
            let mesh = SurfaceMesh::sphere(x.k.coords, radius, CHARGE_MESH.0, CHARGE_MESH.1)?;
            let field: Vec<CMat> = mesh.kpoints().par_iter().map(|k| p_at(model, n, k)).collect::<Result<_>>()?;
            let ch = geometry::chern_number_raw(&mesh, &field)?;
            Ok(WeylCharge { k: x.k, charge: ch.chern, radius, residual: ch.residual })
        })
        .collect()
}

/// Chern numbers of `P_N`, `P_{N+1}` and `p` over `∂Ω`, computed
/// independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChernChain {
    pub lower: (i64, f64),
    pub upper: (i64, f64),
    pub quasi: (i64, f64),
}

impl ChernChain {
    pub fn all_zero(&self) -> bool {
        self.lower.0 == 0 && self.upper.0 == 0 && self.quasi.0 == 0
    }

    pub fn max_residual(&self) -> f64 {
        self.lower.1.max(self.upper.1).max(self.quasi.1)
    }
}

pub fn chern_chain(model: &ModelSpec, n: usize, region: &Region) -> Result<ChernChain> {
    let mesh = region.mesh()?;
    let spectra: Vec<(KPoint, Spectrum)> =
        mesh.kpoints().into_par_iter().map(|k| Ok((k, model::spectrum_at(model, &k)?))).collect::<Result<_>>()?;
    let field = |m: usize| -> Result<Vec<CMat>> {
        spectra
            .iter()
            .map(|(k, s)| model::spectral_projector(s, m, GAP_FLOOR, k).map(|p| p.matrix))
            .collect::<Result<_>>()
            .map_err(|e| Error::RegionInvalid(format!("gap closes on the boundary: {e}")))
    };
    let (pn, pn1) = (field(n)?, field(n + 1)?);
    let p: Vec<CMat> = pn1.iter().zip(&pn).map(|(a, b)| a - b).collect();
    let run = |f: &[CMat]| -> Result<(i64, f64)> {
        if f[0].trace().re.round() as usize == 0 || f[0].trace().re.round() as usize == model.dim {
            return Ok((0, 0.0));
        }
        let r = geometry::chern_number_raw(&mesh, f)?;
        Ok((r.chern, r.residual))
    };
    Ok(ChernChain { lower: run(&pn)?, upper: run(&pn1)?, quasi: run(&p)? })
}

// ---------------------------------------------------------------------------
// Global projector

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlueConfig {
    /// Width `ε` of the glue shell `Ω \ Ω_ε`.
    pub epsilon: f64,
    pub grid: [usize; 3],
    pub assumption2: bool,
    pub seed: u64,
    /// Transport steps along each ray and each meridian segment.
    pub transport_steps: usize,
    /// Eigenvalues at or above this are kept after the glue.
    pub accept: f64,
    /// Eigenvalues at or below this are dropped after the glue.
    pub reject: f64,
    /// Crossing clearance for the region search; `epsilon` when unset.
    #[serde(default)]
    pub margin: Option<f64>,
}

impl Default for GlueConfig {
    fn default() -> Self {
        GlueConfig { epsilon: 0.08, grid: [16, 16, 16], assumption2: false, seed: 0, transport_steps: 64, accept: 0.75, reject: 0.25, margin: None }
    }
}

/// Which part of the construction produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeTag {
    Outside,
    Extended,
    Glued,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledField {
    pub grid: [usize; 3],
    pub band_index: usize,
    pub assumption2: bool,
    pub projectors: Vec<CMat>,
    pub tags: Vec<NodeTag>,
    pub region: Option<Region>,
    pub chern: Option<ChernChain>,
}

impl DisentangledField {
    pub fn rank(&self) -> usize {
        self.band_index + 1
    }

    pub fn kpoints(&self) -> Vec<KPoint> {
        model::grid_points(self.grid)
    }
}

/// Smooth rank-1 extension of `p` into `Ω`, evaluable at any point.
struct Extension<'a> {
    model: &'a ModelSpec,
    n: usize,
    region: &'a Region,
    assumption2: bool,
    steps: usize,
    psi0: CMat,
    /// Fixed vector whose projection gives the boundary gauge; the
    /// transported sphere frame is used when no such vector exists.
    section: Option<CVec>,
    sphere: Option<SphereLineFrame>,
    star: CVec,
}

/// Smallest overlap `|p(ω)v|` accepted for the projection gauge.
const SECTION_FLOOR: f64 = 0.2;

impl<'a> Extension<'a> {
    fn q_at(&self, k: &KPoint) -> Result<CMat> {
        let s = model::spectrum_at(self.model, k)?;
        let lower = model::spectral_projector(&s, self.n, GAP_FLOOR, k)?.matrix;
        let top = if self.assumption2 { (self.n + 2).min(self.model.dim) } else { self.model.dim };
        let upper = model::spectral_projector(&s, top, GAP_FLOOR, k)?.matrix;
        Ok(upper - lower)
    }

    /// Frame of `Q` at `center + Δ`, transported along the straight ray with
    /// a fixed number of steps.
    fn ray_frame(&self, d: [f64; 3]) -> Result<CMat> {
        let mut psi = self.psi0.clone();
        for i in 1..=self.steps {
            let t = i as f64 / self.steps as f64;
            let k = KPoint::new(self.region.center[0] + t * d[0], self.region.center[1] + t * d[1], self.region.center[2] + t * d[2]);
            psi = geometry::loewdin(&self.q_at(&k)?, &psi, GRAM_FLOOR)?;
        }
        Ok(psi)
    }

    fn boundary_delta(&self, theta: f64, phi: f64) -> [f64; 3] {
        let u = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        std::array::from_fn(|a| self.region.semi_axes[a] * u[a])
    }

    /// Reduced boundary projector `Ψ(ω)† p(ω) Ψ(ω)`.
    fn reduced_line(&self, theta: f64, phi: f64) -> Result<CMat> {
        let p = p_at(self.model, self.n, &self.region.boundary_point(theta, phi))?;
        let psi = self.ray_frame(self.boundary_delta(theta, phi))?;
        Ok(psi.adjoint() * p * psi)
    }

    /// Reduced boundary frame `Ψ(ω)† f(ω)`.
    fn reduced_boundary(&self, theta: f64, phi: f64) -> Result<CVec> {
        if let Some(v) = &self.section {
            let w = self.reduced_line(theta, phi)? * v;
            let n = w.norm();
            if n < 1e-3 {
                return Err(Error::Verification { node: None, detail: format!("projection gauge degenerates at ({theta}, {phi})") });
            }
            return Ok(w / c(n, 0.0));
        }
        let sphere = self.sphere.as_ref().expect("sphere frame built when no section exists");
        let f = sphere.eval(&self.field_fn(), theta, phi)?;
        let psi = self.ray_frame(self.boundary_delta(theta, phi))?;
        Ok(psi.adjoint() * f)
    }

    fn field_fn(&self) -> impl Fn(f64, f64) -> Result<CMat> + Sync + '_ {
        move |th, ph| p_at(self.model, self.n, &self.region.boundary_point(th, ph))
    }

    fn p_ext(&self, k: &KPoint) -> Result<CMat> {
        let d = self.region.delta(k);
        let psi = self.ray_frame(d)?;
        let rho = self.region.gauge(k);
        let h = frames::cutoff_h(rho);
        let v = if h > 0.0 {
            let (th, ph) = self.region.angles(k);
            frames::blend(h, &self.reduced_boundary(th, ph)?, &self.star)
        } else {
            self.star.clone()
        };
        let w = psi * v;
        Ok(&w * w.adjoint())
    }
}

fn raw_projector(s: &Spectrum, n: usize) -> CMat {
    let v = s.eigenvectors.columns(0, n);
    &v * v.adjoint()
}

/// Spectral projector onto the lowest `n` bands at every grid node, without
/// any gap check. Where bands `n` and `n+1` touch, the eigensolver's
/// ordering decides.
pub fn raw_projector_field(model: &ModelSpec, n: usize, grid: [usize; 3]) -> Result<Vec<CMat>> {
    model::grid_points(grid).par_iter().map(|k| Ok(raw_projector(&model::spectrum_at(model, k)?, n))).collect()
}

/// Smooth rank-`(N+1)` projector field on the grid: `P_{N+1}` outside `Ω`,
/// `P_N + p_ext` on `Ω_ε`, and a re-projected convex glue in between.
pub fn build_global_projector(model: &ModelSpec, n: usize, region: &Region, glue: &GlueConfig) -> Result<DisentangledField> {
    if n + 1 > model.dim || (glue.assumption2 && n + 2 > model.dim) {
        return Err(Error::Precondition(format!("band index {n} too large for dimension {}", model.dim)));
    }
    if !(glue.epsilon > 0.0 && glue.epsilon < region.min_axis() / 4.0) {
        return Err(Error::Precondition(format!("epsilon {} must lie in (0, {})", glue.epsilon, region.min_axis() / 4.0)));
    }
    let mut region = region.clone();
    region.margin = glue.epsilon;
    let region = &region;

    let chain = chern_chain(model, n, region)?;
    for (ch, _) in [chain.lower, chain.upper, chain.quasi] {
        if ch != 0 {
            return Err(Error::TopologicalObstruction { chern: ch });
        }
    }

    let pts = model::grid_points(glue.grid);
    let rho_in = region.inner_gauge();
    let tags: Vec<NodeTag> = pts
        .iter()
        .map(|k| {
            let r = region.gauge(k);
            if r >= 1.0 {
                NodeTag::Outside
            } else if r <= rho_in {
                NodeTag::Extended
            } else {
                NodeTag::Glued
            }
        })
        .collect();

    let steps = glue.transport_steps.max(2);
    let center = KPoint::new(region.center[0], region.center[1], region.center[2]);
    let mut ext = Extension {
        model,
        n,
        region,
        assumption2: glue.assumption2,
        steps,
        psi0: CMat::zeros(0, 0),
        section: None,
        sphere: None,
        star: CVec::zeros(0),
    };
    let q0 = ext.q_at(&center)?;
    let rq = q0.trace().re.round() as usize;
    ext.psi0 = linalg::canonical_frame(&q0, rq);
    let mesh = region.mesh()?;
    let (nlat, nlon) = region.mesh_dims;
    let node_angles = |node: usize| {
        let (i, j) = if node == 0 { (0, 0) } else if node == mesh.nodes.len() - 1 { (nlat, 0) } else { ((node - 1) / nlon + 1, (node - 1) % nlon) };
        (PI * i as f64 / nlat as f64, 2.0 * PI * j as f64 / nlon as f64)
    };
    let opts = FrameOptions { seed: glue.seed, ..FrameOptions::default() };
    let lines: Vec<CVec> = (0..mesh.nodes.len())
        .into_par_iter()
        .map(|node| {
            let (th, ph) = node_angles(node);
            Ok(linalg::canonical_frame(&ext.reduced_line(th, ph)?, 1).column(0).into_owned())
        })
        .collect::<Result<_>>()?;
    let (v, overlap) = frames::find_section_vector(&lines, &opts)?;
    if overlap > SECTION_FLOOR {
        ext.star = v.clone();
        ext.section = Some(v);
    } else {
        ext.sphere = Some(SphereLineFrame::new(&|th: f64, ph: f64| p_at(model, n, &region.boundary_point(th, ph)), steps, 256)?);
        let samples: Vec<CVec> = (0..mesh.nodes.len())
            .into_par_iter()
            .map(|node| {
                let (th, ph) = node_angles(node);
                ext.reduced_boundary(th, ph)
            })
            .collect::<Result<_>>()?;
        ext.star = -frames::find_avoided_point(&samples, &opts)?.point;
    }
    let ext = &ext;

    let rank = n + 1;
    let projectors: Vec<CMat> = pts
        .par_iter()
        .zip(tags.par_iter())
        .enumerate()
        .map(|(idx, (k, tag))| -> Result<CMat> {
            let s = model::spectrum_at(model, k)?;
            match tag {
                NodeTag::Outside => Ok(model::spectral_projector(&s, n + 1, GAP_FLOOR, k)?.matrix),
                NodeTag::Extended => {
                    let pn = model::spectral_projector(&s, n, GAP_FLOOR, k)?.matrix;
                    Ok(pn + ext.p_ext(k)?)
                }
                NodeTag::Glued => {
                    let inner = model::spectral_projector(&s, n, GAP_FLOOR, k)?.matrix + ext.p_ext(k)?;
                    let outer = model::spectral_projector(&s, n + 1, GAP_FLOOR, k)?.matrix;
                    let f = frames::smoothstep((region.gauge(k) - rho_in) / (1.0 - rho_in));
                    let g = linalg::hermitize(&(outer * c(f, 0.0) + inner * c(1.0 - f, 0.0)));
                    reproject(&g, rank, glue.accept, glue.reject).map_err(|detail| Error::GlueFailure { node: idx, detail: format!("{detail} at {k}") })
                }
            }
        })
        .collect::<Result<_>>()?;

    Ok(DisentangledField {
        grid: glue.grid,
        band_index: n,
        assumption2: glue.assumption2,
        projectors,
        tags,
        region: Some(region.clone()),
        chern: Some(chain),
    })
}

/// Projector onto the eigenvectors with eigenvalue above 1/2, after checking
/// that exactly `rank` eigenvalues are `≥ accept` and the rest `≤ reject`.
fn reproject(g: &CMat, rank: usize, accept: f64, reject: f64) -> std::result::Result<CMat, String> {
    let (vals, vecs) = linalg::eigh_unchecked(g);
    let m = vals.len();
    let kept = vals.iter().filter(|&&x| x > 0.5).count();
    if kept != rank {
        return Err(format!("{kept} eigenvalues above 1/2, expected {rank}"));
    }
    if vals[m - rank] < accept || (rank < m && vals[m - rank - 1] > reject) {
        return Err(format!("eigenvalues {:?} violate the {accept}/{reject} separation", vals));
    }
    let v = vecs.columns(m - rank, rank);
    Ok(&v * v.adjoint())
}

/// The whole pipeline from crossing detection to the glued field. `K_{N+1}`
/// empty means `P_{N+1}` itself is returned.
pub fn disentangle(model: &ModelSpec, n: usize, glue: &GlueConfig, crossing_grid: [usize; 3]) -> Result<(DisentangledField, Vec<WeylCharge>)> {
    let find = |band: usize| -> Result<CrossingSet> {
        if band == 0 || band >= model.dim {
            return Ok(CrossingSet::empty(band));
        }
        let tol = model::default_crossing_tol(model, band, crossing_grid)?;
        model::detect_crossings(model, band, crossing_grid, tol)
    };
    let found = find(n + 1)?;
    let inner = CrossingSet { points: found.points.iter().filter(|x| x.genuine).cloned().collect(), ..found };
    if inner.points.is_empty() {
        let projectors = model::grid_points(glue.grid)
            .par_iter()
            .map(|k| Ok(model::projector_at(model, k, n + 1)?.matrix))
            .collect::<Result<_>>()?;
        let tags = vec![NodeTag::Outside; wannier::grid_len(glue.grid)];
        let field = DisentangledField { grid: glue.grid, band_index: n, assumption2: glue.assumption2, projectors, tags, region: None, chern: None };
        return Ok((field, Vec::new()));
    }
    let lower = find(n)?;
    let upper = if glue.assumption2 { Some(find(n + 2)?) } else { None };
    let candidates = region_candidates(&inner, &lower, upper.as_ref(), glue.margin.unwrap_or(glue.epsilon))?;
    let mut region = None;
    for r in &candidates {
        if outside_slice_cherns(model, n, r)? == [0; 3] {
            region = Some(r.clone());
            break;
        }
    }
    let region = region.unwrap_or_else(|| candidates[0].clone());
    let radius = charge_radius(&inner);
    let charges = charge_report(model, n, &inner, radius)?;
    Ok((build_global_projector(model, n, &region, glue)?, charges))
}

/// Sphere radius for charge reports: 0.1, shrunk when crossings are close.
pub fn charge_radius(set: &CrossingSet) -> f64 {
    let mut r: f64 = 0.1;
    for (i, a) in set.points.iter().enumerate() {
        for b in &set.points[i + 1..] {
            r = r.min(0.4 * a.k.torus_distance(&b.k));
        }
    }
    r
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub nodes: usize,
    pub rank: usize,
    /// `max ‖P P_N − P_N‖` over nodes with `gap_N > 0.1`.
    pub span_residual: f64,
    /// `‖P P_N − P_N‖` per node, `None` where `gap_N ≤ 0.1`.
    pub span_residuals: Vec<Option<f64>>,
    /// `max ‖(1 − P_{N+2}) P‖` over nodes with `gap_{N+2} > 0.1`.
    pub upper_residual: Option<f64>,
    pub rank_deviation: f64,
    pub idempotency: f64,
    pub hermiticity: f64,
    /// Largest `‖P(k) − P(k')‖` over grid neighbours.
    pub max_increment: f64,
    /// Same for `P_{N+1}` over neighbours where its gap exceeds 0.1.
    pub model_increment: f64,
    pub decay: Option<DecayProfile>,
    pub trs_residual: Option<f64>,
    /// First node failing the rank, idempotency or Hermiticity check.
    pub worst_node: Option<usize>,
}

/// Threshold for projector-property checks in reports.
pub const PROJECTOR_TOL: f64 = 1e-8;

impl FieldReport {
    pub fn projector_ok(&self) -> bool {
        self.rank_deviation < PROJECTOR_TOL && self.idempotency < PROJECTOR_TOL && self.hermiticity < PROJECTOR_TOL
    }
}

fn neighbours(grid: [usize; 3], idx: usize) -> [usize; 3] {
    let l = (idx % grid[2]) as isize;
    let j = ((idx / grid[2]) % grid[1]) as isize;
    let i = (idx / (grid[1] * grid[2])) as isize;
    [model::grid_index(grid, i + 1, j, l), model::grid_index(grid, i, j + 1, l), model::grid_index(grid, i, j, l + 1)]
}

/// Recompute every postcondition of a disentangled field from scratch.
pub fn verify_field(field: &DisentangledField, model: &ModelSpec, n: usize) -> Result<FieldReport> {
    let grid = field.grid;
    let pts = model::grid_points(grid);
    if field.projectors.len() != pts.len() {
        return Err(Error::Verification { node: None, detail: format!("{} projectors for {} grid nodes", field.projectors.len(), pts.len()) });
    }
    let rank = n + 1;
    let m = model.dim;
    struct NodeCheck {
        span: Option<f64>,
        upper: Option<f64>,
        rank_dev: f64,
        idem: f64,
        herm: f64,
        p_upper: CMat,
        gap_upper: f64,
    }
    let checks: Vec<NodeCheck> = pts
        .par_iter()
        .zip(field.projectors.par_iter())
        .map(|(k, p)| -> Result<NodeCheck> {
            let s = model::spectrum_at(model, k)?;
            let gap_n = if n > 0 && n < m { s.gap(n) } else { f64::INFINITY };
            let pn = raw_projector(&s, n);
            let span = (gap_n > 0.1).then(|| linalg::op_norm(&(p * &pn - &pn)));
            let upper = if n + 2 < m && s.gap(n + 2) > 0.1 {
                let p2 = raw_projector(&s, n + 2);
                Some(linalg::op_norm(&((linalg::identity(m) - p2) * p)))
            } else if n + 2 >= m {
                Some(0.0)
            } else {
                None
            };
            Ok(NodeCheck {
                span,
                upper,
                rank_dev: (p.trace().re - rank as f64).abs(),
                idem: linalg::fro(&(p * p - p)),
                herm: linalg::hermiticity_residual(p),
                p_upper: raw_projector(&s, rank),
                gap_upper: if rank < m { s.gap(rank) } else { f64::INFINITY },
            })
        })
        .collect::<Result<_>>()?;

    let mut max_increment = 0.0f64;
    let mut model_increment = 0.0f64;
    for idx in 0..pts.len() {
        for nb in neighbours(grid, idx) {
            max_increment = max_increment.max(linalg::fro(&(&field.projectors[idx] - &field.projectors[nb])));
            if checks[idx].gap_upper > 0.1 && checks[nb].gap_upper > 0.1 {
                model_increment = model_increment.max(linalg::fro(&(&checks[idx].p_upper - &checks[nb].p_upper)));
            }
        }
    }
    let worst_node = checks.iter().position(|c| c.rank_dev >= PROJECTOR_TOL || c.idem >= PROJECTOR_TOL || c.herm >= PROJECTOR_TOL);
    let trs_residual = match &model.trs {
        Some(t) => Some(trs_field_residual(grid, &field.projectors, t)),
        None => None,
    };
    let decay = wannier::field_decay(grid, &field.projectors).ok();
    let span_residuals: Vec<Option<f64>> = checks.iter().map(|c| c.span).collect();
    Ok(FieldReport {
        nodes: pts.len(),
        rank,
        span_residual: span_residuals.iter().flatten().copied().fold(0.0, f64::max),
        span_residuals,
        upper_residual: field.assumption2.then(|| checks.iter().filter_map(|c| c.upper).fold(0.0, f64::max)),
        rank_deviation: checks.iter().map(|c| c.rank_dev).fold(0.0, f64::max),
        idempotency: checks.iter().map(|c| c.idem).fold(0.0, f64::max),
        hermiticity: checks.iter().map(|c| c.herm).fold(0.0, f64::max),
        max_increment,
        model_increment,
        decay,
        trs_residual,
        worst_node,
    })
}

/// `max ‖P(−k) − θ P(k) θ⁻¹‖` over the grid.
pub fn trs_field_residual(grid: [usize; 3], field: &[CMat], trs: &Trs) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..grid[0] as isize {
        for j in 0..grid[1] as isize {
            for l in 0..grid[2] as isize {
                let a = model::grid_index(grid, i, j, l);
                let b = model::grid_index(grid, -i, -j, -l);
                worst = worst.max(linalg::fro(&(&field[b] - trs.conjugate_operator(&field[a]))));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    index: usize,
    k: [f64; 3],
    tag: NodeTag,
    projector: MatrixDoc,
}

#[derive(Serialize, Deserialize)]
struct FieldDoc {
    grid: [usize; 3],
    band_index: usize,
    rank: usize,
    assumption2: bool,
    region: Option<Region>,
    chern: Option<ChernChain>,
    nodes: Vec<NodeDoc>,
}

impl DisentangledField {
    pub fn to_json(&self) -> Result<String> {
        let pts = self.kpoints();
        let doc = FieldDoc {
            grid: self.grid,
            band_index: self.band_index,
            rank: self.rank(),
            assumption2: self.assumption2,
            region: self.region.clone(),
            chern: self.chern.clone(),
            nodes: self
                .projectors
                .iter()
                .enumerate()
                .map(|(i, p)| NodeDoc { index: i, k: pts[i].coords, tag: self.tags[i], projector: MatrixDoc::from_matrix(p) })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FieldDoc = serde_json::from_str(text)?;
        let nk = wannier::grid_len(doc.grid);
        if doc.nodes.len() != nk {
            return Err(Error::Parse(format!("{} nodes for a grid of {nk}", doc.nodes.len())));
        }
        let mut projectors = vec![CMat::zeros(0, 0); nk];
        let mut tags = vec![NodeTag::Outside; nk];
        for node in doc.nodes {
            if node.index >= nk {
                return Err(Error::Parse(format!("node index {} out of range", node.index)));
            }
            projectors[node.index] = node.projector.to_matrix()?;
            tags[node.index] = node.tag;
        }
        Ok(DisentangledField {
            grid: doc.grid,
            band_index: doc.band_index,
            assumption2: doc.assumption2,
            projectors,
            tags,
            region: doc.region,
            chern: doc.chern,
        })
    }
}

#[cfg(test)]
mod tests;
