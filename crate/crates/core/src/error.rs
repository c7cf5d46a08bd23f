use thiserror::Error;

use crate::model::KPoint;

/// Everything that can go wrong in the library.
///
/// Variants are grouped by the failure class the CLI maps onto exit codes:
/// topological obstructions, region/geometry failures, numerical tolerance
/// failures and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model definition error: {0}")]
    ModelDefinition(String),

    #[error("eigensolver did not converge (residual {residual:.3e})")]
    Eigensolver { residual: f64 },

    #[error("degenerate spectral cut at band {band}: gap {gap:.3e} below floor at k = {k}")]
    DegenerateCut { band: usize, gap: f64, k: KPoint },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("transport breakdown: Gram matrix smallest eigenvalue {min_eig:.3e} below floor (step too large)")]
    TransportBreakdown { min_eig: f64 },

    #[error("mesh too coarse: overlap determinant modulus {modulus:.3e}")]
    MeshTooCoarse { modulus: f64 },

    #[error("refine mesh: plaquette {quad} flux {flux:.4} exceeds resolution guard")]
    RefineMesh { quad: usize, flux: f64 },

    #[error("refine loop: step {step} argument {arg:.4} exceeds resolution guard")]
    RefineLoop { step: usize, arg: f64 },

    #[error("inconsistent field: residual {residual:.3e} of raw flux from nearest integer")]
    InconsistentField { residual: f64 },

    #[error("topological obstruction: Chern number {chern}")]
    TopologicalObstruction { chern: i64 },

    #[error("loop contraction failed: {0}")]
    ContractionFailure(String),

    #[error("smoothing width too large: Gram smallest eigenvalue {min_eig:.3e}")]
    DeltaTooLarge { min_eig: f64 },

    #[error("no avoided point after {trials} trials (best distance {best:.3e})")]
    AvoidanceFailure { trials: usize, best: f64 },

    #[error("time-reversal symmetry violated: residual {residual:.3e}")]
    Symmetry { residual: f64 },

    #[error("region construction failed: {0}")]
    RegionConstruction(String),

    #[error("region invalid: {0}")]
    RegionInvalid(String),

    #[error("glue failure at node {node}: {detail}")]
    GlueFailure { node: usize, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("verification failed{}: {detail}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Verification { node: Option<usize>, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(format!("line {} column {}: {}", e.line(), e.column(), e))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
