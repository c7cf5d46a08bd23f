//! JSON interchange helpers for complex matrices and model files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CMat};
use crate::model::{Builtin, Hopping, ModelSpec, Trs};

/// Row-major real and imaginary parts of a complex matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub re: Vec<Vec<f64>>,
    #[serde(default)]
    pub im: Vec<Vec<f64>>,
}

impl MatrixDoc {
    pub fn from_matrix(m: &CMat) -> Self {
        MatrixDoc {
            re: (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].re).collect()).collect(),
            im: (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].im).collect()).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<CMat> {
        matrix_from_parts(&self.re, &self.im)
    }
}

pub fn matrix_from_parts(re: &[Vec<f64>], im: &[Vec<f64>]) -> Result<CMat> {
    let n = re.len();
    let m = re.first().map_or(0, |r| r.len());
    if re.iter().any(|r| r.len() != m) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    if !im.is_empty() && (im.len() != n || im.iter().any(|r| r.len() != m)) {
        return Err(Error::Parse("imaginary part shape differs from real part".into()));
    }
    Ok(CMat::from_fn(n, m, |i, j| c(re[i][j], if im.is_empty() { 0.0 } else { im[i][j] })))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoppingDoc {
    #[serde(rename = "R")]
    pub r: [i64; 3],
    pub matrix_re: Vec<Vec<f64>>,
    #[serde(default)]
    pub matrix_im: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrsDoc {
    pub theta_re: Vec<Vec<f64>>,
    #[serde(default)]
    pub theta_im: Vec<Vec<f64>>,
}

/// On-disk model description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    pub name: String,
    pub dim: usize,
    pub kind: String,
    #[serde(default)]
    pub params: Option<Builtin>,
    #[serde(default)]
    pub hoppings: Vec<HoppingDoc>,
    #[serde(default)]
    pub trs: Option<TrsDoc>,
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    model_from_doc(&doc)
}

pub fn model_from_doc(doc: &ModelDoc) -> Result<ModelSpec> {
    let trs = match &doc.trs {
        Some(t) => {
            if t.theta_im.iter().flatten().any(|&x| x != 0.0) {
                return Err(Error::ModelDefinition("theta must be real".into()));
            }
            Some(Trs::new(matrix_from_parts(&t.theta_re, &[])?)?)
        }
        None => None,
    };
    match doc.kind.as_str() {
        "builtin" => {
            let b = match &doc.params {
                Some(b) => b.clone(),
                None => match ModelSpec::by_name(&doc.name)?.evaluator {
                    crate::model::Evaluator::Builtin(b) => b,
                    _ => unreachable!(),
                },
            };
            let mut m = ModelSpec::builtin(b);
            if m.dim != doc.dim {
                return Err(Error::ModelDefinition(format!("builtin model has dim {}, file says {}", m.dim, doc.dim)));
            }
            m.name = doc.name.clone();
            if trs.is_some() {
                m.trs = trs;
            }
            Ok(m)
        }
        "fourier" => {
            let hops = doc
                .hoppings
                .iter()
                .map(|h| Ok(Hopping { r: h.r, matrix: matrix_from_parts(&h.matrix_re, &h.matrix_im)? }))
                .collect::<Result<Vec<_>>>()?;
            ModelSpec::fourier(&doc.name, doc.dim, hops, trs)
        }
        other => Err(Error::ModelDefinition(format!("unknown model kind `{other}`"))),
    }
}

pub fn model_to_doc(model: &ModelSpec) -> Result<ModelDoc> {
    let trs = model.trs.as_ref().map(|t| {
        let d = MatrixDoc::from_matrix(t.theta());
        TrsDoc { theta_re: d.re, theta_im: Vec::new() }
    });
    match &model.evaluator {
        crate::model::Evaluator::Builtin(b) => Ok(ModelDoc {
            name: model.name.clone(),
            dim: model.dim,
            kind: "builtin".into(),
            params: Some(b.clone()),
            hoppings: Vec::new(),
            trs,
        }),
        crate::model::Evaluator::Fourier(h) => Ok(ModelDoc {
            name: model.name.clone(),
            dim: model.dim,
            kind: "fourier".into(),
            params: None,
            hoppings: h
                .iter()
                .map(|t| {
                    let d = MatrixDoc::from_matrix(&t.matrix);
                    HoppingDoc { r: t.r, matrix_re: d.re, matrix_im: d.im }
                })
                .collect(),
            trs,
        }),
        crate::model::Evaluator::Custom(_) => Err(Error::ModelDefinition("custom evaluators cannot be serialized".into())),
    }
}
