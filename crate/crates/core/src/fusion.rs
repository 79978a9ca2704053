//! Early fusion of per-modality content features and the trainable
//! projection into the latent space.
//!
//! Modality rows are L2-normalized before averaging so the fused
//! representation is scale-invariant across modalities; the pre-trained
//! encoders are contrastively trained on cosine similarity, which makes
//! the normalized average the natural combination.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::mat::{norm2, DenseMatrix};

/// Which content sources feed the fused representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Text,
    Image,
    Both,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Text => write!(f, "text"),
            FusionMode::Image => write!(f, "image"),
            FusionMode::Both => write!(f, "both"),
        }
    }
}

fn normalized_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm2(row);
        if n > 0.0 {
            for v in row {
                *v /= n;
            }
        }
    }
    out
}

/// Early-fuses modality features. `Both` averages the two L2-normalized
/// rows; single-modality modes are the L2-normalized pass-through of that
/// matrix. All-zero rows stay zero.
pub fn fuse_modalities(
    text: Option<&FeatureMatrix>,
    image: Option<&FeatureMatrix>,
    mode: FusionMode,
) -> Result<FeatureMatrix> {
    let pick = |fm: Option<&FeatureMatrix>, name: &str| -> Result<&FeatureMatrix> {
        fm.ok_or_else(|| Error::Config(format!("fusion mode requires {name} features")))
    };
    let values = match mode {
        FusionMode::Text => normalized_rows(&pick(text, "text")?.values),
        FusionMode::Image => normalized_rows(&pick(image, "image")?.values),
        FusionMode::Both => {
            let t = pick(text, "text")?;
            let i = pick(image, "image")?;
            if t.rows() != i.rows() || t.cols() != i.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "text is {}x{}, image is {}x{}",
                    t.rows(),
                    t.cols(),
                    i.rows(),
                    i.cols()
                )));
            }
            let tn = normalized_rows(&t.values);
            let im = normalized_rows(&i.values);
            let mut out = DenseMatrix::zeros(tn.rows(), tn.cols());
            for r in 0..out.rows() {
                for ((o, &a), &b) in out.row_mut(r).iter_mut().zip(tn.row(r)).zip(im.row(r)) {
                    *o = 0.5 * (a + b);
                }
            }
            out
        }
    };
    Ok(FeatureMatrix {
        modality: Modality::Fused,
        values,
    })
}

/// Trainable linear layer mapping content features into the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `d_in x d_latent`
    pub weight: DenseMatrix,
    /// length `d_latent`
    pub bias: Vec<f64>,
}

impl ProjectionParams {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_latent(&self) -> usize {
        self.weight.cols()
    }

    /// Seeded uniform init in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, bias zero.
    pub fn init(d_in: usize, d_latent: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_latent)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: DenseMatrix::from_vec(d_in, d_latent, data),
            bias: vec![0.0; d_latent],
        }
    }
}

/// `features * weight + bias`, row-wise bias broadcast.
pub fn project(features: &DenseMatrix, params: &ProjectionParams) -> Result<DenseMatrix> {
    if features.cols() != params.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, projection expects {}",
            features.cols(),
            params.d_in()
        )));
    }
    let mut out = features.matmul(&params.weight);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&params.bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Backward of [`project`]: given `dL/dZ`, accumulates `dL/dweight`,
/// `dL/dbias` and returns nothing else (features are not trainable).
pub fn project_backward(
    features: &DenseMatrix,
    grad_out: &DenseMatrix,
    grad_weight: &mut DenseMatrix,
    grad_bias: &mut [f64],
) {
    let gw = features.transpose_matmul(grad_out);
    for (acc, g) in grad_weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
        *acc += g;
    }
    for r in 0..grad_out.rows() {
        for (b, g) in grad_bias.iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }
}
