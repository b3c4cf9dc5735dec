//! Numerical kernels: multi-restart k-means, symmetric eigensolvers, PCA,
//! a primal linear SVM and gradient-trained logistic/shallow classifiers.

pub mod eigen;
mod kmeans;
pub(crate) mod logreg;
mod metrics;
mod mlp;
mod pca;
mod svm;

pub use kmeans::{kmeans, ClusterModel, KMeansFit, KMeansParams};
pub use logreg::{logreg_predict, logreg_train, finite_difference_error, sgd_epoch, GradientModel, LogRegParams, LogisticRegression, Standardizer};
pub use metrics::adjusted_rand_index;
pub use mlp::ShallowNet;
pub use pca::{pca_fit, pca_fit_with, pca_transform, EigenMethod, PcaModel};
pub use svm::{hinge_objective, svm_train, SvmFit, SvmModel};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

/// Current model serialization format.
pub const MODEL_FORMAT: u32 = 1;

pub(crate) fn default_format() -> u32 {
    MODEL_FORMAT
}

/// Models carrying a `format` field for JSON round-trips.
pub trait Versioned: Serialize + DeserializeOwned {
    fn format(&self) -> u32;

    fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn from_json(s: &str) -> Result<Self> {
        let v: Self = serde_json::from_str(s)?;
        if v.format() != MODEL_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unsupported model format {}, expected {MODEL_FORMAT}",
                v.format()
            )));
        }
        Ok(v)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_dims(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(d)
}
