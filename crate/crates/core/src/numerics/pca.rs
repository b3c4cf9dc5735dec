use serde::{Deserialize, Serialize};

use super::eigen::{jacobi, tridiagonal_ql};
use super::{check_dims, default_format, Versioned};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMethod {
    /// Householder tridiagonalization with implicit QL.
    #[default]
    Tridiagonal,
    /// Cyclic Jacobi rotations.
    Jacobi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    #[serde(default = "default_format")]
    pub format: u32,
    pub mean: Vec<f64>,
    /// Orthonormal rows, one per retained component.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, descending.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// Set when the data has no variance at all.
    pub degenerate: bool,
}

impl Versioned for PcaModel {
    fn format(&self) -> u32 {
        self.format
    }
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        pca_transform(self, x)
    }

    /// Maps reduced coordinates back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (zi, row) in z.iter().zip(&self.components) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += zi * r;
            }
        }
        out
    }
}

pub fn pca_fit(points: &[Vec<f64>], out_dim: usize) -> Result<PcaModel> {
    pca_fit_with(points, out_dim, EigenMethod::default())
}

/// Sample covariance (divisor n - 1), upper triangle mirrored.
fn covariance(points: &[Vec<f64>], mean: &[f64]) -> Vec<Vec<f64>> {
    let d = mean.len();
    let n = points.len();
    let mut cov = vec![vec![0.0; d]; d];
    let mut centered = vec![0.0; d];
    for p in points {
        for ((c, x), m) in centered.iter_mut().zip(p).zip(mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i][i..];
            for (r, cj) in row.iter_mut().zip(&centered[i..]) {
                *r += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i][j] / denom;
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    cov
}

pub fn pca_fit_with(points: &[Vec<f64>], out_dim: usize, method: EigenMethod) -> Result<PcaModel> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = check_dims(points)?;
    if d == 0 {
        return Err(Error::InvalidInput("PCA on zero-dimensional points".into()));
    }
    if out_dim == 0 || out_dim > d.min(n - 1) {
        return Err(Error::InvalidInput(format!(
            "out_dim {out_dim} must be in 1..={} for {n} points of dimension {d}",
            d.min(n - 1)
        )));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in PCA input".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let cov = covariance(points, &mean);
    let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();
    if total_variance == 0.0 {
        log::warn!("PCA input has zero variance; components are the standard basis");
        let components = (0..out_dim)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        return Ok(PcaModel {
            format: default_format(),
            mean,
            components,
            explained_variance: vec![0.0; out_dim],
            total_variance,
            degenerate: true,
        });
    }
    let eig = match method {
        EigenMethod::Tridiagonal => tridiagonal_ql(&cov)?,
        EigenMethod::Jacobi => jacobi(&cov)?,
    };
    let mut components: Vec<Vec<f64>> = eig.vectors.into_iter().take(out_dim).collect();
    for row in &mut components {
        let pivot = row
            .iter()
            .copied()
            .reduce(|a, b| if b.abs() > a.abs() { b } else { a })
            .unwrap_or(0.0);
        if pivot < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
    }
    // Round-off can leave tiny negative eigenvalues on rank-deficient data.
    let explained_variance = eig.values.into_iter().take(out_dim).map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        format: default_format(),
        mean,
        components,
        explained_variance,
        total_variance,
        degenerate: false,
    })
}

pub fn pca_transform(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: model.mean.len(),
            got: x.len(),
        });
    }
    let centered: Vec<f64> = x.iter().zip(&model.mean).map(|(a, m)| a - m).collect();
    Ok(model
        .components
        .iter()
        .map(|row| row.iter().zip(&centered).map(|(r, c)| r * c).sum())
        .collect())
}
