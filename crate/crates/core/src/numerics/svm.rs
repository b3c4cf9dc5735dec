use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dims, default_format, dot, Versioned};
use crate::error::{Error, Result};

const BATCH: usize = 256;

/// Linear soft-margin classifier. The bias is regularized together with
/// the weights (an implicit constant feature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    #[serde(default = "default_format")]
    pub format: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// The C used for training.
    pub regularization: f64,
}

impl Versioned for SvmModel {
    fn format(&self) -> u32 {
        self.format
    }
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// `1` when the decision value is positive, else `0`.
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.decision(x) > 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SvmFit {
    pub model: SvmModel,
    /// Objective of the averaged iterate after each epoch.
    pub trace: Vec<f64>,
}

/// `lambda/2 (|w|^2 + b^2) + mean hinge` with `lambda = 1/(nC)`.
pub fn hinge_objective(features: &[Vec<f64>], labels: &[f64], c: f64, w: &[f64], b: f64) -> f64 {
    let n = features.len() as f64;
    let lambda = 1.0 / (n * c);
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * lambda * (dot(w, w) + b * b) + hinge / n
}

/// Primal sub-gradient descent with step `1/(lambda t)`, projection onto
/// the ball of radius `1/sqrt(lambda)` and iterate averaging. Labels are
/// `-1` or `+1`. Full-batch when there are at most 256 examples.
pub fn svm_train(features: &[Vec<f64>], labels: &[f64], c: f64, epochs: usize, seed: u64) -> Result<SvmFit> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidInput("SVM needs at least one example".into()));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let d = check_dims(features)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!("C must be positive and finite, got {c}")));
    }
    if epochs == 0 {
        return Err(Error::InvalidInput("epochs must be at least 1".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidInput(format!("SVM labels must be -1 or +1, got {bad}")));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::Degenerate("SVM training data has a single class".into()));
    }
    if features.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite SVM feature".into()));
    }

    let lambda = 1.0 / (n as f64 * c);
    let radius = 1.0 / lambda.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut grad = vec![0.0; d];
    let mut t = 0u64;
    let mut trace = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        if n > BATCH {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(BATCH) {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                let y = labels[i];
                if y * (dot(&w, &features[i]) + b) < 1.0 {
                    for (g, x) in grad.iter_mut().zip(&features[i]) {
                        *g += y * x;
                    }
                    grad_b += y;
                }
            }
            let m = batch.len() as f64;
            let shrink = 1.0 - eta * lambda;
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi = shrink * *wi + eta * g / m;
            }
            b = shrink * b + eta * grad_b / m;
            let norm = (dot(&w, &w) + b * b).sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
                b *= s;
            }
            let a = 1.0 / t as f64;
            for (aw, wi) in avg_w.iter_mut().zip(&w) {
                *aw += a * (wi - *aw);
            }
            avg_b += a * (b - avg_b);
        }
        trace.push(hinge_objective(features, labels, c, &avg_w, avg_b));
    }

    Ok(SvmFit {
        model: SvmModel {
            format: default_format(),
            weights: avg_w,
            bias: avg_b,
            regularization: c,
        },
        trace,
    })
}
