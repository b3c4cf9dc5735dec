use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dims, default_format, dot, sigmoid, Versioned};
use crate::error::{Error, Result};

/// A differentiable binary classifier trained on mean log-loss.
pub trait GradientModel: Clone + Send + Sync {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    /// Probability of label 1.
    fn predict_proba(&self, x: &[f64]) -> f64;
    /// Regularized mean log-loss over `idx` and its gradient w.r.t. `params()`.
    fn loss_and_grad_on(&self, xs: &[Vec<f64>], ys: &[f64], idx: &[usize]) -> (f64, Vec<f64>);

    fn loss_and_grad(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<f64>) {
        let idx: Vec<usize> = (0..xs.len()).collect();
        self.loss_and_grad_on(xs, ys, &idx)
    }

    /// Unregularized mean log-loss.
    fn log_loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        mean_log_loss(xs.iter().map(|x| self.predict_proba(x)), ys)
    }
}

pub(crate) fn mean_log_loss(probs: impl Iterator<Item = f64>, ys: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let total: f64 = probs
        .zip(ys)
        .map(|(p, y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / ys.len().max(1) as f64
}

/// One pass of shuffled mini-batch gradient descent.
pub fn sgd_epoch<M: GradientModel>(
    model: &mut M,
    xs: &[Vec<f64>],
    ys: &[f64],
    learning_rate: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(rng);
    let mut p = model.params();
    for batch in order.chunks(batch_size.max(1)) {
        let (_, g) = model.loss_and_grad_on(xs, ys, batch);
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= learning_rate * gi;
        }
        model.set_params(&p);
    }
}

/// Per-feature z-scoring fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Result<Self> {
        let d = check_dims(xs)?;
        if xs.is_empty() {
            return Err(Error::InvalidInput("cannot standardize an empty set".into()));
        }
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant features pass through centered but unscaled.
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            epochs: 100,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    #[serde(default = "default_format")]
    pub format: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Penalty `l2/2 |w|^2`; the bias is not penalized.
    pub l2: f64,
}

impl Versioned for LogisticRegression {
    fn format(&self) -> u32 {
        self.format
    }
}

impl LogisticRegression {
    pub fn zeros(dim: usize, l2: f64) -> Self {
        Self {
            format: default_format(),
            weights: vec![0.0; dim],
            bias: 0.0,
            l2,
        }
    }
}

impl GradientModel for LogisticRegression {
    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let d = self.weights.len();
        self.weights.copy_from_slice(&p[..d]);
        self.bias = p[d];
    }

    fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, x) + self.bias)
    }

    fn loss_and_grad_on(&self, xs: &[Vec<f64>], ys: &[f64], idx: &[usize]) -> (f64, Vec<f64>) {
        let d = self.weights.len();
        let mut grad = vec![0.0; d + 1];
        let mut loss = 0.0;
        for &i in idx {
            let z = dot(&self.weights, &xs[i]) + self.bias;
            let y = ys[i];
            // log(1 + e^z) - y z, computed stably.
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            let r = sigmoid(z) - y;
            for (g, x) in grad[..d].iter_mut().zip(&xs[i]) {
                *g += r * x;
            }
            grad[d] += r;
        }
        let m = idx.len().max(1) as f64;
        loss /= m;
        grad.iter_mut().for_each(|g| *g /= m);
        loss += 0.5 * self.l2 * dot(&self.weights, &self.weights);
        for (g, w) in grad[..d].iter_mut().zip(&self.weights) {
            *g += self.l2 * w;
        }
        (loss, grad)
    }
}

pub(crate) fn check_binary(features: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidInput(format!("labels must be 0 or 1, got {bad}")));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Degenerate("training data has a single class".into()));
    }
    check_dims(features)
}

pub fn logreg_train(features: &[Vec<f64>], labels: &[u8], params: &LogRegParams) -> Result<LogisticRegression> {
    let d = check_binary(features, labels)?;
    let ys: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let mut model = LogisticRegression::zeros(d, params.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.epochs {
        sgd_epoch(&mut model, features, &ys, params.learning_rate, params.batch_size, &mut rng);
    }
    Ok(model)
}

pub fn logreg_predict(model: &LogisticRegression, features: &[Vec<f64>]) -> Vec<f64> {
    features.iter().map(|x| model.predict_proba(x)).collect()
}

/// Compares `loss_and_grad` against central differences with step `h`
/// and returns the largest relative error over all parameters.
pub fn finite_difference_error<M: GradientModel>(m: &M, xs: &[Vec<f64>], ys: &[f64], h: f64) -> f64 {
    let (_, analytic) = m.loss_and_grad(xs, ys);
    let p = m.params();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut probe = m.clone();
        let mut q = p.clone();
        q[i] = p[i] + h;
        probe.set_params(&q);
        let up = probe.loss_and_grad(xs, ys).0;
        q[i] = p[i] - h;
        probe.set_params(&q);
        let down = probe.loss_and_grad(xs, ys).0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let c = if y == 1 { 2.0 } else { -2.0 };
            xs.push(vec![
                c + 0.5 * rng.random_range(-1.0..1.0),
                c + 0.5 * rng.random_range(-1.0..1.0),
            ]);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let m = LogisticRegression::zeros(3, 0.1);
        assert_eq!(m.predict_proba(&[5.0, -1.0, 2.0]), 0.5);
        let (xs, ys) = blobs(10, 0);
        let yf: Vec<f64> = ys.iter().map(|&y| f64::from(y)).collect();
        let (loss, _) = m.loss_and_grad(&xs, &yf);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let xs: Vec<Vec<f64>> = (0..16).map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let ys: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mut m = LogisticRegression::zeros(5, 0.05);
            let p: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.set_params(&p);
            assert!(finite_difference_error(&m, &xs, &ys, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (xs, ys) = blobs(100, 1);
        let params = LogRegParams {
            epochs: 200,
            ..Default::default()
        };
        let m = logreg_train(&xs, &ys, &params).unwrap();
        let probs = logreg_predict(&m, &xs);
        let correct = probs.iter().zip(&ys).filter(|(p, y)| u8::from(**p >= 0.5) == **y).count();
        assert_eq!(correct, 100);
    }

    #[test]
    fn deterministic() {
        let (xs, ys) = blobs(50, 2);
        let p = LogRegParams::default();
        assert_eq!(logreg_train(&xs, &ys, &p).unwrap(), logreg_train(&xs, &ys, &p).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            logreg_train(&xs, &[1, 1], &LogRegParams::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(logreg_train(&xs, &[1, 2], &LogRegParams::default()).is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_std() {
        let xs = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]];
        let s = Standardizer::fit(&xs).unwrap();
        let z: Vec<Vec<f64>> = xs.iter().map(|x| s.apply(x)).collect();
        let mean: f64 = z.iter().map(|v| v[0]).sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|v| v[0] * v[0]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|v| v[1] == 0.0));
    }
}
