use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logreg::GradientModel;
use super::{default_format, dot, sigmoid, Versioned};

/// One tanh hidden layer feeding a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowNet {
    #[serde(default = "default_format")]
    pub format: u32,
    pub input_dim: usize,
    /// `hidden x input_dim`.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Penalty `l2/2` on both weight matrices; biases are free.
    pub l2: f64,
}

impl Versioned for ShallowNet {
    fn format(&self) -> u32 {
        self.format
    }
}

impl ShallowNet {
    /// Glorot-uniform hidden weights, zero output layer, so an untrained
    /// net predicts 0.5.
    pub fn new(input_dim: usize, hidden: usize, l2: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (input_dim + hidden) as f64).sqrt();
        let w1 = (0..hidden)
            .map(|_| (0..input_dim).map(|_| rng.random_range(-limit..=limit)).collect())
            .collect();
        Self {
            format: default_format(),
            input_dim,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            l2,
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1.iter().zip(&self.b1).map(|(row, b)| (dot(row, x) + b).tanh()).collect()
    }
}

impl GradientModel for ShallowNet {
    fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w1.iter().flatten().copied().collect();
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.push(self.b2);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let d = self.input_dim;
        let h = self.b1.len();
        for (j, row) in self.w1.iter_mut().enumerate() {
            row.copy_from_slice(&p[j * d..(j + 1) * d]);
        }
        let off = h * d;
        self.b1.copy_from_slice(&p[off..off + h]);
        self.w2.copy_from_slice(&p[off + h..off + 2 * h]);
        self.b2 = p[off + 2 * h];
    }

    fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.w2, &self.hidden(x)) + self.b2)
    }

    fn loss_and_grad_on(&self, xs: &[Vec<f64>], ys: &[f64], idx: &[usize]) -> (f64, Vec<f64>) {
        let d = self.input_dim;
        let h = self.b1.len();
        let off = h * d;
        let mut grad = vec![0.0; off + 2 * h + 1];
        let mut loss = 0.0;
        for &i in idx {
            let x = &xs[i];
            let a = self.hidden(x);
            let z = dot(&self.w2, &a) + self.b2;
            let y = ys[i];
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            let r = sigmoid(z) - y;
            for j in 0..h {
                grad[off + h + j] += r * a[j];
                let delta = r * self.w2[j] * (1.0 - a[j] * a[j]);
                grad[off + j] += delta;
                for (g, xv) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += delta * xv;
                }
            }
            grad[off + 2 * h] += r;
        }
        let m = idx.len().max(1) as f64;
        loss /= m;
        grad.iter_mut().for_each(|g| *g /= m);
        let mut sq = 0.0;
        for (j, row) in self.w1.iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                sq += w * w;
                grad[j * d + k] += self.l2 * w;
            }
        }
        for (j, w) in self.w2.iter().enumerate() {
            sq += w * w;
            grad[off + h + j] += self.l2 * w;
        }
        (loss + 0.5 * self.l2 * sq, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::logreg::{finite_difference_error, sgd_epoch};
    use rand_distr::StandardNormal;

    #[test]
    fn untrained_predicts_one_half() {
        let net = ShallowNet::new(4, 8, 0.0, 1);
        assert_eq!(net.predict_proba(&[1.0, -2.0, 0.5, 3.0]), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in 0..10 {
            let xs: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let ys: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mut net = ShallowNet::new(3, 4, 0.01, s);
            let p: Vec<f64> = net.params().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            net.set_params(&p);
            assert!(finite_difference_error(&net, &xs, &ys, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn learns_xor() {
        let xs = vec![vec![-1.0, -1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![1.0, 1.0]];
        let ys = vec![0.0, 1.0, 1.0, 0.0];
        let mut net = ShallowNet::new(2, 8, 0.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3000 {
            sgd_epoch(&mut net, &xs, &ys, 0.5, 4, &mut rng);
        }
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(net.predict_proba(x) >= 0.5, *y == 1.0);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut net = ShallowNet::new(3, 2, 0.0, 4);
        let p: Vec<f64> = (0..net.params().len()).map(|i| i as f64).collect();
        net.set_params(&p);
        assert_eq!(net.params(), p);
    }
}
