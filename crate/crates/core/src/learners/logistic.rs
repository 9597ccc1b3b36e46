//! L2-regularized logistic regression fitted by damped Newton steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{clamp_probability, logistic_loss, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    /// Penalty `l2/2 * |w|^2` on the slopes; the intercept is not penalized.
    pub l2: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            l2: 1.0,
            max_iters: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Penalized objective and its gradient at `params = (intercept, w_1..w_d)`.
pub fn objective(params: &[f64], features: &[f64], n_features: usize, labels: &[u8], l2: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; n_features + 1];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &features[i * n_features..(i + 1) * n_features];
        let z = params[0] + params[1..].iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
        let p = sigmoid(z);
        loss += logistic_loss(clamp_probability(p), y);
        let r = p - y as f64;
        grad[0] += r;
        for (g, v) in grad[1..].iter_mut().zip(row) {
            *g += r * v;
        }
    }
    for (g, w) in grad[1..].iter_mut().zip(&params[1..]) {
        *g += l2 * w;
    }
    loss += 0.5 * l2 * params[1..].iter().map(|w| w * w).sum::<f64>();
    (loss, grad)
}

pub fn fit(params: &LogisticParams, features: &[f64], n_features: usize, labels: &[u8]) -> LogisticModel {
    let p = n_features + 1;
    let n = labels.len();
    let mut theta = vec![0.0; p];
    let mean = labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
    theta[0] = (mean / (1.0 - mean)).ln();

    let (mut loss, mut grad) = objective(&theta, features, n_features, labels, params.l2);
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut hessian = DMatrix::<f64>::zeros(p, p);
        let mut xi = vec![0.0; p];
        xi[0] = 1.0;
        for i in 0..n {
            xi[1..].copy_from_slice(&features[i * n_features..(i + 1) * n_features]);
            let z: f64 = theta.iter().zip(&xi).map(|(a, b)| a * b).sum();
            let s = sigmoid(z);
            let w = (s * (1.0 - s)).max(1e-12);
            for a in 0..p {
                for b in 0..=a {
                    hessian[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hessian[(b, a)] = hessian[(a, b)];
            }
            if a > 0 {
                hessian[(a, a)] += params.l2;
            }
        }
        // Tiny ridge on the intercept keeps the system solvable for constant labels.
        hessian[(0, 0)] += 1e-10;
        let g = DVector::from_column_slice(&grad);
        let Some(step) = hessian.cholesky().map(|c| c.solve(&g)) else {
            break;
        };

        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let (l, gr) = objective(&cand, features, n_features, labels, params.l2);
            if l <= loss {
                let improvement = loss - l;
                theta = cand;
                loss = l;
                grad = gr;
                accepted = true;
                if improvement <= params.tolerance * (1.0 + loss.abs()) {
                    return finish(theta, iterations);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < params.tolerance {
            break;
        }
    }
    finish(theta, iterations)
}

fn finish(theta: Vec<f64>, iterations: usize) -> LogisticModel {
    LogisticModel {
        intercept: theta[0],
        weights: theta[1..].to_vec(),
        iterations,
    }
}
