//! ν-one-class SVM with an RBF kernel, solved by pairwise coordinate descent.
//!
//! The dual is `min ½ αᵀKα` subject to `0 ≤ α_i ≤ 1/(ν n)` and `Σ α_i = 1`.
//! Working pairs are chosen by maximal violation for the first index and the
//! second-order gain for the second, as in LIBSVM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Curvature floor for degenerate pairs.
const TAU: f64 = 1e-12;
/// Kernel columns kept in memory at most (in f64 entries).
const KERNEL_CACHE_ENTRIES: usize = 1 << 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcSvmParams {
    pub nu: f64,
    pub gamma: f64,
    /// Maximal KKT violation accepted at convergence.
    pub tol: f64,
    /// Iteration budget in units of `n` pair updates.
    pub max_passes: usize,
}

impl Default for OcSvmParams {
    fn default() -> Self {
        OcSvmParams {
            nu: 0.01,
            gamma: 0.1,
            tol: 1e-6,
            max_passes: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Inlier,
    Outlier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcSvmModel {
    /// Row-major support points (rows with `α > 0`).
    pub support_points: Vec<f64>,
    pub dim: usize,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub n_train: usize,
    pub iterations: usize,
    /// KKT violation at termination.
    pub violation: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl OcSvmModel {
    pub fn n_support(&self) -> usize {
        self.alphas.len()
    }

    pub fn decision(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(self.decision_unchecked(z))
    }

    fn decision_unchecked(&self, z: &[f64]) -> f64 {
        self.support_points
            .chunks_exact(self.dim)
            .zip(&self.alphas)
            .map(|(s, a)| a * rbf(s, z, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    /// Points with `decision < 0` are outliers; the boundary counts as inlier.
    pub fn classify(&self, z: &[f64]) -> Result<Classification> {
        Ok(if self.decision(z)? < 0.0 {
            Classification::Outlier
        } else {
            Classification::Inlier
        })
    }
}

/// On-demand kernel columns with least-recently-used eviction.
struct KernelCache<'a> {
    points: &'a [f64],
    dim: usize,
    gamma: f64,
    columns: Vec<Option<Vec<f64>>>,
    last_used: Vec<u64>,
    clock: u64,
    resident: usize,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(points: &'a [f64], dim: usize, gamma: f64) -> Self {
        let n = points.len() / dim;
        KernelCache {
            points,
            dim,
            gamma,
            columns: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            resident: 0,
            capacity: (KERNEL_CACHE_ENTRIES / n.max(1)).clamp(2, n.max(2)),
        }
    }

    fn n(&self) -> usize {
        self.columns.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn ensure(&mut self, i: usize) {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if self.columns[i].is_some() {
            return;
        }
        if self.resident >= self.capacity {
            let victim = (0..self.n())
                .filter(|&k| self.columns[k].is_some() && k != i)
                .min_by_key(|&k| self.last_used[k]);
            if let Some(v) = victim {
                self.columns[v] = None;
                self.resident -= 1;
            }
        }
        let pi = self.point(i);
        let col = (0..self.n()).map(|k| rbf(pi, self.point(k), self.gamma)).collect();
        self.columns[i] = Some(col);
        self.resident += 1;
    }

    /// Columns `i` and `j`, computing them if needed.
    fn pair(&mut self, i: usize, j: usize) -> (&[f64], &[f64]) {
        self.ensure(i);
        self.ensure(j);
        (
            self.columns[i].as_deref().expect("resident"),
            self.columns[j].as_deref().expect("resident"),
        )
    }
}

/// Fit on row-major `points` with `dim` columns.
pub fn fit_ocsvm(points: &[f64], dim: usize, params: &OcSvmParams) -> Result<OcSvmModel> {
    let OcSvmParams {
        nu,
        gamma,
        tol,
        max_passes,
    } = *params;
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Parameter(format!("nu must lie in (0, 1], got {nu}")));
    }
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape {
            expected: dim.max(1),
            got: points.len(),
        });
    }
    let n = points.len() / dim;
    if n < 2 {
        return Err(Error::Size(format!("one-class SVM needs at least 2 points, got {n}")));
    }
    if nu * (n as f64) < 1.0 {
        log::warn!("nu * n = {} < 1; the outlier bound is vacuous", nu * n as f64);
    }

    let upper = 1.0 / (nu * n as f64);
    let mut alpha = vec![0.0; n];
    let n_full = ((nu * n as f64).floor() as usize).min(n);
    for a in alpha.iter_mut().take(n_full) {
        *a = upper;
    }
    if n_full < n {
        alpha[n_full] = (1.0 - n_full as f64 * upper).max(0.0);
    }

    let mut kernel = KernelCache::new(points, dim, gamma);
    let mut grad = vec![0.0; n];
    for i in (0..n).filter(|&i| alpha[i] > 0.0) {
        kernel.ensure(i);
        let col = kernel.columns[i].as_deref().expect("resident");
        for (g, k) in grad.iter_mut().zip(col) {
            *g += alpha[i] * k;
        }
    }

    let at_upper = |a: f64| a >= upper * (1.0 - 1e-12);
    let at_lower = |a: f64| a <= 0.0;
    let max_iter = max_passes.saturating_mul(n.max(100));
    let mut iterations = 0;
    let violation = loop {
        // i: smallest gradient among coordinates that can grow.
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax2 = f64::NEG_INFINITY;
        for t in 0..n {
            if !at_upper(alpha[t]) && -grad[t] > gmax {
                gmax = -grad[t];
                i = t;
            }
            if !at_lower(alpha[t]) && grad[t] > gmax2 {
                gmax2 = grad[t];
            }
        }
        let violation = gmax + gmax2;
        if i == usize::MAX || violation <= tol {
            break violation.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::Convergence {
                passes: max_passes,
                violation,
            });
        }

        kernel.ensure(i);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        {
            let ki = kernel.columns[i].as_deref().expect("resident");
            for t in 0..n {
                if at_lower(alpha[t]) {
                    continue;
                }
                let b = gmax + grad[t];
                if b > 0.0 {
                    let a = (2.0 - 2.0 * ki[t]).max(TAU);
                    let obj = -(b * b) / a;
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if j == usize::MAX {
            break violation;
        }

        let (ki, kj) = kernel.pair(i, j);
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(TAU);
        let delta = (grad[i] - grad[j]) / quad;
        let sum = alpha[i] + alpha[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut ai = old_i - delta;
        let mut aj = old_j + delta;
        if sum > upper {
            if ai > upper {
                ai = upper;
                aj = sum - upper;
            }
        } else if aj < 0.0 {
            aj = 0.0;
            ai = sum;
        }
        if sum > upper {
            if aj > upper {
                aj = upper;
                ai = sum - upper;
            }
        } else if ai < 0.0 {
            ai = 0.0;
            aj = sum;
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            grad[t] += ki[t] * di + kj[t] * dj;
        }
        iterations += 1;
    };

    // Offset: mean gradient over free coordinates, otherwise the bound midpoint.
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        if at_upper(alpha[t]) {
            lb = lb.max(grad[t]);
        } else if at_lower(alpha[t]) {
            ub = ub.min(grad[t]);
        } else {
            free_sum += grad[t];
            free_n += 1;
        }
    }
    let rho = if free_n > 0 {
        free_sum / free_n as f64
    } else if ub.is_finite() && lb.is_finite() {
        0.5 * (ub + lb)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    };

    let mut support_points = Vec::new();
    let mut alphas = Vec::new();
    for (t, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            support_points.extend_from_slice(&points[t * dim..(t + 1) * dim]);
            alphas.push(a);
        }
    }
    Ok(OcSvmModel {
        support_points,
        dim,
        alphas,
        rho,
        gamma,
        nu,
        n_train: n,
        iterations,
        violation,
    })
}
