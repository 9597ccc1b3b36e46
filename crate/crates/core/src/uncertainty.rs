//! Delta-method variance of the CMRE ratio and bootstrap intervals.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{cmre_value, ConfidenceInterval, PluginEffects, DEFAULT_MIN_ABS_DELTA};
use crate::seed;
use crate::{Error, Result};

const PSD_TOLERANCE: f64 = -1e-8;

/// Covariance of `(τ̂′, τ̂, δ̂′)`, expressed per observation (already multiplied by `n`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectCovariance {
    pub matrix: [[f64; 3]; 3],
    pub n: usize,
}

impl EffectCovariance {
    pub fn new(matrix: [[f64; 3]; 3], n: usize) -> Result<Self> {
        for i in 0..3 {
            if matrix[i][i] < 0.0 {
                return Err(Error::Matrix(format!("negative variance on diagonal entry {i}")));
            }
            for j in 0..i {
                if (matrix[i][j] - matrix[j][i]).abs() > 1e-12 {
                    return Err(Error::Matrix(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        if n == 0 {
            return Err(Error::Parameter("covariance sample count must be positive".into()));
        }
        Ok(EffectCovariance { matrix, n })
    }

    pub fn var_tau_prime(&self) -> f64 {
        self.matrix[0][0]
    }
    pub fn var_tau(&self) -> f64 {
        self.matrix[1][1]
    }
    pub fn var_delta_prime(&self) -> f64 {
        self.matrix[2][2]
    }
    pub fn cov_tau_prime_tau(&self) -> f64 {
        self.matrix[0][1]
    }
    pub fn cov_tau_prime_delta_prime(&self) -> f64 {
        self.matrix[0][2]
    }
    pub fn cov_tau_delta_prime(&self) -> f64 {
        self.matrix[1][2]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = Matrix3::from_fn(|i, j| self.matrix[i][j]);
        SymmetricEigen::new(m).eigenvalues.min()
    }
}

/// Gradient of `g(τ′, τ, δ′) = (τ′ − τ)/δ′`.
pub fn ratio_gradient(e: &PluginEffects) -> [f64; 3] {
    let d = e.delta_prime_hat;
    [1.0 / d, -1.0 / d, (e.tau_hat - e.tau_prime_hat) / (d * d)]
}

pub fn delta_variance(effects: &PluginEffects, cov: &EffectCovariance) -> Result<f64> {
    let d = effects.delta_prime_hat;
    if d == 0.0 {
        return Err(Error::ZeroDenominator(
            "δ̂′ is 0; delta-method variance undefined".into(),
        ));
    }
    let min_eig = cov.min_eigenvalue();
    if min_eig < PSD_TOLERANCE {
        return Err(Error::Matrix(format!(
            "effect covariance is not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    let gap = effects.tau_hat - effects.tau_prime_hat;
    let v = (cov.var_tau_prime() + cov.var_tau() - 2.0 * cov.cov_tau_prime_tau()) / (d * d)
        + 2.0 * gap * (cov.cov_tau_prime_delta_prime() - cov.cov_tau_delta_prime()) / (d * d * d)
        + gap * gap * cov.var_delta_prime() / (d * d * d * d);
    Ok(v / cov.n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Resample evaluation rows; fitted models stay fixed.
    #[default]
    #[serde(alias = "eval")]
    EvalOnly,
    /// Resample training rows and reference rows too, refitting per draw.
    #[serde(alias = "refit")]
    FullRefit,
}

impl std::str::FromStr for BootstrapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval" | "eval_only" => Ok(BootstrapMode::EvalOnly),
            "refit" | "full_refit" => Ok(BootstrapMode::FullRefit),
            _ => Err(Error::Parameter(format!(
                "unknown bootstrap mode `{s}` (expected eval or refit)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub mode: BootstrapMode,
    pub min_abs_delta: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 100,
            level: 0.95,
            mode: BootstrapMode::EvalOnly,
            min_abs_delta: DEFAULT_MIN_ABS_DELTA,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Parameter(format!(
                "bootstrap needs B >= 2, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Parameter(format!("CI level {} is not in (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// Row counts the pipeline draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResampleSizes {
    pub eval: usize,
    pub train: usize,
    pub reference: usize,
}

/// One bootstrap draw. In `EvalOnly` mode `train` and `reference` are the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resample {
    pub eval: Vec<usize>,
    pub train: Vec<usize>,
    pub reference: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub ci: ConfidenceInterval,
    pub cov: EffectCovariance,
    /// Successful resampled MR values, in draw order.
    pub values: Vec<f64>,
    pub draws: usize,
}

fn with_replacement(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn draw_resample(sizes: ResampleSizes, mode: BootstrapMode, draw_seed: u64) -> Resample {
    let mut rng = seed::rng(draw_seed);
    let eval = with_replacement(&mut rng, sizes.eval);
    match mode {
        BootstrapMode::EvalOnly => Resample {
            eval,
            train: (0..sizes.train).collect(),
            reference: (0..sizes.reference).collect(),
        },
        BootstrapMode::FullRefit => Resample {
            eval,
            train: with_replacement(&mut rng, sizes.train),
            reference: with_replacement(&mut rng, sizes.reference),
        },
    }
}

/// Percentile at `q` of sorted values with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resample-and-recompute loop around a pipeline that maps a [`Resample`] to
/// plug-in effects. Failing draws are replaced by fresh ones, up to `3B` draws.
pub fn bootstrap<F>(sizes: ResampleSizes, config: &BootstrapConfig, seed: u64, pipeline: F) -> Result<BootstrapResult>
where
    F: Fn(&Resample) -> Result<PluginEffects> + Sync,
{
    config.validate()?;
    if sizes.eval == 0 {
        return Err(Error::Size("bootstrap needs at least one evaluation row".into()));
    }
    let b = config.replicates;
    let max_draws = 3 * b;
    let run = |k: usize| -> Option<PluginEffects> {
        let rs = draw_resample(sizes, config.mode, seed::derive(seed, &[k as u64]));
        let eff = pipeline(&rs).ok()?;
        cmre_value(&eff, config.min_abs_delta).ok().map(|_| eff)
    };

    let mut ok: Vec<PluginEffects> = Vec::with_capacity(b);
    let mut next = 0usize;
    while ok.len() < b && next < max_draws {
        let batch = (b - ok.len()).min(max_draws - next);
        let results: Vec<Option<PluginEffects>> = (next..next + batch).into_par_iter().map(run).collect();
        ok.extend(results.into_iter().flatten());
        next += batch;
    }
    if ok.len() < b {
        return Err(Error::BootstrapDegenerate {
            ok: ok.len(),
            required: b,
            draws: next,
        });
    }

    let values: Vec<f64> = ok.iter().map(PluginEffects::ratio).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.level) / 2.0;
    let ci = ConfidenceInterval {
        lower: percentile(&sorted, alpha),
        upper: percentile(&sorted, 1.0 - alpha),
        level: config.level,
    };
    Ok(BootstrapResult {
        ci,
        cov: sample_covariance(&ok, sizes.eval),
        values,
        draws: next,
    })
}

/// Sample covariance (denominator `m − 1`) of the effect triples, scaled by `n`.
fn sample_covariance(effects: &[PluginEffects], n: usize) -> EffectCovariance {
    let m = effects.len() as f64;
    let mut mu = [0.0; 3];
    for e in effects {
        for (k, v) in e.as_array().into_iter().enumerate() {
            mu[k] += v / m;
        }
    }
    let mut c = [[0.0; 3]; 3];
    for e in effects {
        let v = e.as_array();
        for i in 0..3 {
            for j in 0..=i {
                c[i][j] += (v[i] - mu[i]) * (v[j] - mu[j]);
            }
        }
    }
    for i in 0..3 {
        for j in 0..=i {
            c[i][j] *= n as f64 / (m - 1.0);
            c[j][i] = c[i][j];
        }
    }
    EffectCovariance { matrix: c, n }
}
