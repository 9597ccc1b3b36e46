//! Outcome learners and the S-learner CATE wrapper.
//!
//! An S-learner fits one outcome model `f(c, x)` on covariates with the
//! feature appended as the last column, and reads the conditional effect as
//! `f(c, 1) - f(c, 0)`.

pub mod gbt;
pub mod logistic;

use serde::{Deserialize, Serialize};

use crate::data::{AgentId, Role, TabularDataset};
use crate::error::{Error, Result};

pub use gbt::{GbtModel, GbtParams};
pub use logistic::{LogisticModel, LogisticParams};

/// Probability clamp applied before any loss evaluation.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
}

pub fn logistic_loss(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    GradientBoostedTrees,
    LogisticRegression,
    MeanOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub gbt: GbtParams,
    pub logistic: LogisticParams,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec {
            kind: LearnerKind::GradientBoostedTrees,
            gbt: GbtParams::default(),
            logistic: LogisticParams::default(),
        }
    }
}

impl LearnerSpec {
    pub fn mean_only() -> Self {
        LearnerSpec {
            kind: LearnerKind::MeanOnly,
            ..Default::default()
        }
    }

    pub fn logistic(l2: f64) -> Self {
        LearnerSpec {
            kind: LearnerKind::LogisticRegression,
            logistic: LogisticParams {
                l2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let g = &self.gbt;
        if self.kind == LearnerKind::GradientBoostedTrees
            && (!(g.learning_rate > 0.0) || g.max_depth == 0 || g.l2_lambda < 0.0 || g.min_child_weight < 0.0)
        {
            return Err(Error::Parameter(format!("invalid boosting parameters {g:?}")));
        }
        if self.kind == LearnerKind::LogisticRegression && !(self.logistic.l2 >= 0.0) {
            return Err(Error::Parameter("logistic l2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Gbt(GbtModel),
    Logistic(LogisticModel),
    Mean { probability: f64 },
}

/// Fitted probability model over a fixed column layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub columns: Vec<String>,
    pub predictor: Predictor,
}

impl OutcomeModel {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Probability in `[0, 1]`. `x` must have `n_features()` entries.
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features());
        match &self.predictor {
            Predictor::Gbt(m) => m.predict(x),
            Predictor::Logistic(m) => m.predict(x),
            Predictor::Mean { probability } => *probability,
        }
    }

    pub fn predict_checked(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::Shape {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(self.predict(x))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fit a probability model on row-major `features`.
///
/// `seed` is accepted for interface stability; none of the current learners
/// draws random numbers.
pub fn fit(
    spec: &LearnerSpec,
    features: &[f64],
    columns: Vec<String>,
    labels: &[u8],
    _seed: u64,
) -> Result<OutcomeModel> {
    spec.validate()?;
    let n = labels.len();
    let d = columns.len();
    if n < 2 {
        return Err(Error::Size(format!("need at least 2 rows to fit, got {n}")));
    }
    if features.len() != n * d {
        return Err(Error::Shape {
            expected: n * d,
            got: features.len(),
        });
    }
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            row: i / d.max(1),
            column: columns[i % d].clone(),
            message: "non-finite feature".into(),
        });
    }
    if let Some(row) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Validation {
            row,
            column: "label".into(),
            message: "label is not 0 or 1".into(),
        });
    }
    let predictor = match spec.kind {
        LearnerKind::MeanOnly => Predictor::Mean {
            probability: labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64,
        },
        LearnerKind::GradientBoostedTrees => Predictor::Gbt(gbt::fit(&spec.gbt, features, d, labels)),
        LearnerKind::LogisticRegression => {
            let ones = labels.iter().filter(|&&y| y == 1).count();
            if ones == 0 || ones == n {
                return Err(Error::Validation {
                    row: 0,
                    column: "label".into(),
                    message: "logistic regression needs both label values".into(),
                });
            }
            Predictor::Logistic(logistic::fit(&spec.logistic, features, d, labels))
        }
    };
    Ok(OutcomeModel { columns, predictor })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PerAgent(AgentId),
    Reference,
}

/// Conditional effect function `c -> f(c, 1) - f(c, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub outcome_model: OutcomeModel,
    pub provenance: Provenance,
    /// Set when the training feature column had a single value.
    pub overlap_warning: bool,
}

impl CateModel {
    pub fn covariate_names(&self) -> &[String] {
        let cols = &self.outcome_model.columns;
        &cols[..cols.len() - 1]
    }

    pub fn n_covariates(&self) -> usize {
        self.outcome_model.n_features() - 1
    }

    pub fn cate(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.n_covariates() {
            return Err(Error::Shape {
                expected: self.n_covariates(),
                got: c.len(),
            });
        }
        let mut buf = Vec::with_capacity(c.len() + 1);
        buf.extend_from_slice(c);
        buf.push(1.0);
        Ok(self.effect_in(&mut buf))
    }

    /// `buf` holds the covariates followed by one slot for the feature.
    fn effect_in(&self, buf: &mut [f64]) -> f64 {
        let last = buf.len() - 1;
        buf[last] = 1.0;
        let treated = self.outcome_model.predict(buf);
        buf[last] = 0.0;
        treated - self.outcome_model.predict(buf)
    }

    /// Effects for the given rows of `ds`, whose covariate columns must match the model's.
    pub fn cate_rows(&self, ds: &TabularDataset, rows: &[usize]) -> Result<Vec<f64>> {
        if ds.covariate_names() != self.covariate_names() {
            return Err(Error::Usage(format!(
                "covariate columns {:?} do not match the model's {:?}",
                ds.covariate_names(),
                self.covariate_names()
            )));
        }
        let mut buf = vec![0.0; self.n_covariates() + 1];
        Ok(rows
            .iter()
            .map(|&r| {
                buf[..self.n_covariates()].copy_from_slice(ds.row(r));
                self.effect_in(&mut buf)
            })
            .collect())
    }
}

/// Row-major `[covariates | feature]` design matrix.
pub fn design_with_feature(ds: &TabularDataset) -> (Vec<f64>, Vec<String>) {
    let d = ds.n_covariates();
    let mut x = Vec::with_capacity(ds.n() * (d + 1));
    for i in 0..ds.n() {
        x.extend_from_slice(ds.row(i));
        x.push(ds.feature()[i] as f64);
    }
    let mut columns = ds.covariate_names().to_vec();
    columns.push("x".into());
    (x, columns)
}

/// Fit `f(c, x)` on one population: all of an unmanipulated dataset, or the
/// rows of a single agent in a manipulated dataset.
pub fn fit_s_learner(train: &TabularDataset, spec: &LearnerSpec, seed: u64) -> Result<CateModel> {
    if train.is_empty() {
        return Err(Error::Size("cannot fit an S-learner on an empty dataset".into()));
    }
    let provenance = match train.role() {
        Role::Unmanipulated => Provenance::Reference,
        Role::Manipulated => {
            let agents = train.agent_set();
            match agents.as_slice() {
                [a] => Provenance::PerAgent(a.clone()),
                [] => {
                    return Err(Error::Role(
                        "per-agent fit needs a manipulated dataset with an agent column".into(),
                    ))
                }
                _ => {
                    return Err(Error::Usage(format!(
                        "per-agent fit received {} agents; filter to one agent first",
                        agents.len()
                    )))
                }
            }
        }
    };
    let ones = train.feature().iter().filter(|&&x| x == 1).count();
    let overlap_warning = ones == 0 || ones == train.n();
    if overlap_warning {
        log::warn!("feature is constant in S-learner training data; effects are extrapolated");
    }
    let (x, columns) = design_with_feature(train);
    let outcome_model = fit(spec, &x, columns, train.outcome(), seed)?;
    Ok(CateModel {
        outcome_model,
        provenance,
        overlap_warning,
    })
}
