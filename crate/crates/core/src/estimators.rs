//! Misreporting-rate estimators and the estimands derived from an MR value.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AgentId, Role, TabularDataset};
use crate::learners::{self, CateModel, LearnerSpec, OutcomeModel, Provenance};
use crate::ocsvm::{self, Classification, OcSvmModel, OcSvmParams};
use crate::{Error, Result};

pub const DEFAULT_MIN_ABS_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "DIM")]
    Dim,
    #[serde(rename = "FPR")]
    Fpr,
}

impl Estimand {
    pub fn label(self) -> &'static str {
        match self {
            Estimand::Mr => "MR",
            Estimand::Dim => "DIM",
            Estimand::Fpr => "FPR",
        }
    }
}

impl FromStr for Estimand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mr" => Ok(Estimand::Mr),
            "dim" => Ok(Estimand::Dim),
            "fpr" => Ok(Estimand::Fpr),
            _ => Err(Error::Parameter(format!(
                "unknown estimand `{s}` (expected mr, dim or fpr)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "CMRE", alias = "cmre")]
    Cmre,
    #[serde(rename = "NMRE", alias = "nmre")]
    Nmre,
    #[serde(rename = "NDEE", alias = "ndee")]
    Ndee,
    #[serde(rename = "NDEE_NoC", alias = "ndee-noc")]
    NdeeNoC,
    #[serde(rename = "NDEE_NoS", alias = "ndee-nos")]
    NdeeNoS,
    #[serde(rename = "OCSVM", alias = "ocsvm")]
    Ocsvm,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Cmre,
        EstimatorKind::Nmre,
        EstimatorKind::Ndee,
        EstimatorKind::NdeeNoC,
        EstimatorKind::NdeeNoS,
        EstimatorKind::Ocsvm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Cmre => "CMRE",
            EstimatorKind::Nmre => "NMRE",
            EstimatorKind::Ndee => "NDEE",
            EstimatorKind::NdeeNoC => "NDEE_NoC",
            EstimatorKind::NdeeNoS => "NDEE_NoS",
            EstimatorKind::Ocsvm => "OCSVM",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "cmre" => Ok(EstimatorKind::Cmre),
            "nmre" => Ok(EstimatorKind::Nmre),
            "ndee" => Ok(EstimatorKind::Ndee),
            "ndee-noc" => Ok(EstimatorKind::NdeeNoC),
            "ndee-nos" => Ok(EstimatorKind::NdeeNoS),
            "ocsvm" | "oc-svm" => Ok(EstimatorKind::Ocsvm),
            _ => Err(Error::Parameter(format!(
                "unknown estimator `{s}` (expected cmre, nmre, ndee, ndee-noc, ndee-nos or ocsvm)"
            ))),
        }
    }
}

/// Plug-in averages behind the CMRE ratio for one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginEffects {
    pub tau_prime_hat: f64,
    pub tau_hat: f64,
    pub delta_prime_hat: f64,
    pub n_x1: usize,
    pub n_x0: usize,
}

impl PluginEffects {
    pub fn ratio(&self) -> f64 {
        (self.tau_prime_hat - self.tau_hat) / self.delta_prime_hat
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.tau_prime_hat, self.tau_hat, self.delta_prime_hat]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effects: Option<PluginEffects>,
    /// Agent rows with reported feature 1 / 0 that entered the estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_x1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_x0: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_x1: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub overlap_warning: bool,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrEstimate {
    pub estimand: Estimand,
    pub estimator: EstimatorKind,
    pub value: f64,
    pub agent: AgentId,
    pub diagnostics: Diagnostics,
    pub variance: Option<f64>,
    pub ci: Option<ConfidenceInterval>,
}

impl MrEstimate {
    fn new(estimator: EstimatorKind, agent: AgentId, value: f64, diagnostics: Diagnostics) -> Self {
        MrEstimate {
            estimand: Estimand::Mr,
            estimator,
            value,
            agent,
            diagnostics,
            variance: None,
            ci: None,
        }
    }

    /// Clamp the value and any interval into `[0, 1]`.
    pub fn clipped(mut self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let changed = c(self.value) != self.value
            || self
                .ci
                .is_some_and(|ci| c(ci.lower) != ci.lower || c(ci.upper) != ci.upper);
        self.value = c(self.value);
        if let Some(ci) = self.ci.as_mut() {
            ci.lower = c(ci.lower);
            ci.upper = c(ci.upper);
        }
        self.diagnostics.clipped |= changed;
        self
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (s / n as f64, n)
}

/// `ds` restricted (and reordered) to the covariate columns the model was trained on.
fn aligned<'a>(model: &CateModel, ds: &'a TabularDataset) -> Result<Cow<'a, TabularDataset>> {
    if ds.covariate_names() == model.covariate_names() {
        Ok(Cow::Borrowed(ds))
    } else {
        Ok(Cow::Owned(ds.select_covariates(model.covariate_names())?))
    }
}

/// Per-row ingredients of the plug-in averages for one agent's evaluation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectRows {
    pub feature: Vec<u8>,
    pub theta_ref: Vec<f64>,
    pub theta_agent: Vec<f64>,
}

impl EffectRows {
    pub fn compute(theta_ref: &CateModel, theta_agent: &CateModel, eval: &TabularDataset, a: &AgentId) -> Result<Self> {
        if theta_ref.provenance != Provenance::Reference {
            return Err(Error::Usage(
                "theta_ref must be fitted on the unmanipulated dataset".into(),
            ));
        }
        if theta_agent.provenance != Provenance::PerAgent(a.clone()) {
            return Err(Error::Usage(format!("theta_agent was not fitted on agent `{a}`")));
        }
        if eval.role() != Role::Manipulated {
            return Err(Error::Role(
                "evaluation rows must come from the manipulated dataset".into(),
            ));
        }
        let rows = eval.agent_rows(a)?;
        let ref_view = aligned(theta_ref, eval)?;
        let agent_view = aligned(theta_agent, eval)?;
        Ok(EffectRows {
            feature: rows.iter().map(|&r| eval.feature()[r]).collect(),
            theta_ref: theta_ref.cate_rows(&ref_view, &rows)?,
            theta_agent: theta_agent.cate_rows(&agent_view, &rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    /// Averages over the multiset of positions `idx` into these rows.
    pub fn effects_over(&self, idx: &[usize]) -> Result<PluginEffects> {
        let (mut t1, mut t, mut d0, mut n1, mut n0) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for &i in idx {
            if self.feature[i] == 1 {
                t1 += self.theta_ref[i];
                t += self.theta_agent[i];
                n1 += 1;
            } else {
                d0 += self.theta_ref[i];
                n0 += 1;
            }
        }
        if n1 == 0 {
            return Err(Error::EmptyStratum("no evaluation rows with feature = 1".into()));
        }
        if n0 == 0 {
            return Err(Error::EmptyStratum("no evaluation rows with feature = 0".into()));
        }
        Ok(PluginEffects {
            tau_prime_hat: t1 / n1 as f64,
            tau_hat: t / n1 as f64,
            delta_prime_hat: d0 / n0 as f64,
            n_x1: n1,
            n_x0: n0,
        })
    }

    pub fn effects(&self) -> Result<PluginEffects> {
        self.effects_over(&(0..self.len()).collect::<Vec<_>>())
    }
}

pub fn plugin_effects(
    theta_ref: &CateModel,
    theta_agent: &CateModel,
    eval: &TabularDataset,
    a: &AgentId,
) -> Result<PluginEffects> {
    EffectRows::compute(theta_ref, theta_agent, eval, a)?.effects()
}

pub fn cmre_value(effects: &PluginEffects, min_abs_delta: f64) -> Result<f64> {
    if !(effects.delta_prime_hat.abs() >= min_abs_delta) {
        return Err(Error::NearZeroDenominator {
            value: effects.delta_prime_hat,
            min: min_abs_delta,
        });
    }
    Ok(effects.ratio())
}

pub fn cmre(effects: &PluginEffects, agent: &AgentId, min_abs_delta: f64) -> Result<MrEstimate> {
    let value = cmre_value(effects, min_abs_delta)?;
    Ok(MrEstimate::new(
        EstimatorKind::Cmre,
        agent.clone(),
        value,
        Diagnostics {
            effects: Some(*effects),
            n_x1: Some(effects.n_x1),
            n_x0: Some(effects.n_x0),
            ..Default::default()
        },
    ))
}

fn difference_in_means(ds: &TabularDataset, rows: &[usize], what: &str) -> Result<(f64, usize, usize)> {
    let y = ds.outcome();
    let x = ds.feature();
    let (m1, n1) = mean(rows.iter().filter(|&&r| x[r] == 1).map(|&r| y[r] as f64));
    let (m0, n0) = mean(rows.iter().filter(|&&r| x[r] == 0).map(|&r| y[r] as f64));
    if n1 == 0 || n0 == 0 {
        let s = if n1 == 0 { 1 } else { 0 };
        return Err(Error::EmptyStratum(format!("{what}: no rows with feature = {s}")));
    }
    Ok((m1 - m0, n1, n0))
}

pub fn nmre(d_star: &TabularDataset, d_eval: &TabularDataset, a: &AgentId) -> Result<MrEstimate> {
    let all: Vec<usize> = (0..d_star.n()).collect();
    let (tau_ref, _, _) = difference_in_means(d_star, &all, "reference dataset")?;
    let rows = d_eval.agent_rows(a)?;
    let (tau_a, n1, n0) = difference_in_means(d_eval, &rows, &format!("agent `{a}`"))?;
    if tau_ref == 0.0 {
        return Err(Error::ZeroDenominator(
            "reference difference in means is exactly 0".into(),
        ));
    }
    Ok(MrEstimate::new(
        EstimatorKind::Nmre,
        a.clone(),
        (tau_ref - tau_a) / tau_ref,
        Diagnostics {
            n_x1: Some(n1),
            n_x0: Some(n0),
            ..Default::default()
        },
    ))
}

/// Feature model over `[covariates | one-hot agent]` fitted on the fused data.
#[derive(Clone, Debug, PartialEq)]
pub struct NdeeModel {
    pub model: OutcomeModel,
    covariates: Vec<String>,
    /// One-hot levels; the trusted token is always last.
    levels: Vec<AgentId>,
    variant: EstimatorKind,
}

impl NdeeModel {
    /// Fits on `d` fused with `d_star`; `covariate_subset = None` uses every covariate.
    pub fn fit(
        d: &TabularDataset,
        d_star: &TabularDataset,
        spec: &LearnerSpec,
        covariate_subset: Option<&[String]>,
        seed: u64,
    ) -> Result<Self> {
        if d.is_empty() || d_star.is_empty() {
            return Err(Error::Size(
                "NDEE needs non-empty manipulated and reference data".into(),
            ));
        }
        if d.role() != Role::Manipulated || !d.has_agents() {
            return Err(Error::Role(
                "NDEE needs a manipulated dataset with an agent column".into(),
            ));
        }
        let covariates: Vec<String> = match covariate_subset {
            Some(s) => s.to_vec(),
            None => d.covariate_names().to_vec(),
        };
        let d = d.select_covariates(&covariates)?;
        let d_star = d_star.select_covariates(&covariates)?;
        let mut levels = d.agent_set();
        levels.push(AgentId::trusted());

        let k = covariates.len() + levels.len();
        let n = d.n() + d_star.n();
        let mut x = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for i in 0..d.n() {
            let a = d.agent_at(i).expect("agent column checked above");
            let slot = levels.iter().position(|l| l == a).expect("level from agent_set");
            push_row(&mut x, d.row(i), levels.len(), slot);
            labels.push(d.feature()[i]);
        }
        for i in 0..d_star.n() {
            push_row(&mut x, d_star.row(i), levels.len(), levels.len() - 1);
            labels.push(d_star.feature()[i]);
        }
        let mut columns = covariates.clone();
        columns.extend(levels.iter().map(|l| format!("agent={l}")));
        let model = learners::fit(spec, &x, columns, &labels, seed)?;
        let variant = match covariate_subset {
            None => EstimatorKind::Ndee,
            Some(_) => EstimatorKind::NdeeNoC,
        };
        Ok(NdeeModel {
            model,
            covariates,
            levels,
            variant,
        })
    }

    /// Tag estimates from this model with another estimator label (NoC/NoS variants).
    pub fn with_label(mut self, kind: EstimatorKind) -> Self {
        self.variant = kind;
        self
    }

    /// `(1/π̂_a) * mean over agent-a rows of eval of [f(c, a) − f(c, a*)]`.
    pub fn estimate(&self, eval: &TabularDataset, a: &AgentId) -> Result<MrEstimate> {
        let slot = self
            .levels
            .iter()
            .position(|l| l == a)
            .filter(|&s| s + 1 < self.levels.len())
            .ok_or_else(|| Error::Usage(format!("agent `{a}` was not present when fitting NDEE")))?;
        let trusted = self.levels.len() - 1;
        let eval = eval.select_covariates(&self.covariates)?;
        let rows = eval.agent_rows(a)?;
        if rows.is_empty() {
            return Err(Error::EmptyStratum(format!("no evaluation rows for agent `{a}`")));
        }
        let (pi, _) = mean(rows.iter().map(|&r| eval.feature()[r] as f64));
        if pi == 0.0 {
            return Err(Error::ZeroDenominator(format!("agent `{a}` never reports feature = 1")));
        }
        let mut buf = Vec::with_capacity(self.model.n_features());
        let (effect, _) = mean(rows.iter().map(|&r| {
            buf.clear();
            push_row(&mut buf, eval.row(r), self.levels.len(), slot);
            let own = self.model.predict(&buf);
            buf.clear();
            push_row(&mut buf, eval.row(r), self.levels.len(), trusted);
            own - self.model.predict(&buf)
        }));
        let n1 = rows.iter().filter(|&&r| eval.feature()[r] == 1).count();
        Ok(MrEstimate::new(
            self.variant,
            a.clone(),
            effect / pi,
            Diagnostics {
                n_x1: Some(n1),
                n_x0: Some(rows.len() - n1),
                p_x1: Some(pi),
                ..Default::default()
            },
        ))
    }
}

fn push_row(x: &mut Vec<f64>, c: &[f64], n_levels: usize, slot: usize) {
    x.extend_from_slice(c);
    x.extend((0..n_levels).map(|j| (j == slot) as u8 as f64));
}

pub fn ndee(
    d: &TabularDataset,
    d_star: &TabularDataset,
    a: &AgentId,
    spec: &LearnerSpec,
    covariate_subset: Option<&[String]>,
    seed: u64,
) -> Result<MrEstimate> {
    NdeeModel::fit(d, d_star, spec, covariate_subset, seed)?.estimate(d, a)
}

/// Boundary of `(y, c)` among reference rows with feature = 1.
#[derive(Clone, Debug)]
pub struct OcSvmRate {
    pub model: OcSvmModel,
    covariates: Vec<String>,
}

fn outcome_and_covariates(ds: &TabularDataset, rows: &[usize]) -> Vec<f64> {
    let mut z = Vec::with_capacity(rows.len() * (ds.n_covariates() + 1));
    for &r in rows {
        z.push(ds.outcome()[r] as f64);
        z.extend_from_slice(ds.row(r));
    }
    z
}

fn positive_rows(ds: &TabularDataset, rows: impl IntoIterator<Item = usize>) -> Vec<usize> {
    rows.into_iter().filter(|&r| ds.feature()[r] == 1).collect()
}

impl OcSvmRate {
    pub fn fit(d_star: &TabularDataset, params: &OcSvmParams) -> Result<Self> {
        let rows = positive_rows(d_star, 0..d_star.n());
        if rows.is_empty() {
            return Err(Error::EmptyStratum(
                "reference dataset has no rows with feature = 1".into(),
            ));
        }
        let z = outcome_and_covariates(d_star, &rows);
        Ok(OcSvmRate {
            model: ocsvm::fit_ocsvm(&z, d_star.n_covariates() + 1, params)?,
            covariates: d_star.covariate_names().to_vec(),
        })
    }

    /// Outlier fraction among the given rows of `ds` that have feature = 1.
    pub fn outlier_fraction(&self, ds: &TabularDataset, rows: &[usize]) -> Result<(f64, usize)> {
        let view;
        let ds = if ds.covariate_names() == self.covariates.as_slice() {
            ds
        } else {
            view = ds.select_covariates(&self.covariates)?;
            &view
        };
        let rows = positive_rows(ds, rows.iter().copied());
        if rows.is_empty() {
            return Err(Error::EmptyStratum("no rows with feature = 1 to classify".into()));
        }
        let z = outcome_and_covariates(ds, &rows);
        let dim = self.model.dim;
        let mut outliers = 0usize;
        for p in z.chunks_exact(dim) {
            if self.model.classify(p)? == Classification::Outlier {
                outliers += 1;
            }
        }
        Ok((outliers as f64 / rows.len() as f64, rows.len()))
    }

    pub fn estimate(&self, eval: &TabularDataset, a: &AgentId) -> Result<MrEstimate> {
        let rows = eval.agent_rows(a)?;
        let (value, n1) = self.outlier_fraction(eval, &rows)?;
        Ok(MrEstimate::new(
            EstimatorKind::Ocsvm,
            a.clone(),
            value,
            Diagnostics {
                n_x1: Some(n1),
                ..Default::default()
            },
        ))
    }
}

pub fn ocsvm_rate(
    d_star: &TabularDataset,
    d_eval: &TabularDataset,
    a: &AgentId,
    nu: f64,
    gamma: f64,
) -> Result<MrEstimate> {
    let params = OcSvmParams {
        nu,
        gamma,
        ..Default::default()
    };
    OcSvmRate::fit(d_star, &params)?.estimate(d_eval, a)
}

/// Empirical `P(X = 1)` among the agent's rows.
pub fn agent_positive_rate(ds: &TabularDataset, a: &AgentId) -> Result<f64> {
    let rows = ds.agent_rows(a)?;
    if rows.is_empty() {
        return Err(Error::EmptyStratum(format!("no rows for agent `{a}`")));
    }
    Ok(mean(rows.iter().map(|&r| ds.feature()[r] as f64)).0)
}

fn dim_of(mr: f64, p_x1: f64) -> f64 {
    mr * p_x1
}

fn fpr_of(mr: f64, p_x1: f64) -> Result<f64> {
    let denom = (1.0 - p_x1) + mr * p_x1;
    if denom == 0.0 {
        return Err(Error::ZeroDenominator("P(X* = 0) is 0; FPR undefined".into()));
    }
    Ok(mr * p_x1 / denom)
}

/// Difference in marginals and false-positive rate implied by an MR estimate.
/// Interval endpoints are mapped through the same (monotone) transforms.
pub fn derived_estimands(mr: &MrEstimate, p_x1: f64) -> Result<(MrEstimate, MrEstimate)> {
    if mr.estimand != Estimand::Mr {
        return Err(Error::Usage("derived estimands need an MR estimate".into()));
    }
    if !(0.0..=1.0).contains(&p_x1) {
        return Err(Error::Parameter(format!("p_x1 = {p_x1} is not a probability")));
    }
    let mut dim = mr.clone();
    dim.estimand = Estimand::Dim;
    dim.value = dim_of(mr.value, p_x1);
    dim.variance = mr.variance.map(|v| v * p_x1 * p_x1);
    dim.ci = mr.ci.map(|ci| ConfidenceInterval {
        lower: dim_of(ci.lower, p_x1),
        upper: dim_of(ci.upper, p_x1),
        level: ci.level,
    });
    dim.diagnostics.p_x1 = Some(p_x1);

    let mut fpr = mr.clone();
    fpr.estimand = Estimand::Fpr;
    fpr.value = fpr_of(mr.value, p_x1)?;
    // d fpr / d mr = p (1 - p) / denom^2
    let denom = (1.0 - p_x1) + mr.value * p_x1;
    let slope = p_x1 * (1.0 - p_x1) / (denom * denom);
    fpr.variance = mr.variance.map(|v| v * slope * slope);
    fpr.ci = match mr.ci {
        Some(ci) => Some(ConfidenceInterval {
            lower: fpr_of(ci.lower, p_x1)?,
            upper: fpr_of(ci.upper, p_x1)?,
            level: ci.level,
        }),
        None => None,
    };
    fpr.diagnostics.p_x1 = Some(p_x1);
    Ok((dim, fpr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{fit_s_learner, LearnerKind};
    use crate::seed;
    use crate::simgen::{simulate, Scenario, SimulationSpec};
    use rand::Rng;

    fn constant_cate(provenance: Provenance, effect: f64) -> CateModel {
        // Logistic with zero covariate weights: f(c, x) = sigmoid(b + w x).
        let base = 0.2f64;
        let w = {
            let p1: f64 = base + effect;
            (p1 / (1.0 - p1)).ln() - (base / (1.0 - base)).ln()
        };
        CateModel {
            outcome_model: OutcomeModel {
                columns: vec!["c_a".into(), "x".into()],
                predictor: learners::Predictor::Logistic(learners::logistic::LogisticModel {
                    intercept: (base / (1.0 - base)).ln(),
                    weights: vec![0.0, w],
                    iterations: 0,
                }),
            },
            provenance,
            overlap_warning: false,
        }
    }

    fn four_rows(agent: &str) -> TabularDataset {
        TabularDataset::new(
            Role::Manipulated,
            vec!["c_a".into()],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1, 1, 0, 0],
            vec![1, 0, 1, 0],
        )
        .unwrap()
        .with_agents(vec![AgentId::new(agent); 4])
        .unwrap()
    }

    #[test]
    fn plugin_effects_constant_models() {
        let a = AgentId::new("1");
        let eff = plugin_effects(
            &constant_cate(Provenance::Reference, 0.4),
            &constant_cate(Provenance::PerAgent(a.clone()), 0.3),
            &four_rows("1"),
            &a,
        )
        .unwrap();
        assert!((eff.tau_prime_hat - 0.4).abs() < 1e-12);
        assert!((eff.tau_hat - 0.3).abs() < 1e-12);
        assert!((eff.delta_prime_hat - 0.4).abs() < 1e-12);
        assert_eq!((eff.n_x1, eff.n_x0), (2, 2));
    }

    #[test]
    fn plugin_effects_checks_provenance_and_strata() {
        let a = AgentId::new("1");
        let r = constant_cate(Provenance::Reference, 0.4);
        let wrong = constant_cate(Provenance::PerAgent(AgentId::new("2")), 0.3);
        assert!(matches!(
            plugin_effects(&r, &wrong, &four_rows("1"), &a),
            Err(Error::Usage(_))
        ));
        let ok = constant_cate(Provenance::PerAgent(a.clone()), 0.3);
        let rows = EffectRows::compute(&r, &ok, &four_rows("1"), &a).unwrap();
        assert!(matches!(rows.effects_over(&[2, 3]), Err(Error::EmptyStratum(_))));
        assert!(matches!(rows.effects_over(&[0, 1]), Err(Error::EmptyStratum(_))));
    }

    #[test]
    fn cmre_examples() {
        let a = AgentId::new("1");
        let e = |t1, t, d| PluginEffects {
            tau_prime_hat: t1,
            tau_hat: t,
            delta_prime_hat: d,
            n_x1: 1,
            n_x0: 1,
        };
        assert_eq!(cmre(&e(0.4, 0.4, 0.3), &a, 1e-3).unwrap().value, 0.0);
        assert!((cmre(&e(0.4, 0.0, 0.4), &a, 1e-3).unwrap().value - 1.0).abs() < 1e-15);
        // Unclipped.
        assert!(cmre(&e(0.2, 0.4, 0.4), &a, 1e-3).unwrap().value < 0.0);
        match cmre(&e(0.4, 0.3, 5e-4), &a, 1e-3) {
            Err(Error::NearZeroDenominator { value, .. }) => assert_eq!(value, 5e-4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_is_opt_in() {
        let a = AgentId::new("1");
        let e = PluginEffects {
            tau_prime_hat: 0.2,
            tau_hat: 0.4,
            delta_prime_hat: 0.4,
            n_x1: 1,
            n_x0: 1,
        };
        let est = cmre(&e, &a, 1e-3).unwrap();
        assert_eq!(est.value, -0.5);
        let c = est.clipped();
        assert_eq!(c.value, 0.0);
        assert!(c.diagnostics.clipped);
    }

    #[test]
    fn cmre_same_model_is_zero_on_real_data() {
        let pair = simulate(&SimulationSpec {
            n: 4000,
            ..SimulationSpec::new(Scenario::Sim1)
        })
        .unwrap();
        let a = AgentId::new("1");
        let spec = LearnerSpec {
            gbt: learners::gbt::GbtParams {
                n_rounds: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let theta_a = fit_s_learner(&pair.d.filter_by_agent(&a).unwrap(), &spec, 0).unwrap();
        let mut as_ref = theta_a.clone();
        as_ref.provenance = Provenance::Reference;
        let eff = plugin_effects(&as_ref, &theta_a, &pair.d, &a).unwrap();
        assert_eq!(eff.tau_prime_hat, eff.tau_hat);
        assert_eq!(cmre(&eff, &a, 1e-3).unwrap().value, 0.0);
    }

    fn hand_dataset(role: Role, strata: &[(u8, usize, usize)]) -> TabularDataset {
        // (feature, n rows, n with y = 1)
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for &(f, n, ones) in strata {
            for i in 0..n {
                x.push(f);
                y.push((i < ones) as u8);
            }
        }
        let n = x.len();
        let ds = TabularDataset::new(role, vec!["c_a".into()], vec![0.0; n], x, y).unwrap();
        match role {
            Role::Manipulated => ds.with_agents(vec![AgentId::new("1"); n]).unwrap(),
            Role::Unmanipulated => ds,
        }
    }

    #[test]
    fn nmre_hand_example() {
        let d_star = hand_dataset(Role::Unmanipulated, &[(1, 10, 6), (0, 10, 2)]);
        let d = hand_dataset(Role::Manipulated, &[(1, 10, 5), (0, 10, 2)]);
        let est = nmre(&d_star, &d, &AgentId::new("1")).unwrap();
        assert!((est.value - 0.25).abs() < 1e-12, "{}", est.value);
    }

    #[test]
    fn nmre_errors() {
        let a = AgentId::new("1");
        let flat = hand_dataset(Role::Unmanipulated, &[(1, 10, 5), (0, 10, 5)]);
        let d = hand_dataset(Role::Manipulated, &[(1, 10, 5), (0, 10, 2)]);
        assert!(matches!(nmre(&flat, &d, &a), Err(Error::ZeroDenominator(_))));
        let one_stratum = hand_dataset(Role::Manipulated, &[(1, 10, 5)]);
        let d_star = hand_dataset(Role::Unmanipulated, &[(1, 10, 6), (0, 10, 2)]);
        assert!(matches!(nmre(&d_star, &one_stratum, &a), Err(Error::EmptyStratum(_))));
    }

    #[test]
    fn nmre_null_without_confounding() {
        // Same generator on both sides, no misreporting.
        let gen = |s: u64, role: Role| {
            let mut rng = seed::rng(s);
            let n = 20_000;
            let x: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
            let y: Vec<u8> = x.iter().map(|&x| rng.random_bool(0.2 + 0.3 * x as f64) as u8).collect();
            hand_from(role, x, y)
        };
        let est = nmre(
            &gen(1, Role::Unmanipulated),
            &gen(2, Role::Manipulated),
            &AgentId::new("1"),
        )
        .unwrap();
        assert!(est.value.abs() < 0.06, "{}", est.value);
    }

    fn hand_from(role: Role, x: Vec<u8>, y: Vec<u8>) -> TabularDataset {
        let n = x.len();
        let ds = TabularDataset::new(role, vec!["c_a".into()], vec![0.0; n], x, y).unwrap();
        match role {
            Role::Manipulated => ds.with_agents(vec![AgentId::new("1"); n]).unwrap(),
            Role::Unmanipulated => ds,
        }
    }

    #[test]
    fn ndee_zero_when_agent_has_no_direct_effect() {
        // Everyone reports 1: f is constant in the agent indicator and π̂ = 1.
        let d = hand_from(Role::Manipulated, vec![1; 50], vec![0; 50]);
        let d_star = hand_from(Role::Unmanipulated, vec![1; 50], vec![1; 50]);
        let est = ndee(&d, &d_star, &AgentId::new("1"), &LearnerSpec::default(), None, 0).unwrap();
        assert!(est.value.abs() < 1e-12, "{}", est.value);
        assert_eq!(est.estimator, EstimatorKind::Ndee);
    }

    #[test]
    fn ndee_recovers_pure_misreporting() {
        // Agent reports 1 at 0.5, reference at 0.3: NDE = 0.2, π = 0.5 -> 0.4.
        let d = hand_from(Role::Manipulated, [vec![1; 50], vec![0; 50]].concat(), vec![0; 100]);
        let d_star = hand_from(Role::Unmanipulated, [vec![1; 30], vec![0; 70]].concat(), vec![0; 100]);
        let est = ndee(&d, &d_star, &AgentId::new("1"), &LearnerSpec::logistic(1e-8), None, 0).unwrap();
        assert!((est.value - 0.4).abs() < 1e-4, "{}", est.value);
    }

    #[test]
    fn ndee_errors() {
        let d = hand_from(Role::Manipulated, vec![0; 20], vec![0; 20]);
        let d_star = hand_from(Role::Unmanipulated, [vec![1; 10], vec![0; 10]].concat(), vec![0; 20]);
        let a = AgentId::new("1");
        assert!(matches!(
            ndee(&d, &d_star, &a, &LearnerSpec::default(), None, 0),
            Err(Error::ZeroDenominator(_))
        ));
        let missing = vec!["c_q".to_string()];
        assert!(matches!(
            ndee(&d, &d_star, &a, &LearnerSpec::default(), Some(&missing), 0),
            Err(Error::MissingColumn { .. })
        ));
        let model = NdeeModel::fit(&d, &d_star, &LearnerSpec::mean_only(), None, 0).unwrap();
        assert!(matches!(model.estimate(&d, &AgentId::trusted()), Err(Error::Usage(_))));
    }

    #[test]
    fn ndee_null_with_relabeled_reference() {
        // D* relabeled as an ordinary agent: no generative difference between the groups.
        let mut total = 0.0;
        let seeds = 50;
        for s in 0..seeds {
            let mut rng = seed::rng(seed::derive(77, &[s]));
            let n = 2000;
            let c: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
            let x: Vec<u8> = c.iter().map(|&c| rng.random_bool(0.2 + 0.4 * c) as u8).collect();
            let y = vec![0u8; 2 * n];
            let d = TabularDataset::new(
                Role::Manipulated,
                vec!["c_a".into()],
                c[..n].to_vec(),
                x[..n].to_vec(),
                y[..n].to_vec(),
            )
            .unwrap()
            .with_agents(vec![AgentId::new("2"); n])
            .unwrap();
            let d_star = TabularDataset::new(
                Role::Unmanipulated,
                vec!["c_a".into()],
                c[n..].to_vec(),
                x[n..].to_vec(),
                y[n..].to_vec(),
            )
            .unwrap();
            let spec = LearnerSpec {
                kind: LearnerKind::LogisticRegression,
                ..Default::default()
            };
            total += ndee(&d, &d_star, &AgentId::new("2"), &spec, None, s).unwrap().value;
        }
        let m = total / seeds as f64;
        assert!(m.abs() <= 0.02, "{m}");
    }

    #[test]
    fn ocsvm_rate_on_reference_is_near_nu() {
        let pair = simulate(&SimulationSpec {
            n: 6000,
            ..SimulationSpec::new(Scenario::Sim1)
        })
        .unwrap();
        let rate = OcSvmRate::fit(&pair.d_star, &OcSvmParams::default()).unwrap();
        let all: Vec<usize> = (0..pair.d_star.n()).collect();
        let (v, _) = rate.outlier_fraction(&pair.d_star, &all).unwrap();
        assert!(v <= 0.05, "{v}");
        let est = rate.estimate(&pair.d, &AgentId::new("1")).unwrap();
        assert_eq!(est.estimator, EstimatorKind::Ocsvm);
        assert!((0.0..=1.0).contains(&est.value));
    }

    #[test]
    fn ocsvm_rate_needs_positive_rows() {
        let d_star = hand_from(Role::Unmanipulated, vec![0; 10], vec![0; 10]);
        let d = hand_from(Role::Manipulated, vec![1; 10], vec![0; 10]);
        assert!(matches!(
            ocsvm_rate(&d_star, &d, &AgentId::new("1"), 0.01, 0.1),
            Err(Error::EmptyStratum(_))
        ));
    }

    fn mr_estimate(v: f64) -> MrEstimate {
        MrEstimate::new(EstimatorKind::Cmre, AgentId::new("1"), v, Diagnostics::default())
    }

    #[test]
    fn derived_examples() {
        let (dim, fpr) = derived_estimands(&mr_estimate(0.0), 0.3).unwrap();
        assert_eq!((dim.value, fpr.value), (0.0, 0.0));
        let (dim, fpr) = derived_estimands(&mr_estimate(0.2), 0.5).unwrap();
        assert!((dim.value - 0.1).abs() < 1e-15);
        assert!((fpr.value - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!((dim.estimand, fpr.estimand), (Estimand::Dim, Estimand::Fpr));
        let (dim, fpr) = derived_estimands(&mr_estimate(1.0), 0.5).unwrap();
        assert!((dim.value - 0.5).abs() < 1e-15 && (fpr.value - 0.5).abs() < 1e-15);
        assert!(matches!(
            derived_estimands(&mr_estimate(0.0), 1.0),
            Err(Error::ZeroDenominator(_))
        ));
    }

    #[test]
    fn derived_estimands_match_joint_counts() {
        // Brute force against counts of (X, X*) in a simulated population.
        let pair = simulate(&SimulationSpec {
            n: 50_000,
            ..SimulationSpec::new(Scenario::Sim1)
        })
        .unwrap();
        let x = pair.d.feature();
        let xs = pair.d.true_feature().unwrap();
        let n = x.len() as f64;
        let count = |f: &dyn Fn(usize) -> bool| (0..x.len()).filter(|&i| f(i)).count() as f64;
        let p_x1 = count(&|i| x[i] == 1) / n;
        let mr = count(&|i| x[i] == 1 && xs[i] == 0) / count(&|i| x[i] == 1);
        let dim_direct = p_x1 - count(&|i| xs[i] == 1) / n;
        let fpr_direct = count(&|i| x[i] == 1 && xs[i] == 0) / count(&|i| xs[i] == 0);
        let (dim, fpr) = derived_estimands(&mr_estimate(mr), p_x1).unwrap();
        assert!((dim.value - dim_direct).abs() < 1e-12);
        assert!((fpr.value - fpr_direct).abs() < 1e-12);
    }

    #[test]
    fn parsing_and_serialized_names() {
        for k in EstimatorKind::ALL {
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.label()));
            assert_eq!(k.label().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("ndee-noc".parse::<EstimatorKind>().unwrap(), EstimatorKind::NdeeNoC);
        assert!("foo".parse::<EstimatorKind>().is_err());
        assert_eq!("fpr".parse::<Estimand>().unwrap(), Estimand::Fpr);
    }
}
