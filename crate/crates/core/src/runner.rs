//! Replications, parameter sweeps and their CSV/JSON outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AgentId, TabularDataset};
use crate::estimators::{
    self, cmre, derived_estimands, EffectRows, Estimand, EstimatorKind, MrEstimate, NdeeModel, OcSvmRate,
    DEFAULT_MIN_ABS_DELTA,
};
use crate::learners::{fit_s_learner, CateModel, LearnerSpec};
use crate::ocsvm::OcSvmParams;
use crate::seed::{self, stream};
use crate::simgen::{simulate, CovariateRoles, SimulationSpec};
use crate::uncertainty::{self, BootstrapConfig, BootstrapMode, ResampleSizes};
use crate::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.8;

/// Covariate columns each estimator conditions on. `None` means every covariate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCovariates {
    pub cmre: Option<Vec<String>>,
    pub ndee: Option<Vec<String>>,
    pub ndee_no_c: Option<Vec<String>>,
    pub ndee_no_s: Option<Vec<String>>,
}

impl From<&CovariateRoles> for EstimatorCovariates {
    fn from(r: &CovariateRoles) -> Self {
        EstimatorCovariates {
            cmre: Some(r.cmre.clone()),
            ndee: Some(r.ndee.clone()),
            ndee_no_c: Some(r.ndee_no_c.clone()),
            ndee_no_s: Some(r.ndee_no_s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub learner: LearnerSpec,
    pub min_abs_delta: f64,
    pub ocsvm: OcSvmParams,
    /// Bootstrap for CMRE; other estimators report point values only.
    pub bootstrap: Option<BootstrapConfig>,
    pub estimands: Vec<Estimand>,
    pub clip: bool,
    pub train_fraction: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            learner: LearnerSpec::default(),
            min_abs_delta: DEFAULT_MIN_ABS_DELTA,
            ocsvm: OcSvmParams::default(),
            bootstrap: None,
            estimands: vec![Estimand::Mr],
            clip: false,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

/// Result of one (agent, estimator) attempt. Failures keep their message.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateOutcome {
    pub agent: AgentId,
    pub estimator: EstimatorKind,
    pub estimand: Estimand,
    pub result: std::result::Result<MrEstimate, String>,
}

fn fit_seed(seed: u64, path: &[u64]) -> u64 {
    let mut p = vec![stream::FIT];
    p.extend_from_slice(path);
    seed::derive(seed, &p)
}

fn restrict(ds: &TabularDataset, cols: Option<&Vec<String>>) -> Result<TabularDataset> {
    match cols {
        Some(c) => ds.select_covariates(c),
        None => Ok(ds.clone()),
    }
}

struct CmreContext<'a> {
    theta_ref: CateModel,
    d_star: TabularDataset,
    train: &'a TabularDataset,
    eval: &'a TabularDataset,
    options: &'a EstimationOptions,
    seed: u64,
}

impl CmreContext<'_> {
    fn estimate(&self, a: &AgentId, agent_index: u64) -> Result<MrEstimate> {
        let train_a = self
            .train
            .filter_by_agent(a)?
            .select_covariates(self.theta_ref.covariate_names())?;
        let theta_a = fit_s_learner(&train_a, &self.options.learner, fit_seed(self.seed, &[1, agent_index]))?;
        let rows = EffectRows::compute(&self.theta_ref, &theta_a, self.eval, a)?;
        let effects = rows.effects()?;
        let mut est = cmre(&effects, a, self.options.min_abs_delta)?;
        est.diagnostics.overlap_warning = self.theta_ref.overlap_warning || theta_a.overlap_warning;

        let Some(cfg) = self.options.bootstrap else {
            return Ok(est);
        };
        let cfg = BootstrapConfig {
            min_abs_delta: self.options.min_abs_delta,
            ..cfg
        };
        let sizes = ResampleSizes {
            eval: rows.len(),
            train: train_a.n(),
            reference: self.d_star.n(),
        };
        let boot_seed = seed::derive(self.seed, &[stream::BOOTSTRAP, agent_index]);
        let boot = match cfg.mode {
            BootstrapMode::EvalOnly => {
                uncertainty::bootstrap(sizes, &cfg, boot_seed, |rs| rows.effects_over(&rs.eval))?
            }
            BootstrapMode::FullRefit => uncertainty::bootstrap(sizes, &cfg, boot_seed, |rs| {
                let spec = &self.options.learner;
                let r = fit_s_learner(&self.d_star.take(&rs.reference), spec, fit_seed(self.seed, &[0]))?;
                let t = fit_s_learner(&train_a.take(&rs.train), spec, fit_seed(self.seed, &[1, agent_index]))?;
                EffectRows::compute(&r, &t, self.eval, a)?.effects_over(&rs.eval)
            })?,
        };
        est.variance = Some(uncertainty::delta_variance(&effects, &boot.cov)?);
        est.ci = Some(boot.ci);
        Ok(est)
    }
}

/// Split `d` 80/20, fit on the training part (and all of `d_star`), evaluate
/// every requested estimator for every agent on the held-out part.
pub fn estimate_pair(
    d: &TabularDataset,
    d_star: &TabularDataset,
    agents: &[AgentId],
    estimators: &[EstimatorKind],
    covariates: &EstimatorCovariates,
    options: &EstimationOptions,
    seed: u64,
) -> Result<Vec<EstimateOutcome>> {
    let (train, eval) = d.split(options.train_fraction, seed::derive(seed, &[stream::SPLIT]))?;

    // Shared fits, each done once and only if some estimator needs it.
    let cmre_ctx = if estimators.contains(&EstimatorKind::Cmre) {
        let d_star = restrict(d_star, covariates.cmre.as_ref())?;
        Some(
            fit_s_learner(&d_star, &options.learner, fit_seed(seed, &[0])).map(|theta_ref| CmreContext {
                theta_ref,
                d_star,
                train: &train,
                eval: &eval,
                options,
                seed,
            }),
        )
    } else {
        None
    };
    let ndee_fit = |kind: EstimatorKind, cols: Option<&Vec<String>>, idx: u64| -> Result<NdeeModel> {
        if kind != EstimatorKind::Ndee && cols.is_none() {
            return Err(Error::Role(format!("{kind} needs a covariate-role manifest")));
        }
        Ok(NdeeModel::fit(
            &train,
            d_star,
            &options.learner,
            cols.map(|c| c.as_slice()),
            fit_seed(seed, &[2, idx]),
        )?
        .with_label(kind))
    };
    let mut ndee_models = BTreeMap::new();
    for (idx, kind, cols) in [
        (0, EstimatorKind::Ndee, covariates.ndee.as_ref()),
        (1, EstimatorKind::NdeeNoC, covariates.ndee_no_c.as_ref()),
        (2, EstimatorKind::NdeeNoS, covariates.ndee_no_s.as_ref()),
    ] {
        if estimators.contains(&kind) {
            ndee_models.insert(kind, ndee_fit(kind, cols, idx));
        }
    }
    let ocsvm = estimators
        .contains(&EstimatorKind::Ocsvm)
        .then(|| OcSvmRate::fit(d_star, &options.ocsvm));

    let mut out = Vec::new();
    for (ai, a) in agents.iter().enumerate() {
        for &kind in estimators {
            let mr: Result<MrEstimate> = match kind {
                EstimatorKind::Cmre => match cmre_ctx.as_ref().expect("fitted above") {
                    Ok(ctx) => ctx.estimate(a, ai as u64),
                    Err(e) => Err(Error::Usage(format!("reference fit failed: {e}"))),
                },
                EstimatorKind::Nmre => estimators::nmre(d_star, &eval, a),
                EstimatorKind::Ndee | EstimatorKind::NdeeNoC | EstimatorKind::NdeeNoS => match &ndee_models[&kind] {
                    Ok(m) => m.estimate(&eval, a),
                    Err(e) => Err(Error::Usage(format!("{kind} fit failed: {e}"))),
                },
                EstimatorKind::Ocsvm => match ocsvm.as_ref().expect("fitted above") {
                    Ok(m) => m.estimate(&eval, a),
                    Err(e) => Err(Error::Usage(format!("one-class SVM fit failed: {e}"))),
                },
            };
            out.extend(expand_estimands(mr, d, a, kind, options));
        }
    }
    Ok(out)
}

fn expand_estimands(
    mr: Result<MrEstimate>,
    d: &TabularDataset,
    a: &AgentId,
    kind: EstimatorKind,
    options: &EstimationOptions,
) -> Vec<EstimateOutcome> {
    let finish = |e: MrEstimate| if options.clip { e.clipped() } else { e };
    let derived = mr
        .as_ref()
        .ok()
        .map(|m| estimators::agent_positive_rate(d, a).and_then(|p| derived_estimands(m, p)));
    options
        .estimands
        .iter()
        .map(|&estimand| {
            let result = match (&mr, estimand, &derived) {
                (Err(e), _, _) => Err(e.to_string()),
                (Ok(m), Estimand::Mr, _) => Ok(finish(m.clone())),
                (Ok(_), _, Some(Err(e))) => Err(e.to_string()),
                (Ok(_), Estimand::Dim, Some(Ok((dim, _)))) => Ok(finish(dim.clone())),
                (Ok(_), Estimand::Fpr, Some(Ok((_, fpr)))) => Ok(finish(fpr.clone())),
                (Ok(_), _, None) => unreachable!("derived estimands computed for every success"),
            };
            EstimateOutcome {
                agent: a.clone(),
                estimator: kind,
                estimand,
                result,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationOutput {
    pub seed: u64,
    /// Empirical `P(X* = 0 | X = 1)` per agent over all of `d`.
    pub realized_mr: BTreeMap<AgentId, f64>,
    pub outcomes: Vec<EstimateOutcome>,
}

pub fn run_replication(
    spec: &SimulationSpec,
    estimators: &[EstimatorKind],
    options: &EstimationOptions,
    seed: u64,
) -> Result<ReplicationOutput> {
    let spec = SimulationSpec {
        seed: seed::derive(seed, &[stream::SIMULATE]),
        ..spec.clone()
    };
    let pair = simulate(&spec)?;
    let agents = pair.d.agent_set();
    let outcomes = estimate_pair(
        &pair.d,
        &pair.d_star,
        &agents,
        estimators,
        &EstimatorCovariates::from(&pair.roles),
        options,
        seed,
    )?;
    Ok(ReplicationOutput {
        seed,
        realized_mr: pair.realized_mr_by_agent,
        outcomes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParameter {
    BetaA,
    BetaXstar,
    TargetMr,
}

impl SweptParameter {
    pub fn apply(self, base: &SimulationSpec, value: f64) -> SimulationSpec {
        let mut s = base.clone();
        match self {
            SweptParameter::BetaA => s.beta_a = value,
            SweptParameter::BetaXstar => s.beta_xstar = value,
            SweptParameter::TargetMr => s.target_mr = value,
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub parameter: SweptParameter,
    pub values: Vec<f64>,
}

fn default_replications() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: SimulationSpec,
    pub sweep: SweepAxis,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub learner: LearnerSpec,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.values.is_empty() {
            return Err(Error::Parameter("sweep values must be non-empty".into()));
        }
        if self.replications == 0 {
            return Err(Error::Parameter("replications must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Parameter("at least one estimator is required".into()));
        }
        if let Some(b) = &self.bootstrap {
            b.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SweepSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn options(&self) -> EstimationOptions {
        EstimationOptions {
            learner: self.learner.clone(),
            bootstrap: self.bootstrap,
            ..Default::default()
        }
    }

    pub fn cell_seed(&self, value_index: usize, rep_index: usize) -> u64 {
        seed::derive(self.base.seed, &[value_index as u64, rep_index as u64])
    }
}

/// One row of `replications.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub value_index: usize,
    pub rep_index: usize,
    pub param_value: f64,
    pub seed: u64,
    pub agent: String,
    pub estimator: EstimatorKind,
    pub value: Option<f64>,
    pub true_mr: Option<f64>,
    pub variance: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub error: Option<String>,
}

/// One row of `aggregate.csv`. `mean`/`std` are NaN when every replication failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub param_value: f64,
    pub estimator: EstimatorKind,
    pub mean: f64,
    pub std: f64,
    pub n_ok: usize,
    pub n_fail: usize,
    pub true_mr: f64,
    pub agent: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub records: Vec<ReplicationRecord>,
    pub aggregate: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn row(&self, param_value: f64, estimator: EstimatorKind, agent: &str) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|r| r.param_value == param_value && r.estimator == estimator && r.agent == agent)
    }
}

/// Mean and population standard deviation (ddof 0).
pub fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn records_for(sweep: &SweepSpec, vi: usize, ri: usize, output: Result<ReplicationOutput>) -> Vec<ReplicationRecord> {
    let param_value = sweep.sweep.values[vi];
    let seed = sweep.cell_seed(vi, ri);
    let blank = |agent: String, estimator, true_mr, error| ReplicationRecord {
        value_index: vi,
        rep_index: ri,
        param_value,
        seed,
        agent,
        estimator,
        value: None,
        true_mr,
        variance: None,
        ci_lower: None,
        ci_upper: None,
        error: Some(error),
    };
    match output {
        Err(e) => {
            // Whole replication failed before estimation: one failure per estimator.
            log::warn!("replication (value {vi}, rep {ri}) failed: {e}");
            let agents = sweep.base.agent_targets();
            agents
                .iter()
                .flat_map(|(a, _)| {
                    sweep
                        .estimators
                        .iter()
                        .map(|&k| blank(a.to_string(), k, None, e.to_string()))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        Ok(out) => out
            .outcomes
            .into_iter()
            .filter(|o| o.estimand == Estimand::Mr)
            .map(|o| {
                let true_mr = out.realized_mr.get(&o.agent).copied();
                match o.result {
                    Ok(m) => ReplicationRecord {
                        value: Some(m.value),
                        variance: m.variance,
                        ci_lower: m.ci.map(|c| c.lower),
                        ci_upper: m.ci.map(|c| c.upper),
                        error: None,
                        ..blank(o.agent.to_string(), o.estimator, true_mr, String::new())
                    },
                    Err(msg) => blank(o.agent.to_string(), o.estimator, true_mr, msg),
                }
            })
            .collect(),
    }
}

/// Aggregate records into one row per (value, estimator, agent).
pub fn aggregate(sweep: &SweepSpec, records: &[ReplicationRecord]) -> Vec<AggregateRow> {
    let mut agents: Vec<String> = Vec::new();
    for r in records {
        if !agents.contains(&r.agent) {
            agents.push(r.agent.clone());
        }
    }
    let mut rows = Vec::new();
    for (vi, &param_value) in sweep.sweep.values.iter().enumerate() {
        for &estimator in &sweep.estimators {
            for agent in &agents {
                let cell: Vec<&ReplicationRecord> = records
                    .iter()
                    .filter(|r| r.value_index == vi && r.estimator == estimator && &r.agent == agent)
                    .collect();
                let ok: Vec<f64> = cell.iter().filter_map(|r| r.value).collect();
                let truths: Vec<f64> = cell
                    .iter()
                    .filter_map(|r| r.true_mr)
                    .filter(|t| t.is_finite())
                    .collect();
                let (mean, std) = if ok.is_empty() {
                    log::warn!("every replication failed for {estimator} at {param_value} (agent {agent})");
                    (f64::NAN, f64::NAN)
                } else {
                    moments(&ok)
                };
                rows.push(AggregateRow {
                    param_value,
                    estimator,
                    mean,
                    std,
                    n_ok: ok.len(),
                    n_fail: sweep.replications - ok.len(),
                    true_mr: if truths.is_empty() {
                        f64::NAN
                    } else {
                        moments(&truths).0
                    },
                    agent: agent.clone(),
                });
            }
        }
    }
    rows
}

pub fn run_sweep(sweep: &SweepSpec, parallelism: usize) -> Result<SweepResult> {
    sweep.validate()?;
    let options = sweep.options();
    let cells: Vec<(usize, usize)> = (0..sweep.sweep.values.len())
        .flat_map(|v| (0..sweep.replications).map(move |r| (v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))?;
    let per_cell: Vec<Vec<ReplicationRecord>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(vi, ri)| {
                let spec = sweep.sweep.parameter.apply(&sweep.base, sweep.sweep.values[vi]);
                let out = run_replication(&spec, &sweep.estimators, &options, sweep.cell_seed(vi, ri));
                records_for(sweep, vi, ri, out)
            })
            .collect()
    });
    // `collect` on an indexed parallel iterator keeps (value, rep) order.
    let records: Vec<ReplicationRecord> = per_cell.into_iter().flatten().collect();
    let aggregate = aggregate(sweep, &records);
    Ok(SweepResult { records, aggregate })
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a SweepSpec,
    seeds: Vec<CellSeed>,
}

#[derive(Serialize)]
struct CellSeed {
    value_index: usize,
    rep_index: usize,
    seed: u64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `aggregate.csv`, `replications.csv` and `manifest.json` into `dir`.
pub fn write_sweep_outputs(sweep: &SweepSpec, result: &SweepResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("aggregate.csv"), &result.aggregate)?;
    write_csv(&dir.join("replications.csv"), &result.records)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: sweep,
        seeds: (0..sweep.sweep.values.len())
            .flat_map(|v| (0..sweep.replications).map(move |r| (v, r)))
            .map(|(value_index, rep_index)| CellSeed {
                value_index,
                rep_index,
                seed: sweep.cell_seed(value_index, rep_index),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// One row of the per-agent estimates file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentEstimateRow {
    pub agent: String,
    pub estimator: EstimatorKind,
    pub estimand: Estimand,
    pub value: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub variance: Option<f64>,
    pub error: Option<String>,
}

impl From<&EstimateOutcome> for AgentEstimateRow {
    fn from(o: &EstimateOutcome) -> Self {
        let ok = o.result.as_ref().ok();
        AgentEstimateRow {
            agent: o.agent.as_str().to_string(),
            estimator: o.estimator,
            estimand: o.estimand,
            value: ok.map(|m| m.value),
            ci_lower: ok.and_then(|m| m.ci).map(|c| c.lower),
            ci_upper: ok.and_then(|m| m.ci).map(|c| c.upper),
            variance: ok.and_then(|m| m.variance),
            error: o.result.as_ref().err().cloned(),
        }
    }
}

/// Per-agent estimates as CSV: agent, estimator, estimand, value, ci_lower, ci_upper, variance, error.
pub fn write_agent_estimates(outcomes: &[EstimateOutcome], path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<AgentEstimateRow> = outcomes.iter().map(AgentEstimateRow::from).collect();
    write_csv(path.as_ref(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::Scenario;

    fn small_spec() -> SimulationSpec {
        SimulationSpec {
            n: 3000,
            ..SimulationSpec::new(Scenario::Sim1)
        }
    }

    fn fast_options() -> EstimationOptions {
        let mut o = EstimationOptions::default();
        o.learner.gbt.n_rounds = 20;
        o
    }

    #[test]
    fn all_six_estimators_share_one_draw() {
        let out = run_replication(&small_spec(), &EstimatorKind::ALL, &fast_options(), 3).unwrap();
        assert_eq!(out.outcomes.len(), 6);
        for (o, k) in out.outcomes.iter().zip(EstimatorKind::ALL) {
            assert_eq!(o.estimator, k);
            let m = o.result.as_ref().unwrap();
            assert!(m.value.is_finite(), "{k}: {m:?}");
        }
        assert!(out.realized_mr.contains_key(&AgentId::new("1")));
    }

    #[test]
    fn replication_is_deterministic() {
        let a = run_replication(&small_spec(), &[EstimatorKind::Cmre], &fast_options(), 11).unwrap();
        let b = run_replication(&small_spec(), &[EstimatorKind::Cmre], &fast_options(), 11).unwrap();
        assert_eq!(a, b);
        let c = run_replication(&small_spec(), &[EstimatorKind::Cmre], &fast_options(), 12).unwrap();
        assert_ne!(a.outcomes, c.outcomes);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let options = EstimationOptions {
            min_abs_delta: 10.0,
            ..fast_options()
        };
        let out = run_replication(&small_spec(), &[EstimatorKind::Cmre, EstimatorKind::Nmre], &options, 1).unwrap();
        assert!(out.outcomes[0].result.as_ref().unwrap_err().contains("denominator"));
        assert!(out.outcomes[1].result.is_ok());
    }

    #[test]
    fn derived_estimands_and_bootstrap_attach() {
        let options = EstimationOptions {
            estimands: vec![Estimand::Mr, Estimand::Dim, Estimand::Fpr],
            bootstrap: Some(BootstrapConfig {
                replicates: 20,
                ..Default::default()
            }),
            ..fast_options()
        };
        let out = run_replication(&small_spec(), &[EstimatorKind::Cmre], &options, 2).unwrap();
        let v: Vec<&MrEstimate> = out.outcomes.iter().map(|o| o.result.as_ref().unwrap()).collect();
        assert_eq!(
            v.iter().map(|m| m.estimand).collect::<Vec<_>>(),
            [Estimand::Mr, Estimand::Dim, Estimand::Fpr]
        );
        let p = v[0].diagnostics.effects.unwrap();
        assert!(v[0].ci.is_some() && v[0].variance.unwrap() > 0.0);
        assert!(v[1].value < v[0].value || v[0].value <= 0.0);
        assert!(p.n_x1 > 0);
    }

    #[test]
    fn refit_bootstrap_runs() {
        let options = EstimationOptions {
            bootstrap: Some(BootstrapConfig {
                replicates: 4,
                mode: BootstrapMode::FullRefit,
                ..Default::default()
            }),
            ..fast_options()
        };
        let out = run_replication(&small_spec(), &[EstimatorKind::Cmre], &options, 2).unwrap();
        let m = out.outcomes[0].result.as_ref().unwrap();
        let ci = m.ci.unwrap();
        assert!(ci.lower <= ci.upper);
    }

    fn tiny_sweep(replications: usize) -> SweepSpec {
        SweepSpec {
            base: SimulationSpec {
                n: 1500,
                ..SimulationSpec::new(Scenario::Sim1)
            },
            sweep: SweepAxis {
                parameter: SweptParameter::BetaA,
                values: vec![0.0, 0.3],
            },
            replications,
            estimators: vec![EstimatorKind::Cmre, EstimatorKind::Nmre],
            bootstrap: None,
            learner: fast_options().learner,
        }
    }

    #[test]
    fn sweep_shape_and_single_replication_std() {
        let s = tiny_sweep(1);
        let r = run_sweep(&s, 1).unwrap();
        assert_eq!(r.aggregate.len(), 4);
        for row in &r.aggregate {
            assert_eq!(row.n_ok + row.n_fail, 1);
            if row.n_ok == 1 {
                assert_eq!(row.std, 0.0);
            }
        }
    }

    #[test]
    fn sweep_is_independent_of_parallelism() {
        let s = tiny_sweep(3);
        let a = run_sweep(&s, 1).unwrap();
        let b = run_sweep(&s, 4).unwrap();
        assert_eq!(a.records, b.records);
        for (x, y) in a.aggregate.iter().zip(&b.aggregate) {
            assert_eq!(x.mean.to_bits(), y.mean.to_bits());
            assert_eq!(x.std.to_bits(), y.std.to_bits());
        }
    }

    #[test]
    fn degenerate_cell_is_marked() {
        let mut s = tiny_sweep(2);
        s.base.n = 2; // too small to split-and-fit
        let r = run_sweep(&s, 1).unwrap();
        for row in &r.aggregate {
            assert_eq!((row.n_ok, row.n_fail), (0, 2));
            assert!(row.mean.is_nan());
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let text = r#"{"base": {"scenario": "sim1", "n": 500},
            "sweep": {"parameter": "beta_xstar", "values": [0.1, 0.5]},
            "estimators": ["CMRE", "OCSVM"]}"#;
        let s = SweepSpec::from_json(text).unwrap();
        assert_eq!(s.replications, 100);
        assert_eq!(s.base.beta_a, 0.3);
        assert_eq!(s.sweep.parameter, SweptParameter::BetaXstar);
        let empty =
            r#"{"base": {"scenario": "sim1"}, "sweep": {"parameter": "beta_a", "values": []}, "estimators": ["CMRE"]}"#;
        assert!(matches!(SweepSpec::from_json(empty), Err(Error::Parameter(_))));
    }

    #[test]
    fn moments_population_std() {
        let (m, s) = moments(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn agent_estimates_csv_keeps_failures() {
        let ok = MrEstimate {
            estimand: Estimand::Mr,
            estimator: EstimatorKind::Cmre,
            value: 0.2,
            agent: AgentId::new("7"),
            diagnostics: Default::default(),
            variance: Some(0.01),
            ci: Some(crate::estimators::ConfidenceInterval {
                lower: 0.1,
                upper: 0.3,
                level: 0.95,
            }),
        };
        let outcomes = vec![
            EstimateOutcome {
                agent: AgentId::new("7"),
                estimator: EstimatorKind::Cmre,
                estimand: Estimand::Mr,
                result: Ok(ok),
            },
            EstimateOutcome {
                agent: AgentId::new("8"),
                estimator: EstimatorKind::Nmre,
                estimand: Estimand::Fpr,
                result: Err("no rows".into()),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agents.csv");
        write_agent_estimates(&outcomes, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "agent,estimator,estimand,value,ci_lower,ci_upper,variance,error"
        );
        assert_eq!(lines[1], "7,CMRE,MR,0.2,0.1,0.3,0.01,");
        assert_eq!(lines[2], "8,NMRE,FPR,,,,,no rows");
    }
}
