//! Semi-synthetic loan-fraud generators.
//!
//! Each scenario draws the agent indicator `A`, optionally a genuinely
//! modified education covariate, the true feature `X*`, the outcome `Y`, and
//! finally the reported feature `X = X* + A (1 - X*) Bernoulli(μ)`, where `μ`
//! is solved per agent from the realized `P(X* = 1 | A)` so that the
//! misreporting rate hits its target. Rows with `A = 0` form the
//! unmanipulated dataset.
//!
//! Every structural equation consumes exactly one uniform draw per row, so a
//! seed pins the whole table regardless of coefficient values.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AgentId, Role, TabularDataset};
use crate::error::{Error, Result};
use crate::seed;

pub const COVARIATE_NAMES: [&str; 4] = ["c_a", "c_e", "c_s", "c_m"];
const C_A: usize = 0;
const C_E: usize = 1;
const C_S: usize = 2;
const C_M: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sim1,
    Sim2,
    Sim3,
    Sim4,
    Sim5,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Sim1,
        Scenario::Sim2,
        Scenario::Sim3,
        Scenario::Sim4,
        Scenario::Sim5,
    ];

    pub fn default_beta_a(self) -> f64 {
        match self {
            Scenario::Sim1 => 0.3,
            _ => 0.1,
        }
    }

    pub fn default_beta_m(self) -> f64 {
        match self {
            Scenario::Sim1 => 0.0,
            _ => 0.2,
        }
    }

    pub fn default_agent_intercept(self) -> f64 {
        0.05
    }

    pub fn has_mediator(self) -> bool {
        self != Scenario::Sim1
    }

    /// Which observed covariates play which causal role, and which columns each
    /// estimator adjusts for.
    pub fn roles(self) -> CovariateRoles {
        let v = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let all = v(&COVARIATE_NAMES);
        match self {
            Scenario::Sim1 => CovariateRoles {
                confounders: all.clone(),
                selection: v(&["c_s", "c_m"]),
                agent_outcome_confounders: vec![],
                modified: vec![],
                cmre: all.clone(),
                ndee: all,
                ndee_no_c: v(&["c_s", "c_m"]),
                ndee_no_s: v(&["c_a", "c_e"]),
            },
            Scenario::Sim2 => CovariateRoles {
                confounders: v(&["c_a", "c_e", "c_s"]),
                selection: v(&["c_m"]),
                agent_outcome_confounders: vec![],
                modified: v(&["c_e"]),
                cmre: v(&["c_a", "c_e", "c_s"]),
                ndee: all,
                ndee_no_c: v(&["c_m"]),
                ndee_no_s: v(&["c_a", "c_e", "c_s"]),
            },
            Scenario::Sim3 => CovariateRoles {
                confounders: v(&["c_a", "c_e", "c_s"]),
                selection: vec![],
                agent_outcome_confounders: v(&["c_m"]),
                modified: v(&["c_e"]),
                cmre: v(&["c_a", "c_e", "c_s"]),
                ndee: all.clone(),
                ndee_no_c: v(&["c_m"]),
                ndee_no_s: all,
            },
            Scenario::Sim4 => CovariateRoles {
                confounders: v(&["c_a", "c_s"]),
                selection: vec![],
                agent_outcome_confounders: v(&["c_m"]),
                modified: v(&["c_e"]),
                cmre: v(&["c_a", "c_s"]),
                ndee: all.clone(),
                ndee_no_c: v(&["c_e", "c_m"]),
                ndee_no_s: all,
            },
            Scenario::Sim5 => CovariateRoles {
                confounders: v(&["c_a", "c_s"]),
                selection: v(&["c_m"]),
                agent_outcome_confounders: vec![],
                modified: v(&["c_e"]),
                cmre: v(&["c_a", "c_s"]),
                ndee: all,
                ndee_no_c: v(&["c_e", "c_m"]),
                ndee_no_s: v(&["c_a", "c_e", "c_s"]),
            },
        }
    }
}

/// Column-role manifest written next to simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateRoles {
    /// Confounders or effect modifiers of `X* -> Y`.
    pub confounders: Vec<String>,
    /// Common causes of `A` and `X*`.
    pub selection: Vec<String>,
    /// Common causes of `A` and `Y`.
    pub agent_outcome_confounders: Vec<String>,
    /// Covariates the agent genuinely modifies.
    pub modified: Vec<String>,
    pub cmre: Vec<String>,
    pub ndee: Vec<String>,
    pub ndee_no_c: Vec<String>,
    pub ndee_no_s: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgeDistribution {
    /// Continuous uniform on [0, 1].
    Uniform,
    /// Uniform over `levels` equally spaced points in [0, 1], like min-max scaled integer ages.
    Grid { levels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateMarginals {
    pub c_e: f64,
    pub c_s: f64,
    pub c_m: f64,
    pub age: AgeDistribution,
}

impl Default for CovariateMarginals {
    fn default() -> Self {
        CovariateMarginals {
            c_e: 0.47,
            c_s: 0.40,
            c_m: 0.53,
            age: AgeDistribution::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSource {
    Synthetic(CovariateMarginals),
    /// CSV with columns `c_a, c_e, c_s, c_m`; every row is used.
    Csv {
        path: PathBuf,
    },
}

impl Default for CovariateSource {
    fn default() -> Self {
        CovariateSource::Synthetic(CovariateMarginals::default())
    }
}

/// Row-major covariate block with columns [`COVARIATE_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix {
    pub data: Vec<f64>,
}

impl CovariateMatrix {
    pub fn n(&self) -> usize {
        self.data.len() / COVARIATE_NAMES.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * 4..(i + 1) * 4]
    }
}

/// Independent draws: `c_a` from the age distribution, Bernoulli `c_e, c_s, c_m`.
pub fn gen_covariates(n: usize, marginals: &CovariateMarginals, seed: u64) -> Result<CovariateMatrix> {
    if n == 0 {
        return Err(Error::Size("cannot generate zero covariate rows".into()));
    }
    for (name, p) in [("c_e", marginals.c_e), ("c_s", marginals.c_s), ("c_m", marginals.c_m)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("marginal for {name} is {p}, outside [0, 1]")));
        }
    }
    if let AgeDistribution::Grid { levels } = marginals.age {
        if levels < 2 {
            return Err(Error::Parameter("age grid needs at least 2 levels".into()));
        }
    }
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let u: f64 = rng.random();
        let age = match marginals.age {
            AgeDistribution::Uniform => u,
            AgeDistribution::Grid { levels } => {
                ((u * levels as f64).floor().min(levels as f64 - 1.0)) / (levels as f64 - 1.0)
            }
        };
        data.push(age);
        for p in [marginals.c_e, marginals.c_s, marginals.c_m] {
            data.push((rng.random::<f64>() < p) as u8 as f64);
        }
    }
    Ok(CovariateMatrix { data })
}

fn load_covariates(path: &PathBuf) -> Result<CovariateMatrix> {
    let csv = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers()?.clone();
    let idx = COVARIATE_NAMES
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::MissingColumn { column: c.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (&j, name) in idx.iter().zip(COVARIATE_NAMES) {
            let v: f64 = rec.get(j).unwrap_or("").trim().parse().map_err(|_| Error::Validation {
                row,
                column: name.into(),
                message: "covariate is missing or not numeric".into(),
            })?;
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Size(format!("{} has no rows", path.display())));
    }
    Ok(CovariateMatrix { data })
}

/// Complete description of one data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "SpecInput")]
pub struct SimulationSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub beta_a: f64,
    pub beta_m: f64,
    pub beta_xstar: f64,
    pub target_mr: f64,
    /// Intercept of the agent equation.
    pub agent_intercept: f64,
    /// Per-agent target rates for multi-agent variants; empty means one agent
    /// `"1"` with `target_mr`.
    pub agent_target_mrs: Vec<f64>,
    pub covariates: CovariateSource,
    pub seed: u64,
}

#[derive(Deserialize)]
struct SpecInput {
    scenario: Scenario,
    n: Option<usize>,
    beta_a: Option<f64>,
    beta_m: Option<f64>,
    beta_xstar: Option<f64>,
    target_mr: Option<f64>,
    agent_intercept: Option<f64>,
    #[serde(default)]
    agent_target_mrs: Vec<f64>,
    #[serde(default)]
    covariates: CovariateSource,
    #[serde(default)]
    seed: u64,
}

impl From<SpecInput> for SimulationSpec {
    fn from(i: SpecInput) -> Self {
        let d = SimulationSpec::new(i.scenario);
        SimulationSpec {
            n: i.n.unwrap_or(d.n),
            beta_a: i.beta_a.unwrap_or(d.beta_a),
            beta_m: i.beta_m.unwrap_or(d.beta_m),
            beta_xstar: i.beta_xstar.unwrap_or(d.beta_xstar),
            target_mr: i.target_mr.unwrap_or(d.target_mr),
            agent_intercept: i.agent_intercept.unwrap_or(d.agent_intercept),
            agent_target_mrs: i.agent_target_mrs,
            covariates: i.covariates,
            seed: i.seed,
            ..d
        }
    }
}

impl SimulationSpec {
    /// Scenario defaults: n = 30,000, β_X* = 0.4, target MR 0.2.
    pub fn new(scenario: Scenario) -> Self {
        SimulationSpec {
            scenario,
            n: 30_000,
            beta_a: scenario.default_beta_a(),
            beta_m: scenario.default_beta_m(),
            beta_xstar: 0.4,
            target_mr: 0.2,
            agent_intercept: scenario.default_agent_intercept(),
            agent_target_mrs: Vec::new(),
            covariates: CovariateSource::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Agents and their target rates.
    pub fn agent_targets(&self) -> Vec<(AgentId, f64)> {
        if self.agent_target_mrs.is_empty() {
            vec![(AgentId::new("1"), self.target_mr)]
        } else {
            self.agent_target_mrs
                .iter()
                .enumerate()
                .map(|(k, &t)| (AgentId::new((k + 1).to_string()), t))
                .collect()
        }
    }

    fn coefficients(&self) -> String {
        format!(
            "{:?}: beta_a={}, beta_m={}, beta_xstar={}, agent_intercept={}",
            self.scenario, self.beta_a, self.beta_m, self.beta_xstar, self.agent_intercept
        )
    }

    fn validate(&self) -> Result<()> {
        for (_, t) in self.agent_targets() {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Parameter(format!("target MR {t} must lie in [0, 1)")));
            }
        }
        if self.scenario.has_mediator() && !(0.0..=1.0).contains(&self.beta_m) {
            return Err(Error::Spec {
                equation: "C'_E",
                coefficients: self.coefficients(),
                probability: self.beta_m,
            });
        }
        Ok(())
    }
}

/// `μ` such that `P(X* = 0 | X = 1) = target_mr` when `P(X* = 1) = p1`.
pub fn mu_for_target_mr(target_mr: f64, p1: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target_mr) {
        return Err(Error::Parameter(format!("target MR {target_mr} must lie in [0, 1)")));
    }
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::Parameter(format!("P(X*=1) = {p1} is not a probability")));
    }
    if target_mr == 0.0 {
        return Ok(0.0);
    }
    if p1 >= 1.0 {
        return Err(Error::Infeasible { target_mr, p1 });
    }
    let mu = target_mr * p1 / ((1.0 - p1) * (1.0 - target_mr));
    if mu > 1.0 {
        return Err(Error::Infeasible { target_mr, p1 });
    }
    Ok(mu)
}

/// Full simulated population before the split by agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub covariates: CovariateMatrix,
    /// 0 for the non-strategic population, `k + 1` for strategic agent `k`.
    pub agent: Vec<u32>,
    pub true_feature: Vec<u8>,
    pub outcome: Vec<u8>,
    pub feature: Vec<u8>,
    pub mu: Vec<f64>,
}

fn check(p: f64, equation: &'static str, spec: &SimulationSpec) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Spec {
            equation,
            coefficients: spec.coefficients(),
            probability: p,
        })
    }
}

fn draw(rng: &mut impl Rng, p: f64) -> u8 {
    (rng.random::<f64>() < p) as u8
}

/// Draw the full population for `spec`.
pub fn simulate_population(spec: &SimulationSpec) -> Result<Population> {
    spec.validate()?;
    let mut covariates = match &spec.covariates {
        CovariateSource::Synthetic(m) => {
            gen_covariates(spec.n, m, seed::derive(spec.seed, &[seed::stream::COVARIATES]))?
        }
        CovariateSource::Csv { path } => load_covariates(path)?,
    };
    let n = covariates.n();
    let targets = spec.agent_targets();
    let n_agents = targets.len() as u32;
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::stream::SIMULATE]));

    let mut agent = vec![0u32; n];
    let mut true_feature = vec![0u8; n];
    let mut outcome = vec![0u8; n];
    let sc = spec.scenario;
    for i in 0..n {
        let c = covariates.row(i);
        let (age, edu, sex, mar) = (c[C_A], c[C_E], c[C_S], c[C_M]);
        let p_a = match sc {
            Scenario::Sim1 => spec.agent_intercept + 0.3 * (1.0 - sex) + 0.3 * (1.0 - mar),
            _ => spec.agent_intercept + 0.4 * (1.0 - mar),
        };
        let a = draw(&mut rng, check(p_a, "A", spec)?);
        let pick: f64 = rng.random();
        if a == 1 {
            agent[i] = 1 + ((pick * n_agents as f64) as u32).min(n_agents - 1);
        }
        let af = a as f64;

        let edu = if sc.has_mediator() {
            let bump = draw(&mut rng, spec.beta_m) as f64;
            edu + (1.0 - edu) * af * bump
        } else {
            edu
        };
        covariates.data[i * 4 + C_E] = edu;

        let age2 = age * age;
        let p_x = match sc {
            Scenario::Sim1 => 0.05 + 0.05 * edu + 0.3 * sex * mar + 0.1 * age2 + spec.beta_a * af,
            Scenario::Sim2 => 0.05 + 0.25 * mar + 0.1 * edu * sex + 0.1 * age2 + spec.beta_a * af,
            Scenario::Sim3 => 0.05 + 0.1 * edu * sex + 0.1 * age2 + spec.beta_a * af,
            Scenario::Sim4 => 0.05 + 0.3 * edu * sex + 0.1 * age2 + spec.beta_a * af,
            Scenario::Sim5 => 0.05 + 0.2 * mar + 0.3 * edu * sex + 0.1 * age2 + spec.beta_a * af,
        };
        let xs = draw(&mut rng, check(p_x, "X*", spec)?);
        let xf = xs as f64;

        let p_y = match sc {
            Scenario::Sim1 => 0.05 + 0.05 * edu + 0.3 * sex * mar + 0.1 * age2 + spec.beta_xstar * xf,
            Scenario::Sim2 => 0.05 + 0.2 * edu * sex + 0.1 * age2 + (spec.beta_xstar + 0.1 * edu) * xf,
            Scenario::Sim3 => 0.05 + 0.2 * mar + 0.1 * edu * sex + 0.05 * age2 + (spec.beta_xstar + 0.1 * edu) * xf,
            Scenario::Sim4 => 0.05 + 0.2 * mar + 0.1 * sex + 0.05 * age2 + spec.beta_xstar * xf,
            Scenario::Sim5 => 0.05 + 0.3 * sex + 0.05 * age2 + spec.beta_xstar * xf,
        };
        true_feature[i] = xs;
        outcome[i] = draw(&mut rng, check(p_y, "Y", spec)?);
    }

    // μ per agent from the realized true-feature rate of that agent.
    let mut ones = vec![0usize; n_agents as usize + 1];
    let mut counts = vec![0usize; n_agents as usize + 1];
    for i in 0..n {
        counts[agent[i] as usize] += 1;
        ones[agent[i] as usize] += true_feature[i] as usize;
    }
    let mu = targets
        .iter()
        .enumerate()
        .map(|(k, (_, target))| {
            let cnt = counts[k + 1];
            if cnt == 0 {
                return if *target == 0.0 {
                    Ok(0.0)
                } else {
                    Err(Error::Size(format!("agent {} received no rows", k + 1)))
                };
            }
            mu_for_target_mr(*target, ones[k + 1] as f64 / cnt as f64)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut feature = vec![0u8; n];
    for i in 0..n {
        let u: f64 = rng.random();
        feature[i] = match agent[i] {
            0 => true_feature[i],
            k => true_feature[i] | (true_feature[i] == 0 && u < mu[k as usize - 1]) as u8,
        };
    }

    Ok(Population {
        covariates,
        agent,
        true_feature,
        outcome,
        feature,
        mu,
    })
}

/// Manipulated/unmanipulated pair drawn from one scenario.
#[derive(Clone, Debug)]
pub struct SimulatedPair {
    pub d: TabularDataset,
    pub d_star: TabularDataset,
    /// Empirical `P(X* = 0 | X = 1)` over all strategic rows.
    pub realized_mr: f64,
    pub realized_mr_by_agent: BTreeMap<AgentId, f64>,
    pub mu_used: BTreeMap<AgentId, f64>,
    pub roles: CovariateRoles,
}

/// Empirical `P(X* = 0 | X = 1)`; NaN when no row reports 1.
pub fn empirical_mr(feature: &[u8], true_feature: &[u8]) -> f64 {
    let (reported, false_pos) = feature
        .iter()
        .zip(true_feature)
        .filter(|(&x, _)| x == 1)
        .fold((0usize, 0usize), |(r, f), (_, &t)| (r + 1, f + (t == 0) as usize));
    if reported == 0 {
        f64::NAN
    } else {
        false_pos as f64 / reported as f64
    }
}

pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedPair> {
    let pop = simulate_population(spec)?;
    let targets = spec.agent_targets();
    let names: Vec<String> = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();

    let (strategic, reference): (Vec<usize>, Vec<usize>) = (0..pop.agent.len()).partition(|&i| pop.agent[i] > 0);
    if strategic.is_empty() || reference.is_empty() {
        return Err(Error::Size(format!(
            "simulation produced {} manipulated and {} unmanipulated rows",
            strategic.len(),
            reference.len()
        )));
    }
    let gather_cov = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| pop.covariates.row(i).iter().copied())
            .collect()
    };
    let pick = |col: &[u8], rows: &[usize]| -> Vec<u8> { rows.iter().map(|&i| col[i]).collect() };

    let d = TabularDataset::new(
        Role::Manipulated,
        names.clone(),
        gather_cov(&strategic),
        pick(&pop.feature, &strategic),
        pick(&pop.outcome, &strategic),
    )?
    .with_agents(
        strategic
            .iter()
            .map(|&i| targets[pop.agent[i] as usize - 1].0.clone())
            .collect(),
    )?
    .with_true_feature(pick(&pop.true_feature, &strategic))?;

    let d_star = TabularDataset::new(
        Role::Unmanipulated,
        names,
        gather_cov(&reference),
        pick(&pop.true_feature, &reference),
        pick(&pop.outcome, &reference),
    )?;

    let truth = d.true_feature().expect("attached above");
    let realized_mr = empirical_mr(d.feature(), truth);
    let mut realized_mr_by_agent = BTreeMap::new();
    for (id, _) in &targets {
        let rows = d.agent_rows(id)?;
        let x: Vec<u8> = rows.iter().map(|&r| d.feature()[r]).collect();
        let t: Vec<u8> = rows.iter().map(|&r| truth[r]).collect();
        realized_mr_by_agent.insert(id.clone(), empirical_mr(&x, &t));
    }
    let mu_used = targets
        .iter()
        .map(|(id, _)| id.clone())
        .zip(pop.mu.iter().copied())
        .collect();

    Ok(SimulatedPair {
        d,
        d_star,
        realized_mr,
        realized_mr_by_agent,
        mu_used,
        roles: spec.scenario.roles(),
    })
}
