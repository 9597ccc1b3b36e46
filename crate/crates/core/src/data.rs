//! Dataset model, CSV ingestion and row-level partitioning.
//!
//! A [`TabularDataset`] holds the covariates `C`, the binary feature (reported
//! `X` for manipulated data, true `X*` for unmanipulated data), the binary
//! outcome `Y`, and for manipulated data the agent column `A`. Simulated
//! manipulated data may also carry the true feature for oracle checks.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Covariate magnitude past which the loader warns about missing normalization.
const COVARIATE_WARN_BOUND: f64 = 10.0;

/// Opaque agent identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    /// Token reserved for the trustworthy agent that generated the
    /// unmanipulated data when the two datasets are fused.
    pub const TRUSTED_TOKEN: &'static str = "__trusted__";

    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn trusted() -> Self {
        AgentId(Self::TRUSTED_TOKEN.to_owned())
    }

    pub fn is_trusted(&self) -> bool {
        self.0 == Self::TRUSTED_TOKEN
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Manipulated,
    Unmanipulated,
}

/// Agent column stored as codes into a level table.
#[derive(Clone, Debug, PartialEq)]
struct AgentColumn {
    levels: Vec<AgentId>,
    codes: Vec<u32>,
}

impl AgentColumn {
    fn from_ids(ids: Vec<AgentId>) -> Self {
        let mut index: BTreeMap<AgentId, u32> = BTreeMap::new();
        let mut levels = Vec::new();
        let codes = ids
            .into_iter()
            .map(|id| {
                *index.entry(id.clone()).or_insert_with(|| {
                    levels.push(id);
                    (levels.len() - 1) as u32
                })
            })
            .collect();
        AgentColumn { levels, codes }
    }

    fn take(&self, rows: &[usize]) -> Self {
        AgentColumn {
            levels: self.levels.clone(),
            codes: rows.iter().map(|&r| self.codes[r]).collect(),
        }
    }
}

/// Immutable columnar table consumed by every estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    role: Role,
    covariate_names: Vec<String>,
    /// Row-major `n × d`.
    covariates: Vec<f64>,
    feature: Vec<u8>,
    outcome: Vec<u8>,
    agent: Option<AgentColumn>,
    true_feature: Option<Vec<u8>>,
}

fn check_binary(values: &[u8], column: &str) -> Result<()> {
    match values.iter().position(|&v| v > 1) {
        Some(row) => Err(Error::Validation {
            row,
            column: column.to_owned(),
            message: format!("value {} is not 0 or 1", values[row]),
        }),
        None => Ok(()),
    }
}

impl TabularDataset {
    /// Build a dataset from row-major covariates. Requires `n >= 1`.
    pub fn new(
        role: Role,
        covariate_names: Vec<String>,
        covariates: Vec<f64>,
        feature: Vec<u8>,
        outcome: Vec<u8>,
    ) -> Result<Self> {
        let n = feature.len();
        if n == 0 {
            return Err(Error::Size("dataset must have at least one row".into()));
        }
        if outcome.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: outcome.len(),
            });
        }
        if covariates.len() != n * covariate_names.len() {
            return Err(Error::Shape {
                expected: n * covariate_names.len(),
                got: covariates.len(),
            });
        }
        check_binary(&feature, "feature")?;
        check_binary(&outcome, "outcome")?;
        let d = covariate_names.len();
        if let Some(i) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row: i / d.max(1),
                column: covariate_names[i % d].clone(),
                message: "non-finite covariate".into(),
            });
        }
        Ok(TabularDataset {
            role,
            covariate_names,
            covariates,
            feature,
            outcome,
            agent: None,
            true_feature: None,
        })
    }

    pub fn with_agents(mut self, agents: Vec<AgentId>) -> Result<Self> {
        if self.role == Role::Unmanipulated {
            return Err(Error::Role(
                "unmanipulated datasets cannot carry an agent column".into(),
            ));
        }
        if agents.len() != self.n() {
            return Err(Error::Shape {
                expected: self.n(),
                got: agents.len(),
            });
        }
        if let Some(row) = agents.iter().position(AgentId::is_trusted) {
            return Err(Error::Validation {
                row,
                column: "agent".into(),
                message: format!(
                    "reserved token `{}` is not allowed in manipulated data",
                    AgentId::TRUSTED_TOKEN
                ),
            });
        }
        self.agent = Some(AgentColumn::from_ids(agents));
        Ok(self)
    }

    /// Attach the true feature. Rows must satisfy `true_feature = 1 => feature = 1`.
    pub fn with_true_feature(mut self, true_feature: Vec<u8>) -> Result<Self> {
        if true_feature.len() != self.n() {
            return Err(Error::Shape {
                expected: self.n(),
                got: true_feature.len(),
            });
        }
        check_binary(&true_feature, "true_feature")?;
        if let Some(row) = true_feature
            .iter()
            .zip(&self.feature)
            .position(|(&t, &x)| t == 1 && x == 0)
        {
            return Err(Error::Validation {
                row,
                column: "true_feature".into(),
                message: "true feature is 1 but reported feature is 0".into(),
            });
        }
        self.true_feature = Some(true_feature);
        Ok(self)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_covariates();
        &self.covariates[i * d..(i + 1) * d]
    }

    pub fn feature(&self) -> &[u8] {
        &self.feature
    }

    pub fn outcome(&self) -> &[u8] {
        &self.outcome
    }

    pub fn true_feature(&self) -> Option<&[u8]> {
        self.true_feature.as_deref()
    }

    pub fn has_agents(&self) -> bool {
        self.agent.is_some()
    }

    pub fn agent_at(&self, i: usize) -> Option<&AgentId> {
        self.agent.as_ref().map(|col| &col.levels[col.codes[i] as usize])
    }

    /// Distinct agents present in the rows, sorted.
    pub fn agent_set(&self) -> Vec<AgentId> {
        let Some(col) = &self.agent else {
            return Vec::new();
        };
        let mut seen = vec![false; col.levels.len()];
        for &c in &col.codes {
            seen[c as usize] = true;
        }
        let mut out: Vec<AgentId> = col
            .levels
            .iter()
            .zip(seen)
            .filter_map(|(l, s)| s.then(|| l.clone()))
            .collect();
        out.sort();
        out
    }

    /// Row indices belonging to agent `a`. Errors if there is no agent column.
    pub fn agent_rows(&self, a: &AgentId) -> Result<Vec<usize>> {
        let col = self
            .agent
            .as_ref()
            .ok_or_else(|| Error::Role("dataset has no agent column".into()))?;
        let Some(code) = col.levels.iter().position(|l| l == a) else {
            return Ok(Vec::new());
        };
        Ok(col
            .codes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c as usize == code).then_some(i))
            .collect())
    }

    /// New dataset made of the given rows (repeats allowed, may be empty).
    pub fn take(&self, rows: &[usize]) -> TabularDataset {
        let d = self.n_covariates();
        let mut covariates = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            covariates.extend_from_slice(self.row(r));
        }
        TabularDataset {
            role: self.role,
            covariate_names: self.covariate_names.clone(),
            covariates,
            feature: rows.iter().map(|&r| self.feature[r]).collect(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
            agent: self.agent.as_ref().map(|c| c.take(rows)),
            true_feature: self.true_feature.as_ref().map(|t| rows.iter().map(|&r| t[r]).collect()),
        }
    }

    /// Keep only the named covariate columns, in the given order.
    pub fn select_covariates<S: AsRef<str>>(&self, names: &[S]) -> Result<TabularDataset> {
        let idx = names
            .iter()
            .map(|name| {
                self.covariate_names
                    .iter()
                    .position(|c| c == name.as_ref())
                    .ok_or_else(|| Error::MissingColumn {
                        column: name.as_ref().to_owned(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut covariates = Vec::with_capacity(self.n() * idx.len());
        for i in 0..self.n() {
            let row = self.row(i);
            covariates.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(TabularDataset {
            covariate_names: idx.iter().map(|&j| self.covariate_names[j].clone()).collect(),
            covariates,
            ..self.clone()
        })
    }

    /// Rows whose agent is `a`. Unknown agents give an empty dataset.
    pub fn filter_by_agent(&self, a: &AgentId) -> Result<TabularDataset> {
        let rows = self.agent_rows(a)?;
        Ok(self.take(&rows))
    }

    /// Shuffled row-level partition with `round(train_fraction * n)` training rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
        let (train, eval) = split_indices(self.n(), train_fraction, seed)?;
        Ok((self.take(&train), self.take(&eval)))
    }

    /// Write in the canonical column layout.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        match self.role {
            Role::Manipulated => header.extend(["x", "y"]),
            Role::Unmanipulated => header.extend(["x_star", "y"]),
        }
        if self.agent.is_some() {
            header.push("a");
        }
        if self.true_feature.is_some() {
            header.push("x_star");
        }
        w.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            record.push(self.feature[i].to_string());
            record.push(self.outcome[i].to_string());
            if let Some(a) = self.agent_at(i) {
                record.push(a.to_string());
            }
            if let Some(t) = &self.true_feature {
                record.push(t[i].to_string());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(io::BufWriter::new(file))
    }
}

/// Shuffled index partition used by [`TabularDataset::split`].
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Size(format!("cannot split a dataset of {n} rows")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = (train_fraction * n as f64).round() as usize;
    let eval = order.split_off(n_train);
    Ok((order, eval))
}

/// Column mapping for CSV ingestion. `None` fields fall back to canonical names.
#[derive(Clone, Debug, Default)]
pub struct ColumnSchema {
    /// Feature column; canonical `x`, or `x_star` for unmanipulated files that have it.
    pub feature: Option<String>,
    /// Outcome column; canonical `y`.
    pub outcome: Option<String>,
    /// Covariates; canonical is every `c_*` column in file order.
    pub covariates: Option<Vec<String>>,
    /// Agent column; canonical `a` for manipulated files.
    pub agent: Option<String>,
    /// True feature column; canonical `x_star` for manipulated files.
    pub true_feature: Option<String>,
}

struct ResolvedSchema {
    feature: usize,
    outcome: usize,
    covariates: Vec<usize>,
    agent: Option<usize>,
    true_feature: Option<usize>,
}

impl ColumnSchema {
    fn resolve(&self, headers: &csv::StringRecord, role: Role) -> Result<ResolvedSchema> {
        let find = |name: &str| headers.iter().position(|h| h == name);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
            })
        };

        if role == Role::Unmanipulated && self.agent.is_some() {
            return Err(Error::Role(
                "an agent column cannot be mapped for an unmanipulated dataset".into(),
            ));
        }

        let feature = match (&self.feature, role) {
            (Some(name), _) => require(name)?,
            (None, Role::Unmanipulated) => find("x_star").map_or_else(|| require("x"), Ok)?,
            (None, Role::Manipulated) => require("x")?,
        };
        let outcome = require(self.outcome.as_deref().unwrap_or("y"))?;
        let covariates = match &self.covariates {
            Some(names) => names.iter().map(|n| require(n)).collect::<Result<_>>()?,
            None => headers
                .iter()
                .enumerate()
                .filter_map(|(i, h)| h.starts_with("c_").then_some(i))
                .collect(),
        };
        let agent = match (&self.agent, role) {
            (Some(name), _) => Some(require(name)?),
            (None, Role::Manipulated) => find("a"),
            (None, Role::Unmanipulated) => None,
        };
        let true_feature = match (&self.true_feature, role) {
            (Some(name), _) => Some(require(name)?),
            (None, Role::Manipulated) => find("x_star").filter(|&i| i != feature),
            (None, Role::Unmanipulated) => None,
        };
        Ok(ResolvedSchema {
            feature,
            outcome,
            covariates,
            agent,
            true_feature,
        })
    }
}

fn parse_real(field: &str, row: usize, column: &str) -> Result<f64> {
    let invalid = |message: String| Error::Validation {
        row,
        column: column.to_owned(),
        message,
    };
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Err(invalid("missing value".into()));
    }
    let v: f64 = trimmed
        .parse()
        .map_err(|_| invalid(format!("`{trimmed}` is not numeric")))?;
    if !v.is_finite() {
        return Err(invalid(format!("`{trimmed}` is not finite")));
    }
    Ok(v)
}

fn parse_binary(field: &str, row: usize, column: &str) -> Result<u8> {
    let v = parse_real(field, row, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Validation {
            row,
            column: column.to_owned(),
            message: format!("value {v} is not 0 or 1"),
        })
    }
}

/// Read a dataset from a reader. Row indices in errors are 0-based data rows.
pub fn read_dataset<R: io::Read>(reader: R, schema: &ColumnSchema, role: Role) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = schema.resolve(&headers, role)?;
    let name = |i: usize| headers.get(i).unwrap_or_default().to_owned();

    let mut covariates = Vec::new();
    let mut feature = Vec::new();
    let mut outcome = Vec::new();
    let mut agents = cols.agent.map(|_| Vec::new());
    let mut true_feature = cols.true_feature.map(|_| Vec::new());
    let field = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or("").to_owned();

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &j in &cols.covariates {
            covariates.push(parse_real(&field(&rec, j), row, &name(j))?);
        }
        feature.push(parse_binary(&field(&rec, cols.feature), row, &name(cols.feature))?);
        outcome.push(parse_binary(&field(&rec, cols.outcome), row, &name(cols.outcome))?);
        if let (Some(j), Some(out)) = (cols.agent, agents.as_mut()) {
            let token = field(&rec, j);
            let token = token.trim();
            if token.is_empty() {
                return Err(Error::Validation {
                    row,
                    column: name(j),
                    message: "missing agent id".into(),
                });
            }
            out.push(AgentId::new(token));
        }
        if let (Some(j), Some(out)) = (cols.true_feature, true_feature.as_mut()) {
            out.push(parse_binary(&field(&rec, j), row, &name(j))?);
        }
    }

    let names: Vec<String> = cols.covariates.iter().map(|&j| name(j)).collect();
    let d = names.len();
    for (j, col) in names.iter().enumerate() {
        if covariates
            .iter()
            .skip(j)
            .step_by(d)
            .any(|v| v.abs() > COVARIATE_WARN_BOUND)
        {
            log::warn!("covariate `{col}` has values outside [-10, 10]; expected normalized inputs");
        }
    }

    let mut ds = TabularDataset::new(role, names, covariates, feature, outcome)?;
    if let Some(a) = agents {
        ds = ds.with_agents(a)?;
    }
    if let Some(t) = true_feature {
        ds = ds.with_true_feature(t)?;
    }
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema, role: Role) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(io::BufReader::new(file), schema, role)
}
