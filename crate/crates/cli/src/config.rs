//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use pruw_core::field::{PrimeField, DEFAULT_MODULUS};
use pruw_core::planner::{parse_rational, Budgets, Rational};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Inproc,
    Socket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Table,
    Csv,
    Json,
}

/// A budget given either as a string (`"1/4"`, `"0.05"`) or a JSON number.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum BudgetValue {
    Text(String),
    Number(f64),
}

impl BudgetValue {
    fn parse(&self) -> Result<Rational> {
        let text = match self {
            BudgetValue::Text(s) => s.clone(),
            BudgetValue::Number(x) => x.to_string(),
        };
        Ok(parse_rational(&text)?)
    }
}

/// Contents of `--config`. Every field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub q: Option<u64>,
    pub d_read: Option<BudgetValue>,
    pub d_write: Option<BudgetValue>,
    pub seed: Option<u64>,
    pub transport: Option<TransportMode>,
    pub nodes: Option<Vec<String>>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with defaults; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// number of databases
    #[arg(short = 'n', long = "dbs", global = true)]
    pub n: Option<usize>,
    /// number of submodels
    #[arg(short = 'm', long = "submodels", global = true)]
    pub m: Option<usize>,
    /// symbols per submodel
    #[arg(short = 'l', long = "length", global = true)]
    pub l: Option<usize>,
    /// field modulus (prime)
    #[arg(short = 'q', long = "modulus", global = true)]
    pub q: Option<u64>,
    /// read distortion budget, e.g. 1/4 or 0.25
    #[arg(long, global = true)]
    pub d_read: Option<String>,
    /// write distortion budget
    #[arg(long, global = true)]
    pub d_write: Option<String>,
    /// sets both budgets
    #[arg(short = 'd', long, global = true)]
    pub budget: Option<String>,
    #[arg(long, env = "PRUW_SEED", global = true)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    pub transport: Option<TransportMode>,
    /// database addresses for socket mode, in database order
    #[arg(long, value_delimiter = ',', global = true)]
    pub nodes: Option<Vec<String>>,
    /// write results here instead of stdout
    #[arg(short = 'o', long, global = true)]
    pub output: Option<PathBuf>,
    /// defaults to a table on a terminal, CSV otherwise
    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,
    /// also report costs in bits per symbol (symbols x log2 q)
    #[arg(long, global = true)]
    pub bits: bool,
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub q: u64,
    pub budgets: Budgets,
    pub seed: u64,
    pub transport: TransportMode,
    pub nodes: Vec<String>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
    pub bits: bool,
}

impl RunConfig {
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flag_budget = |specific: &Option<String>| -> Result<Option<Rational>> {
            match specific.as_ref().or(args.budget.as_ref()) {
                Some(s) => Ok(Some(parse_rational(s)?)),
                None => Ok(None),
            }
        };
        let d_read = match flag_budget(&args.d_read)? {
            Some(d) => d,
            None => file.d_read.as_ref().map(BudgetValue::parse).transpose()?.unwrap_or_else(|| Rational::from_integer(0)),
        };
        let d_write = match flag_budget(&args.d_write)? {
            Some(d) => d,
            None => file.d_write.as_ref().map(BudgetValue::parse).transpose()?.unwrap_or_else(|| Rational::from_integer(0)),
        };
        let cfg = RunConfig {
            n: args.n.or(file.n).unwrap_or(6),
            m: args.m.or(file.m).unwrap_or(4),
            l: args.l.or(file.l).unwrap_or(2400),
            q: args.q.or(file.q).unwrap_or(DEFAULT_MODULUS),
            budgets: Budgets::new(d_read, d_write)?,
            seed: args.seed.or(file.seed).unwrap_or(0),
            transport: args.transport.or(file.transport).unwrap_or(TransportMode::Inproc),
            nodes: args.nodes.clone().or(file.nodes).unwrap_or_default(),
            output: args.output.clone().or(file.output),
            format: args.format.or(file.format),
            bits: args.bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            bail!("N = {}: at least 4 databases are required", self.n);
        }
        if self.m == 0 || self.l == 0 {
            bail!("M and L must be positive");
        }
        PrimeField::new(self.q)?;
        if self.transport == TransportMode::Socket && self.nodes.len() != self.n {
            bail!("socket transport needs {} node addresses, got {}", self.n, self.nodes.len());
        }
        Ok(())
    }
}
