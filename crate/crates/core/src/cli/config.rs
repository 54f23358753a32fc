//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::InitAssignment;
use crate::dataset::{self, groups_from_config, load_csv, ExactDataset, GroupFamily, GroupPredicate};
use crate::error::{Error, Result};
use crate::online::adversary::{AdversarySpec, ContextSpec};
use crate::properties::FiniteDistribution;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    /// `mean`, `quantile(tau=…, m2=…)`, `mean_variance`, `quantile_cvar(tau=…, m1=…, m2=…)`.
    #[serde(default)]
    pub property: Option<String>,
    /// Predicates on cell tags; the all-cells group is always added.
    #[serde(default)]
    pub groups: Vec<GroupPredicate>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub alpha0: Option<f64>,
    #[serde(default)]
    pub alpha1: Option<f64>,
    #[serde(default)]
    pub f_init: Option<InitAssignment>,
    #[serde(default)]
    pub f1_init: Option<InitAssignment>,
    /// Predictor JSON for `audit`.
    #[serde(default)]
    pub predictor: Option<PathBuf>,
    #[serde(default)]
    pub online: Option<OnlineConfig>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Exact(PathBuf),
    Csv { path: PathBuf, features: Vec<String>, label: String },
    Generator(GeneratorSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GeneratorSpec {
    VarianceCounterexample,
    TwoPoint { p1: FiniteDistribution, p2: FiniteDistribution, lambda: f64 },
    Bernoulli { ps: Vec<f64> },
    PermutedGrid { cells: usize, stride: usize },
    BoundedDensity { cells: usize, atoms: usize, m1: f64, m2: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub adversary: Option<AdversarySpec>,
    /// Identification bound `C`; defaults to the property's.
    #[serde(default)]
    pub c: Option<f64>,
    /// Lipschitz constant used in the reported bound; defaults to the
    /// adversary's declared one.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Group ids and contexts; both default to the built-in four-group layout.
    #[serde(default)]
    pub group_ids: Option<Vec<String>>,
    #[serde(default)]
    pub contexts: Option<Vec<ContextSpec>>,
    #[serde(default = "default_label_points")]
    pub label_points: usize,
    /// Write one transcript CSV per seed.
    #[serde(default = "default_true")]
    pub transcripts: bool,
}

fn default_label_points() -> usize {
    101
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.dataset {
            Some(DatasetSource::Exact(p)) => fix(p),
            Some(DatasetSource::Csv { path, .. }) => fix(path),
            _ => {}
        }
        if let Some(p) = &mut cfg.predictor {
            fix(p);
        }
        if let Some(p) = &mut cfg.out {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn require_m(&self) -> Result<usize> {
        self.m.ok_or_else(|| Error::Config("`m` is required".into()))
    }

    pub fn require_property(&self) -> Result<&str> {
        self.property.as_deref().ok_or_else(|| Error::Config("`property` is required".into()))
    }

    pub fn load_dataset(&self) -> Result<ExactDataset> {
        match self.dataset.as_ref().ok_or_else(|| Error::Config("`dataset` is required".into()))? {
            DatasetSource::Exact(p) => ExactDataset::load_json(p),
            DatasetSource::Csv { path, features, label } => load_csv(path, features, label)?.to_exact(),
            DatasetSource::Generator(g) => g.build(),
        }
    }

    pub fn load_groups(&self, data: &ExactDataset) -> Result<GroupFamily> {
        groups_from_config(data, &self.groups)
    }
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<ExactDataset> {
        match self {
            GeneratorSpec::VarianceCounterexample => Ok(dataset::make_variance_counterexample()),
            GeneratorSpec::TwoPoint { p1, p2, lambda } => {
                dataset::make_two_point_dataset(p1.clone(), p2.clone(), *lambda)
            }
            GeneratorSpec::Bernoulli { ps } => dataset::make_bernoulli_dataset(ps),
            GeneratorSpec::PermutedGrid { cells, stride } => dataset::make_permuted_grid_dataset(*cells, *stride),
            GeneratorSpec::BoundedDensity { cells, atoms, m1, m2, seed } => {
                dataset::synth_bounded_density(*cells, *atoms, *m1, *m2, *seed)
            }
        }
    }
}
