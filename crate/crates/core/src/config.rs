//! Experiment configuration files (TOML).
//!
//! ```toml
//! [dataset]
//! seed = 0                 # generator seed
//! [dataset.synthetic]      # either this table ...
//! users = 200
//! # interactions = "data/interactions.tsv"   # ... or these paths
//! # attributes = "data/attributes.txt"
//! # split = "data/split.txt"                 # or [dataset.split_ratio]
//!
//! [train]
//! rounds = 100
//!
//! [sweep]
//! ldp_scale = [0.0, 0.1, 0.2]
//!
//! [output]
//! dir = "runs"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_planted, load_dataset, Dataset, PlantedModel, SplitSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::federation::{Sweep, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSplit {
    #[serde(default)]
    pub seed: u64,
    pub warm: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Seed of the synthetic generator.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_ratio: Option<RatioSplit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Tsv,
    Csv,
}

impl TableFormat {
    pub fn delimiter(self) -> char {
        match self {
            TableFormat::Tsv => '\t',
            TableFormat::Csv => ',',
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Tsv => "tsv",
            TableFormat::Csv => "csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: bool,
    pub table_format: TableFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            checkpoint: true,
            table_format: TableFormat::Tsv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Sweep::is_empty")]
    pub sweep: Sweep,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// A synthetic-data experiment with every default.
    pub fn synthetic_default() -> Self {
        ExperimentConfig {
            dataset: DatasetSection {
                synthetic: Some(SyntheticConfig::default()),
                ..DatasetSection::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads a config file; relative dataset paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let d = &mut config.dataset;
            for p in [&mut d.interactions, &mut d.attributes, &mut d.split].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let has_paths = d.interactions.is_some() || d.attributes.is_some();
        match (has_paths, &d.synthetic) {
            (true, Some(_)) => {
                return Err(Error::Config(
                    "[dataset] needs either file paths or a synthetic table, not both".into(),
                ))
            }
            (false, None) => {
                return Err(Error::Config(
                    "[dataset] needs either interactions/attributes paths or a synthetic table".into(),
                ))
            }
            (false, Some(syn)) => {
                syn.validate()?;
                if d.split.is_some() || d.split_ratio.is_some() {
                    return Err(Error::Config("synthetic data defines its own split".into()));
                }
            }
            (true, None) => {
                for (name, p) in [("interactions", &d.interactions), ("attributes", &d.attributes)] {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("[dataset] is missing `{name}`")))?;
                    if !p.is_file() {
                        return Err(Error::Config(format!("{name} file {} does not exist", p.display())));
                    }
                }
                match (&d.split, &d.split_ratio) {
                    (Some(p), None) if !p.is_file() => {
                        return Err(Error::Config(format!("split file {} does not exist", p.display())))
                    }
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => return Err(Error::Config("give exactly one of `split` or `split_ratio`".into())),
                }
            }
        }
        self.train.validate()
    }

    /// Builds the dataset; the planted model is returned for synthetic data.
    pub fn load_dataset(&self) -> Result<(Dataset, Option<PlantedModel>)> {
        self.validate()?;
        let d = &self.dataset;
        if let Some(syn) = &d.synthetic {
            let (ds, planted) = generate_planted(syn, d.seed)?;
            return Ok((ds, Some(planted)));
        }
        let split = match (&d.split, &d.split_ratio) {
            (Some(path), _) => crate::data::read_split(path)?,
            (None, Some(r)) => SplitSpec::Ratio {
                seed: r.seed,
                warm: r.warm,
                val: r.val,
                test: r.test,
            },
            (None, None) => unreachable!("validated"),
        };
        let ds = load_dataset(
            d.interactions.as_deref().expect("validated"),
            d.attributes.as_deref().expect("validated"),
            &split,
        )?;
        Ok((ds, None))
    }
}
