//! The run configuration file: a flat TOML table holding every training
//! hyperparameter plus the dataset schema and split settings.
//!
//! ```toml
//! label_column = "Grade"
//! numeric_columns = ["Age_at_diagnosis", "IDH1"]
//! categorical_columns = ["Gender"]
//! label_vocabulary = ["0", "1"]   # optional, inferred when absent
//! test_fraction = 0.2             # ignored when test_data is set
//! val_fraction = 0.2
//! test_data = "test.csv"          # optional, relative to this file
//! lr = 0.003
//! epochs = 32
//! ```
//!
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{DatasetSchema, SplitConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub schema: DatasetSchema,
    pub split: SplitConfig,
    pub test_data: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataKeys {
    label_column: String,
    #[serde(default)]
    numeric_columns: Vec<String>,
    #[serde(default)]
    categorical_columns: Vec<String>,
    #[serde(default)]
    label_vocabulary: Vec<String>,
    test_fraction: Option<f64>,
    val_fraction: Option<f64>,
    test_data: Option<PathBuf>,
}

const DATA_KEYS: [&str; 7] =
    ["label_column", "numeric_columns", "categorical_columns", "label_vocabulary", "test_fraction", "val_fraction", "test_data"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut data = toml::Table::new();
        for key in DATA_KEYS {
            if let Some(v) = table.remove(key) {
                data.insert(key.to_string(), v);
            }
        }
        let keys: DataKeys = data.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let train: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let defaults = SplitConfig::default();
        let config = RunConfig {
            train,
            schema: DatasetSchema {
                label_column: keys.label_column,
                numeric_columns: keys.numeric_columns,
                categorical_columns: keys.categorical_columns,
                label_vocabulary: keys.label_vocabulary,
            },
            split: SplitConfig {
                test_fraction: keys.test_fraction.unwrap_or(defaults.test_fraction),
                val_fraction: keys.val_fraction.unwrap_or(defaults.val_fraction),
            },
            test_data: keys.test_data,
        };
        config.train.validate()?;
        config.schema.validate()?;
        config.split.validate()?;
        Ok(config)
    }

    /// Reads a config file; a relative `test_data` resolves against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(t) = config.test_data.as_mut() {
            if t.is_relative() {
                *t = path.parent().unwrap_or(Path::new(".")).join(&*t);
            }
        }
        Ok(config)
    }
}
