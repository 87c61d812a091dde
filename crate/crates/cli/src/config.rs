//! The JSON run configuration shared by every subcommand.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use quantbench::advisory::AdvisoryOptions;
use quantbench::data::PriceColumn;
use quantbench::eval::MetricSpace;
use quantbench::models::ModelSpec;
use quantbench::preprocess::DEFAULT_TRAIN_FRACTION;
use quantbench::sentiment::DEFAULT_DECAY;
use quantbench::train::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub metric_space: MetricSpace,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub advisory: AdvisoryOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Overrides both `model.seed` and `train.seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// OHLCV CSV file of the modeled stock.
    pub prices: Option<PathBuf>,
    /// Symbol to look up in the cache directory when `prices` is absent. Also
    /// selects which news items apply.
    pub symbol: Option<String>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub column: PriceColumn,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    /// News headlines as JSON lines.
    pub news: Option<PathBuf>,
    /// `word,weight` lexicon replacing the bundled one.
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_decay")]
    pub sentiment_decay: f64,
    /// Train and predict with the sentiment column.
    #[serde(default)]
    pub use_sentiment: bool,
    /// Symbols for `advise`, read from the cache directory.
    #[serde(default)]
    pub symbols: Vec<String>,
    /// `symbol,price,eps,sales_per_share,sector` table for peer valuation.
    pub fundamentals: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub windows: Vec<usize>,
    pub horizons: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            windows: vec![30, 60],
            horizons: vec![1, 5, 10],
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

fn default_decay() -> f64 {
    DEFAULT_DECAY
}

impl RunConfig {
    /// Parses, resolves relative paths and validates value ranges. File
    /// existence is checked where the data is loaded.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Config(format!("config key `{key}`: {}", e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let d = &mut self.data;
        for p in [
            &mut d.prices,
            &mut d.cache_dir,
            &mut d.news,
            &mut d.lexicon,
            &mut d.fundamentals,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            if let Some(m) = &mut self.model {
                m.seed = seed;
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(m) = &self.model {
            m.validate()
                .map_err(|e| CliError::Config(format!("config key `model`: {e}")))?;
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("config key `train`: {e}")))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(
                "config key `train_fraction`: must lie strictly between 0 and 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.sentiment_decay) {
            return Err(CliError::Config(
                "config key `data.sentiment_decay`: must lie in [0, 1]".into(),
            ));
        }
        if self.advisory.threshold.is_nan() || self.advisory.threshold < 0.0 {
            return Err(CliError::Config(
                "config key `advisory.threshold`: must be non-negative".into(),
            ));
        }
        if self.advisory.lookback.is_some_and(|n| n < 2) {
            return Err(CliError::Config(
                "config key `advisory.lookback`: must be at least 2".into(),
            ));
        }
        if let (Some(s), Some(e)) = (self.data.start, self.data.end) {
            if s > e {
                return Err(CliError::Config(
                    "config key `data.start`: must not be after `data.end`".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelSpec, CliError> {
        self.model.as_ref().ok_or_else(|| {
            CliError::Config("config key `model`: missing, required by this command".into())
        })
    }
}
