//! Pipeline configuration: one TOML file holding every tunable.
//!
//! Relative paths are resolved against the directory of the config file.
//! Any key can be overridden with `section.key=value`, where `value` is a TOML
//! literal (bare words are taken as strings).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{CombineMode, Threshold, ThresholdConfig};
use crate::cluster::{ClusterConfig, DEFAULT_IMPORTANCE_THRESHOLDS, DEFAULT_K, DEFAULT_REFIT_PERIOD, DEFAULT_RESTARTS};
use crate::data::{FilterConfig, Month};
use crate::error::{Error, Result};
use crate::kde::DEFAULT_MIN_SAMPLES;
use crate::predict::DEFAULT_LAGS;
use crate::rules::RuleSet;
use crate::scoring::BandFractions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub records: PathBuf,
    pub rules: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub monthly_min_patients: usize,
    pub yearly_min_patients: usize,
    /// Months dropped at load time, e.g. lockdown months.
    pub excluded_months: Vec<Month>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            monthly_min_patients: 0,
            yearly_min_patients: 0,
            excluded_months: Vec::new(),
        }
    }
}

/// Inclusive month range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonthRange {
    pub start: Month,
    pub end: Month,
}

impl MonthRange {
    pub fn contains(&self, m: Month) -> bool {
        self.start <= m && m <= self.end
    }

    pub fn months(&self) -> Vec<Month> {
        Month::range_inclusive(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeSection {
    pub min_samples: usize,
}

impl Default for KdeSection {
    fn default() -> Self {
        KdeSection {
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub refit_period: u32,
    pub restarts: usize,
    pub seed: u64,
    pub importance_low: f64,
    pub importance_high: f64,
    /// Largest k tried by the elbow scan in the training summary; 0 skips it.
    pub elbow_k_max: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            k: DEFAULT_K,
            refit_period: DEFAULT_REFIT_PERIOD,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            importance_low: DEFAULT_IMPORTANCE_THRESHOLDS.0,
            importance_high: DEFAULT_IMPORTANCE_THRESHOLDS.1,
            elbow_k_max: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub lags: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection { lags: DEFAULT_LAGS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSection {
    pub top: f64,
    pub bottom: f64,
}

impl Default for BucketSection {
    fn default() -> Self {
        let d = BandFractions::default();
        BucketSection { top: d.top, bottom: d.bottom }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Anomaly cutoff as a quantile of training distances.
    pub quantile: f64,
    /// Per-rule thresholds keyed by rule id; unlisted rules get the placeholders.
    pub thresholds: BTreeMap<String, Threshold>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            quantile: 0.9,
            thresholds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub filter: FilterSection,
    pub train: MonthRange,
    pub test: Option<MonthRange>,
    #[serde(default)]
    pub kde: KdeSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub bucket: BucketSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path.to.key` in `table` to the TOML literal `value`, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses, applies overrides, resolves relative paths against `base_dir` and validates.
    pub fn from_toml_str(src: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(src).map_err(|e| Error::Config(format!("pipeline config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("pipeline config: {e}")))?;
        for p in [&mut cfg.paths.records, &mut cfg.paths.rules, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&src, overrides, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.start > self.train.end {
            return Err(Error::Config(format!(
                "training window {}..{} is empty",
                self.train.start, self.train.end
            )));
        }
        if let Some(t) = &self.test {
            if t.start > t.end {
                return Err(Error::Config(format!("test window {}..{} is empty", t.start, t.end)));
            }
        }
        let b = &self.bucket;
        if !(b.top >= 0.0 && b.bottom >= 0.0 && b.top + b.bottom <= 1.0) {
            return Err(Error::Config(format!(
                "bucket fractions {} + {} must be nonnegative and sum to at most 1",
                b.top, b.bottom
            )));
        }
        let c = &self.cluster;
        if c.k == 0 || c.restarts == 0 || c.refit_period == 0 {
            return Err(Error::Config("cluster.k, cluster.restarts and cluster.refit_period must be positive".into()));
        }
        if !(c.importance_low <= c.importance_high) {
            return Err(Error::Config("cluster.importance_low exceeds cluster.importance_high".into()));
        }
        if self.predict.lags == 0 {
            return Err(Error::Config("predict.lags must be positive".into()));
        }
        if !(self.baseline.quantile > 0.0 && self.baseline.quantile < 1.0) {
            return Err(Error::Config(format!("baseline.quantile {} outside (0, 1)", self.baseline.quantile)));
        }
        Ok(())
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            monthly_min_patients: self.filter.monthly_min_patients,
            yearly_min_patients: self.filter.yearly_min_patients,
        }
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            k: self.cluster.k,
            seed: self.cluster.seed,
            restarts: self.cluster.restarts,
            refit_period: self.cluster.refit_period,
            importance_thresholds: (self.cluster.importance_low, self.cluster.importance_high),
        }
    }

    pub fn band_fractions(&self) -> BandFractions {
        BandFractions {
            top: self.bucket.top,
            bottom: self.bucket.bottom,
        }
    }

    /// Configured thresholds over placeholders for `rules`.
    pub fn threshold_config(&self, rules: &RuleSet, combine: CombineMode) -> Result<ThresholdConfig> {
        let mut cfg = ThresholdConfig::placeholder(rules, combine);
        for (key, t) in &self.baseline.thresholds {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::Config(format!("baseline threshold key `{key}` is not a rule id")))?;
            if rules.get(id).is_none() {
                return Err(Error::Config(format!("baseline threshold for unknown rule {id}")));
            }
            cfg.thresholds.insert(id, *t);
        }
        Ok(cfg)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.paths.output_dir.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.output_dir.join("reports")
    }
}
