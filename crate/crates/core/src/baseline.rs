//! Reference taggers to compare the scores against: fixed per-rule thresholds
//! combined with AND/OR, and a Mahalanobis-distance anomaly tagger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};
use crate::rules::{PercentageMatrix, Polarity, RuleSet};

pub const COVARIANCE_JITTER: f64 = 1e-6;
/// Placeholder thresholds for rules whose field thresholds are not known.
pub const DEFAULT_HIGH_BAD_THRESHOLD: f64 = 70.0;
pub const DEFAULT_LOW_BAD_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ViolateIfAbove,
    ViolateIfBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub direction: Direction,
}

impl Threshold {
    /// Strict comparison: a percentage equal to the threshold is not a violation.
    pub fn violated_by(&self, p: f64) -> bool {
        match self.direction {
            Direction::ViolateIfAbove => p > self.value,
            Direction::ViolateIfBelow => p < self.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    And,
    Or,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::And => "AND",
            CombineMode::Or => "OR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Keyed by rule id.
    pub thresholds: BTreeMap<u32, Threshold>,
    pub combine: CombineMode,
}

impl ThresholdConfig {
    /// 70% for high-bad rules, 30% for low-bad rules.
    pub fn placeholder(rules: &RuleSet, combine: CombineMode) -> Self {
        let thresholds = rules
            .rules()
            .iter()
            .map(|r| {
                let t = match r.polarity {
                    Polarity::HighBad => Threshold {
                        value: DEFAULT_HIGH_BAD_THRESHOLD,
                        direction: Direction::ViolateIfAbove,
                    },
                    Polarity::LowBad => Threshold {
                        value: DEFAULT_LOW_BAD_THRESHOLD,
                        direction: Direction::ViolateIfBelow,
                    },
                };
                (r.id, t)
            })
            .collect();
        ThresholdConfig { thresholds, combine }
    }
}

/// Tags each `(worker, month)` row. Missing entries never count as violations.
pub fn threshold_baseline(matrix: &PercentageMatrix, cfg: &ThresholdConfig) -> Result<BTreeMap<(String, Month), bool>> {
    let thresholds: Vec<&Threshold> = (1..=matrix.rule_count() as u32)
        .map(|id| {
            cfg.thresholds
                .get(&id)
                .ok_or_else(|| Error::Config(format!("no baseline threshold for rule {id}")))
        })
        .collect::<Result<_>>()?;
    for (id, t) in &cfg.thresholds {
        if !(0.0..=100.0).contains(&t.value) {
            return Err(Error::Config(format!("baseline threshold {} for rule {id} outside [0, 100]", t.value)));
        }
    }
    Ok(matrix
        .rows()
        .map(|(anm, month, row)| {
            let mut violations = row
                .iter()
                .zip(&thresholds)
                .map(|(p, t)| p.is_some_and(|p| t.violated_by(p)));
            let tagged = match cfg.combine {
                CombineMode::And => violations.all(|v| v),
                CombineMode::Or => violations.any(|v| v),
            };
            ((anm.to_string(), month), tagged)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyTag {
    pub anm_id: String,
    pub month: Month,
    pub tagged: bool,
    pub distance: f64,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mahalanobis distance of every row from the mean of the training-month rows.
///
/// Missing entries are replaced by the training mean of their rule, so they
/// add no distance. The covariance gets [`COVARIANCE_JITTER`] on its diagonal.
/// A row is tagged when its distance exceeds the `quantile` of training distances.
pub fn anomaly_baseline(
    matrix: &PercentageMatrix,
    training_months: &BTreeSet<Month>,
    quantile: f64,
) -> Result<Vec<AnomalyTag>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside (0, 1)")));
    }
    let dim = matrix.rule_count();
    let train: Vec<&[Option<f64>]> = matrix
        .rows()
        .filter(|(_, m, _)| training_months.contains(m))
        .map(|(_, _, r)| r)
        .collect();
    if train.len() < dim + 2 {
        return Err(Error::InsufficientData(format!(
            "anomaly baseline needs at least {} training vectors, got {}",
            dim + 2,
            train.len()
        )));
    }

    let mean: Vec<f64> = (0..dim)
        .map(|j| {
            let present: Vec<f64> = train.iter().filter_map(|r| r[j]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    let fill = |r: &[Option<f64>]| DVector::from_iterator(dim, r.iter().zip(&mean).map(|(v, m)| v.unwrap_or(*m) - m));

    let n = train.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in &train {
        let d = fill(r);
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for j in 0..dim {
        cov[(j, j)] += COVARIANCE_JITTER;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::InsufficientData("training covariance is not positive definite".into()))?;
    let distance = |r: &[Option<f64>]| {
        let d = fill(r);
        let z = chol.solve(&d);
        d.dot(&z).max(0.0).sqrt()
    };

    let train_dist: Vec<f64> = train.iter().map(|r| distance(r)).collect();
    let cutoff = empirical_quantile(&train_dist, quantile);
    Ok(matrix
        .rows()
        .map(|(anm, month, row)| {
            let d = distance(row);
            AnomalyTag {
                anm_id: anm.to_string(),
                month,
                tagged: d > cutoff,
                distance: d,
            }
        })
        .collect())
}

/// Mean score of tagged and untagged workers; `None` for an empty side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagSplit {
    pub tagged: usize,
    pub untagged: usize,
    pub mean_tagged: Option<f64>,
    pub mean_untagged: Option<f64>,
}

pub fn split_means<'a>(pairs: impl IntoIterator<Item = (bool, f64)> + 'a) -> TagSplit {
    let (mut st, mut nt, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for (tagged, score) in pairs {
        if tagged {
            st += score;
            nt += 1;
        } else {
            su += score;
            nu += 1;
        }
    }
    TagSplit {
        tagged: nt,
        untagged: nu,
        mean_tagged: (nt > 0).then(|| st / nt as f64),
        mean_untagged: (nu > 0).then(|| su / nu as f64),
    }
}
