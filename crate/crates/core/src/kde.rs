//! Bounded-support Gaussian KDE over [0, 100] and the percentage-to-probability map.
//!
//! The density is reflected at both boundaries, so for a sample `c` the kernel
//! contributes at `c`, `-c` and `200 - c`. The CDF is tabulated on a uniform
//! 1001-point grid by integrating the kernels in closed form (sums of normal
//! CDFs) and renormalising so the table ends at exactly 1. Lookups between grid
//! points interpolate linearly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{PercentageMatrix, Polarity, RuleSet};

pub const SUPPORT_MAX: f64 = 100.0;
pub const GRID_POINTS: usize = 1001;
pub const DEFAULT_MIN_SAMPLES: usize = 5;
const MIN_BANDWIDTH: f64 = 1e-3;
/// Kernels further than this many bandwidths away are treated as fully on one side.
const KERNEL_REACH: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    None,
    /// Too few samples; `cdf(x) = x / 100`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub rule_id: u32,
    pub samples_used: usize,
    pub bandwidth: f64,
    pub fallback: Fallback,
    /// `(x, F(x))` on a uniform grid over [0, 100].
    pub cdf_grid: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeOptions {
    pub min_samples: usize,
    pub bandwidth: Option<f64>,
}

impl Default for KdeOptions {
    fn default() -> Self {
        KdeOptions {
            min_samples: DEFAULT_MIN_SAMPLES,
            bandwidth: None,
        }
    }
}

/// Drops values at exactly 0 or 100; those extremes are scored directly.
pub fn filter_extremes(samples: &[f64]) -> Vec<f64> {
    samples
        .iter()
        .copied()
        .filter(|&p| p != 0.0 && p != SUPPORT_MAX)
        .collect()
}

fn grid_x(i: usize) -> f64 {
    SUPPORT_MAX * i as f64 / (GRID_POINTS - 1) as f64
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Linear-interpolated quantile of sorted data (R type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule of thumb, `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Fits a reflected Gaussian KDE to percentages strictly inside (0, 100).
///
/// Fewer than `opts.min_samples` samples give the uniform fallback.
pub fn fit_kde(rule_id: u32, samples: &[f64], opts: &KdeOptions) -> Result<KdeModel> {
    if let Some(bad) = samples.iter().find(|p| !(**p > 0.0 && **p < SUPPORT_MAX)) {
        return Err(Error::Domain {
            value: *bad,
            low: 0.0,
            high: SUPPORT_MAX,
        });
    }
    if samples.len() < opts.min_samples.max(1) {
        return Ok(KdeModel::uniform(rule_id, samples.len()));
    }
    let bandwidth = opts
        .bandwidth
        .unwrap_or_else(|| silverman_bandwidth(samples))
        .max(MIN_BANDWIDTH);

    // Kernel centres including both reflections, sorted for windowed summation.
    let mut centres: Vec<f64> = samples
        .iter()
        .flat_map(|&c| [c, -c, 2.0 * SUPPORT_MAX - c])
        .collect();
    centres.sort_by(f64::total_cmp);
    let at_zero: f64 = centres.iter().map(|&c| std_normal_cdf(-c / bandwidth)).sum();
    let reach = KERNEL_REACH * bandwidth;

    let raw: Vec<f64> = (0..GRID_POINTS)
        .map(|i| {
            let x = grid_x(i);
            let lo = centres.partition_point(|&c| c < x - reach);
            let hi = centres.partition_point(|&c| c <= x + reach);
            let near: f64 = centres[lo..hi]
                .iter()
                .map(|&c| std_normal_cdf((x - c) / bandwidth))
                .sum();
            lo as f64 + near - at_zero
        })
        .collect();

    let total = raw[GRID_POINTS - 1];
    let mut running = 0.0f64;
    let cdf_grid = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mass = match i {
                0 => 0.0,
                i if i == GRID_POINTS - 1 => 1.0,
                _ => (v / total).clamp(0.0, 1.0),
            };
            running = running.max(mass);
            [grid_x(i), running]
        })
        .collect();

    Ok(KdeModel {
        rule_id,
        samples_used: samples.len(),
        bandwidth,
        fallback: Fallback::None,
        cdf_grid,
    })
}

impl KdeModel {
    pub fn uniform(rule_id: u32, samples_used: usize) -> Self {
        KdeModel {
            rule_id,
            samples_used,
            bandwidth: 0.0,
            fallback: Fallback::Uniform,
            cdf_grid: (0..GRID_POINTS)
                .map(|i| [grid_x(i), grid_x(i) / SUPPORT_MAX])
                .collect(),
        }
    }

    /// Probability mass on `[0, x]`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if !(0.0..=SUPPORT_MAX).contains(&x) {
            return Err(Error::Domain {
                value: x,
                low: 0.0,
                high: SUPPORT_MAX,
            });
        }
        let last = self.cdf_grid.len() - 1;
        let pos = x / SUPPORT_MAX * last as f64;
        let i = (pos.floor() as usize).min(last - 1);
        let t = pos - i as f64;
        let [_, a] = self.cdf_grid[i];
        let [_, b] = self.cdf_grid[i + 1];
        Ok(a + t * (b - a))
    }

    /// Checks the grid shape after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Serialization(format!("KDE model for rule {}: {msg}", self.rule_id)));
        if self.cdf_grid.len() < 2 {
            return bad("CDF grid has fewer than two points".into());
        }
        let first = self.cdf_grid[0];
        let last = self.cdf_grid[self.cdf_grid.len() - 1];
        if first[0].abs() > 1e-9 || first[1].abs() > 1e-9 || (last[0] - SUPPORT_MAX).abs() > 1e-9 || (last[1] - 1.0).abs() > 1e-9 {
            return bad("CDF grid must run from (0, 0) to (100, 1)".into());
        }
        if self.cdf_grid.windows(2).any(|w| w[1][1] < w[0][1]) {
            return bad("CDF grid is not monotone".into());
        }
        if self.fallback == Fallback::None && !(self.bandwidth > 0.0) {
            return bad("bandwidth must be positive".into());
        }
        Ok(())
    }
}

/// Probability of non-diligence for one percentage.
///
/// The certain extremes are fixed: for `HighBad`, 0% maps to 0 and 100% to 1;
/// `LowBad` mirrors that. Interior values use the CDF (or its complement).
/// Missing stays missing.
pub fn non_diligence_prob(model: &KdeModel, p: Option<f64>, polarity: Polarity) -> Result<Option<f64>> {
    let Some(p) = p else {
        return Ok(None);
    };
    let cdf = model.cdf(p)?;
    Ok(Some(match polarity {
        Polarity::HighBad if p == 0.0 => 0.0,
        Polarity::HighBad if p == SUPPORT_MAX => 1.0,
        Polarity::HighBad => cdf,
        Polarity::LowBad if p == 0.0 => 1.0,
        Polarity::LowBad if p == SUPPORT_MAX => 0.0,
        Polarity::LowBad => 1.0 - cdf,
    }))
}

/// Fits one model per rule from the matrix columns, honouring per-rule bandwidth overrides.
pub fn fit_models(matrix: &PercentageMatrix, rules: &RuleSet, min_samples: usize) -> Result<Vec<KdeModel>> {
    rules
        .rules()
        .iter()
        .enumerate()
        .map(|(idx, rule)| {
            let samples = filter_extremes(&matrix.column(idx));
            fit_kde(
                rule.id,
                &samples,
                &KdeOptions {
                    min_samples,
                    bandwidth: rule.bandwidth,
                },
            )
        })
        .collect()
}
