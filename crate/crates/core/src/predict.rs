//! Next-month score prediction from lagged monthly scores.
//!
//! One pooled linear model is fitted across all workers. Each training row
//! holds `L` consecutive past scores (oldest first) and the score of the
//! following month; a row whose window has a gap is skipped.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};

pub const DEFAULT_LAGS: usize = 6;
pub const RIDGE_PENALTY: f64 = 1e-6;
const REFINEMENT_STEPS: usize = 2;
/// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Monthly scores per worker.
pub type ScoreHistory = BTreeMap<String, BTreeMap<Month, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagFeatures {
    pub anm_id: String,
    pub target_month: Month,
    /// Past scores, oldest first.
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

/// The `lags` scores immediately before `target`, or `None` if any month is missing.
pub fn lag_window(scores: &BTreeMap<Month, f64>, target: Month, lags: usize) -> Option<Vec<f64>> {
    (1..=lags as i64)
        .rev()
        .map(|back| scores.get(&target.offset(-back)).copied())
        .collect()
}

/// Training rows: one per `(worker, month)` that has a score and `lags`
/// consecutive scored months right before it.
pub fn build_features(history: &ScoreHistory, lags: usize) -> Vec<LagFeatures> {
    let mut rows = Vec::new();
    if lags == 0 {
        return rows;
    }
    for (anm, scores) in history {
        for (&month, &y) in scores {
            if let Some(x) = lag_window(scores, month, lags) {
                rows.push(LagFeatures {
                    anm_id: anm.clone(),
                    target_month: month,
                    x,
                    y: Some(y),
                });
            }
        }
    }
    rows
}

/// Inference row for `target` (no label).
pub fn inference_features(history: &ScoreHistory, anm_id: &str, target: Month, lags: usize) -> Option<LagFeatures> {
    let x = lag_window(history.get(anm_id)?, target, lags)?;
    Some(LagFeatures {
        anm_id: anm_id.to_string(),
        target_month: target,
        x,
        y: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub lags: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Set when the design was rank-deficient and the ridge fallback was used.
    pub ridge: bool,
}

/// Ordinary least squares with intercept, solved through the SVD of the
/// design matrix. Falls back to ridge (penalty [`RIDGE_PENALTY`], intercept
/// unpenalised) when the design is rank-deficient.
pub fn fit_linear(rows: &[LagFeatures]) -> Result<LinearModel> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InsufficientData("no training rows for the linear model".into()))?;
    let lags = first.x.len();
    if rows.iter().any(|r| r.x.len() != lags) {
        return Err(Error::InvalidArgument("training rows disagree on lag count".into()));
    }
    let targets: Vec<f64> = rows
        .iter()
        .map(|r| r.y.ok_or_else(|| Error::InvalidArgument(format!("row {} {} has no target", r.anm_id, r.target_month))))
        .collect::<Result<_>>()?;
    if rows.iter().flat_map(|r| &r.x).chain(&targets).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite values in training rows".into()));
    }

    let n = rows.len();
    let p = lags + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i].x[j - 1] });
    let y = DVector::from_vec(targets);

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > smax * RANK_TOLERANCE).count();

    let (beta, ridge) = if n >= p && rank == p {
        let solve = |rhs: &DVector<f64>| {
            svd.solve(rhs, smax * RANK_TOLERANCE)
                .map_err(|e| Error::InvalidArgument(e.to_string()))
        };
        // The SVD solve alone can leave ~1e-8 of error; refinement on the residual removes it.
        let mut beta = solve(&y)?;
        for _ in 0..REFINEMENT_STEPS {
            beta += solve(&(&y - &design * &beta))?;
        }
        (beta, false)
    } else {
        log::warn!("linear model design is rank-deficient (rank {rank} of {p}); using ridge penalty {RIDGE_PENALTY}");
        let mut gram = design.transpose() * &design;
        for j in 1..p {
            gram[(j, j)] += RIDGE_PENALTY;
        }
        // A column of zeros in every row but the intercept is still singular; nudge the intercept too.
        if n == 0 || gram[(0, 0)] == 0.0 {
            gram[(0, 0)] += RIDGE_PENALTY;
        }
        let rhs = design.transpose() * &y;
        let beta = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::InsufficientData("ridge system is singular".into()))?;
        (beta, true)
    };

    let model = LinearModel {
        lags,
        intercept: beta[0],
        weights: beta.iter().skip(1).copied().collect(),
        ridge,
    };
    if !model.intercept.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InsufficientData("linear fit produced non-finite coefficients".into()));
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub raw: f64,
    /// `raw` clamped to the valid score range.
    pub value: f64,
}

impl LinearModel {
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.lags {
            return Err(Error::InvalidArgument(format!(
                "expected {} lagged scores, got {}",
                self.lags,
                x.len()
            )));
        }
        Ok(self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Predicts next month's score, clamped to `[0, max_score]` with the raw value kept.
pub fn predict_score(model: &LinearModel, x: &[f64], max_score: f64) -> Result<Prediction> {
    let raw = model.predict_raw(x)?;
    Ok(Prediction {
        raw,
        value: raw.clamp(0.0, max_score),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// `None` when the truths have zero variance.
    pub r2: Option<f64>,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
    pub n: usize,
}

pub fn evaluate(preds: &[f64], truths: &[f64]) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData("nothing to evaluate".into()));
    }
    let n = preds.len() as f64;
    let mse = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let mean_t = truths.iter().sum::<f64>() / n;
    let mean_p = preds.iter().sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean_t).powi(2)).sum();
    let ss_pred: f64 = preds.iter().map(|p| (p - mean_p).powi(2)).sum();
    let cov: f64 = preds.iter().zip(truths).map(|(p, t)| (p - mean_p) * (t - mean_t)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - mse * n / ss_tot);
    let pearson = (ss_tot > 0.0 && ss_pred > 0.0).then(|| (cov / (ss_tot * ss_pred).sqrt()).clamp(-1.0, 1.0));
    Ok(MetricsReport {
        mse,
        r2,
        pearson,
        n: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn month(s: &str) -> Month {
        s.parse().unwrap()
    }

    fn history(anm: &str, start: &str, scores: &[f64]) -> ScoreHistory {
        let start = month(start);
        let mut h = ScoreHistory::new();
        h.insert(
            anm.into(),
            scores.iter().enumerate().map(|(i, &s)| (start.offset(i as i64), s)).collect(),
        );
        h
    }

    fn row(x: Vec<f64>, y: f64) -> LagFeatures {
        LagFeatures {
            anm_id: "a".into(),
            target_month: month("2020-01"),
            x,
            y: Some(y),
        }
    }

    #[test]
    fn sliding_window_counts() {
        let h = history("a", "2020-01", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let rows = build_features(&h, 6);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].x, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(rows[0].y, Some(0.7));
        assert_eq!(rows[1].target_month, month("2020-08"));

        let h6 = history("a", "2020-01", &[0.1; 6]);
        assert!(build_features(&h6, 6).is_empty());
        assert!(inference_features(&h6, "a", month("2020-07"), 6).is_some());
        assert!(inference_features(&h6, "a", month("2020-08"), 6).is_none());
    }

    #[test]
    fn gaps_skip_rows() {
        let mut h = history("a", "2020-01", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        h.get_mut("a").unwrap().remove(&month("2020-04"));
        // Targets 2020-07..09 all need April in their window.
        assert!(build_features(&h, 6).is_empty());
        let short: Vec<Month> = build_features(&h, 3).iter().map(|r| r.target_month).collect();
        assert_eq!(short, vec![month("2020-08"), month("2020-09")]);
    }

    #[test]
    fn exact_linear_data() {
        let rows: Vec<LagFeatures> = (0..20)
            .map(|i| {
                let x: Vec<f64> = (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0).collect();
                let y = 0.5 * x[5] + 0.1;
                row(x, y)
            })
            .collect();
        let m = fit_linear(&rows).unwrap();
        assert!(!m.ridge);
        assert!((m.intercept - 0.1).abs() < 1e-10);
        for (j, w) in m.weights.iter().enumerate() {
            let want = if j == 5 { 0.5 } else { 0.0 };
            assert!((w - want).abs() < 1e-10, "w{j} = {w}");
        }
        let preds: Vec<f64> = rows.iter().map(|r| m.predict_raw(&r.x).unwrap()).collect();
        let truths: Vec<f64> = rows.iter().map(|r| r.y.unwrap()).collect();
        assert!(evaluate(&preds, &truths).unwrap().mse < 1e-16);
    }

    #[test]
    fn constant_targets() {
        let rows: Vec<LagFeatures> = (0..30)
            .map(|i| row((0..6).map(|j| ((i * 5 + j * 2) % 13) as f64 / 7.0).collect(), 1.3))
            .collect();
        let m = fit_linear(&rows).unwrap();
        assert!((m.intercept - 1.3).abs() < 1e-9);
        assert!(m.weights.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn rank_deficient_uses_ridge() {
        let rows: Vec<LagFeatures> = (0..10).map(|i| row(vec![1.0, 1.0], i as f64)).collect();
        let m = fit_linear(&rows).unwrap();
        assert!(m.ridge);
        let few = vec![row(vec![1.0, 2.0], 1.0)];
        assert!(fit_linear(&few).unwrap().ridge);
        assert!(matches!(fit_linear(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn prediction_and_clamp() {
        let flat = LinearModel {
            lags: 6,
            weights: vec![0.0; 6],
            intercept: 0.7,
            ridge: false,
        };
        assert_eq!(predict_score(&flat, &[3.0; 6], 11f64.sqrt()).unwrap().value, 0.7);
        let last = LinearModel {
            lags: 6,
            weights: vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            intercept: 0.0,
            ridge: false,
        };
        assert_eq!(predict_score(&last, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.2], 11f64.sqrt()).unwrap().value, 1.2);
        let neg = LinearModel {
            intercept: -0.05,
            ..flat.clone()
        };
        let p = predict_score(&neg, &[0.0; 6], 11f64.sqrt()).unwrap();
        assert_eq!(p.value, 0.0);
        assert_eq!(p.raw, -0.05);
        assert!(predict_score(&flat, &[0.0; 5], 1.0).is_err());
    }

    #[test]
    fn metric_examples() {
        let t = [0.3, 1.2, 2.0, 0.7];
        let m = evaluate(&t, &t).unwrap();
        assert_eq!((m.mse, m.r2, m.pearson), (0.0, Some(1.0), Some(1.0)));
        let m = evaluate(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((m.pearson.unwrap() + 1.0).abs() < 1e-12);
        let mean = t.iter().sum::<f64>() / 4.0;
        let m = evaluate(&[mean; 4], &t).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-12);
        assert_eq!(m.pearson, None);
        let m = evaluate(&[1.0, 2.0], &[5.0, 5.0]).unwrap();
        assert_eq!((m.r2, m.pearson), (None, None));
        assert!(evaluate(&[1.0], &[1.0, 2.0]).is_err());
        assert!(evaluate(&[], &[]).is_err());
        let a = [0.1, 0.5, 0.2, 0.9];
        let b = [0.3, 0.4, 0.1, 0.7];
        assert!((evaluate(&a, &b).unwrap().pearson.unwrap() - evaluate(&b, &a).unwrap().pearson.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn coefficients_are_locally_optimal() {
        let rows: Vec<LagFeatures> = (0..40)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|j| (((i * 13 + j * 7) % 17) as f64 / 9.0).sin().abs()).collect();
                let y = 0.2 + 0.3 * x[0] - 0.1 * x[2] + (((i * 31) % 7) as f64 - 3.0) / 50.0;
                row(x, y)
            })
            .collect();
        let m = fit_linear(&rows).unwrap();
        let mse = |m: &LinearModel| {
            rows.iter()
                .map(|r| (m.predict_raw(&r.x).unwrap() - r.y.unwrap()).powi(2))
                .sum::<f64>()
                / rows.len() as f64
        };
        let base = mse(&m);
        for j in 0..=3 {
            for d in [-1e-3, 1e-3] {
                let mut p = m.clone();
                if j == 0 {
                    p.intercept += d;
                } else {
                    p.weights[j - 1] += d;
                }
                assert!(mse(&p) >= base);
            }
        }
        let truths: Vec<f64> = rows.iter().map(|r| r.y.unwrap()).collect();
        let mean = truths.iter().sum::<f64>() / truths.len() as f64;
        assert!(base <= evaluate(&vec![mean; truths.len()], &truths).unwrap().mse);
    }
}
