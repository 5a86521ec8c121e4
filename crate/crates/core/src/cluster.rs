//! k-means over raw percentage vectors, rule-importance partition and
//! level-0/1/2 cluster interpretations.
//!
//! Clustering runs on percentages, not on probabilities: probabilities are
//! relative grades, while clusters should capture absolute behaviour. A fitted
//! [`ClusterModel`] is frozen for `refit_period` months after its fit month;
//! assigning a later month fails with [`Error::StaleModel`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};
use crate::kde::{non_diligence_prob, KdeModel, SUPPORT_MAX};
use crate::rules::{PercentageMatrix, RuleSet};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_REFIT_PERIOD: u32 = 6;
pub const DEFAULT_IMPORTANCE_THRESHOLDS: (f64, f64) = (5.0, 15.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansOptions {
            k,
            seed,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

struct LloydRun {
    fit: KMeansFit,
    /// Inertia after each assignment step.
    #[cfg_attr(not(test), allow(dead_code))]
    trace: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let dim = points[0].len();
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let assigned: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centers)).collect();
        trace.push(assigned.iter().map(|(_, d)| d).sum());
        let new_labels: Vec<usize> = assigned.iter().map(|(l, _)| *l).collect();
        if new_labels == labels || iterations >= max_iter {
            labels = new_labels;
            break;
        }
        labels = new_labels;
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            // An empty cluster keeps its previous center.
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    LloydRun {
        fit: KMeansFit {
            centers,
            labels,
            inertia,
            iterations,
        },
        trace,
    }
}

/// True when every coordinate is within [0, 1], which suggests probabilities
/// were passed where percentages belong.
pub fn looks_like_probabilities(vectors: &[Vec<f64>]) -> bool {
    !vectors.is_empty() && vectors.iter().flatten().all(|v| (0.0..=1.0).contains(v))
}

fn validate_points(vectors: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} vectors cannot form {k} clusters",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("vectors must share a nonzero dimension".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("vectors contain non-finite values".into()));
    }
    if looks_like_probabilities(vectors) {
        log::warn!("all clustering inputs lie in [0, 1]; k-means expects raw percentages on a 0-100 scale");
    }
    Ok(())
}

fn best_of_restarts(vectors: &[Vec<f64>], opts: &KMeansOptions, warm: Option<Vec<Vec<f64>>>) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansFit> = None;
    let mut consider = |fit: KMeansFit| {
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    };
    for _ in 0..opts.restarts.max(1) {
        let init = kmeans_plus_plus(vectors, opts.k, &mut rng);
        consider(lloyd(vectors, init, opts.max_iter).fit);
    }
    if let Some(init) = warm {
        consider(lloyd(vectors, init, opts.max_iter).fit);
    }
    best.expect("at least one restart")
}

/// Lloyd's algorithm with k-means++ seeding, best of `opts.restarts` runs by inertia.
pub fn fit_kmeans(vectors: &[Vec<f64>], opts: &KMeansOptions) -> Result<KMeansFit> {
    validate_points(vectors, opts.k)?;
    Ok(best_of_restarts(vectors, opts, None))
}

/// Inertia for each `k` in `1..=k_max`.
///
/// Each `k > 1` also runs one warm start from the best `k - 1` centers plus
/// the point farthest from them, so the sequence never increases.
pub fn elbow_scan(vectors: &[Vec<f64>], k_max: usize, seed: u64, restarts: usize) -> Result<Vec<(usize, f64)>> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    validate_points(vectors, k_max)?;
    let mut out = Vec::with_capacity(k_max);
    let mut prev: Option<KMeansFit> = None;
    for k in 1..=k_max {
        let opts = KMeansOptions {
            k,
            seed: seed.wrapping_add(k as u64),
            restarts,
            max_iter: DEFAULT_MAX_ITER,
        };
        let warm = prev.as_ref().map(|p| {
            let far = vectors
                .iter()
                .max_by(|a, b| nearest(a, &p.centers).1.total_cmp(&nearest(b, &p.centers).1))
                .expect("non-empty");
            let mut c = p.centers.clone();
            c.push(far.clone());
            c
        });
        let fit = best_of_restarts(vectors, &opts, warm);
        out.push((k, fit.inertia));
        prev = Some(fit);
    }
    Ok(out)
}

/// The `k` whose step from `k - 1` has the largest relative inertia drop.
pub fn elbow_k(scan: &[(usize, f64)]) -> Option<usize> {
    scan.windows(2)
        .filter(|w| w[0].1 > 0.0)
        .map(|w| (w[1].0, (w[0].1 - w[1].1) / w[0].1))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Per-rule means used to fill missing coordinates before clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub means: Vec<f64>,
}

impl Imputer {
    pub fn fit(matrix: &PercentageMatrix) -> Result<Self> {
        let means = (0..matrix.rule_count())
            .map(|idx| {
                let col = matrix.column(idx);
                if col.is_empty() {
                    Err(Error::InsufficientData(format!(
                        "rule {} has no present percentages to impute from",
                        idx + 1
                    )))
                } else {
                    Ok(col.iter().sum::<f64>() / col.len() as f64)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Imputer { means })
    }

    /// Filled vector plus a flag per coordinate that was imputed.
    pub fn apply(&self, row: &[Option<f64>]) -> (Vec<f64>, Vec<bool>) {
        row.iter()
            .zip(&self.means)
            .map(|(v, m)| (v.unwrap_or(*m), v.is_none()))
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportancePartition {
    pub most: BTreeSet<u32>,
    pub less: BTreeSet<u32>,
    pub least: BTreeSet<u32>,
    /// Population standard deviation per rule, rule 1 first.
    pub stddevs: Vec<f64>,
    pub thresholds: (f64, f64),
}

impl ImportancePartition {
    pub fn class_of(&self, rule_id: u32) -> Option<Importance> {
        if self.most.contains(&rule_id) {
            Some(Importance::Most)
        } else if self.less.contains(&rule_id) {
            Some(Importance::Less)
        } else if self.least.contains(&rule_id) {
            Some(Importance::Least)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Importance {
    Most,
    Less,
    Least,
}

impl fmt::Display for Importance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Importance::Most => "most",
            Importance::Less => "less",
            Importance::Least => "least",
        })
    }
}

/// Splits rules by the spread of their present percentages: stddev below
/// `low` is least important, above `high` most important, otherwise less.
pub fn partition_rule_importance(matrix: &PercentageMatrix, thresholds: (f64, f64)) -> Result<ImportancePartition> {
    let (low, high) = thresholds;
    if low > high {
        return Err(Error::InvalidArgument(format!(
            "importance thresholds ({low}, {high}) need low <= high"
        )));
    }
    if matrix.is_empty() {
        return Err(Error::InsufficientData("empty percentage matrix".into()));
    }
    let mut part = ImportancePartition {
        most: BTreeSet::new(),
        less: BTreeSet::new(),
        least: BTreeSet::new(),
        stddevs: Vec::new(),
        thresholds,
    };
    for idx in 0..matrix.rule_count() {
        let id = idx as u32 + 1;
        let col = matrix.column(idx);
        if col.is_empty() {
            return Err(Error::InsufficientData(format!("rule {id} has no present percentages")));
        }
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        part.stddevs.push(sd);
        if sd < low {
            part.least.insert(id);
        } else if sd > high {
            part.most.insert(id);
        } else {
            part.less.insert(id);
        }
    }
    Ok(part)
}

/// Maps each center coordinate through its rule's probability transform.
pub fn center_diligence_vectors(centers: &[Vec<f64>], kdes: &[KdeModel], rules: &RuleSet) -> Result<Vec<Vec<f64>>> {
    if kdes.len() != rules.len() {
        return Err(Error::InvalidArgument(format!(
            "{} KDE models for {} rules",
            kdes.len(),
            rules.len()
        )));
    }
    centers
        .iter()
        .map(|c| {
            if c.len() != rules.len() {
                return Err(Error::InvalidArgument(format!(
                    "center has {} coordinates for {} rules",
                    c.len(),
                    rules.len()
                )));
            }
            c.iter()
                .zip(kdes)
                .zip(rules.rules())
                .map(|((&p, kde), rule)| {
                    let p = p.clamp(0.0, SUPPORT_MAX);
                    Ok(non_diligence_prob(kde, Some(p), rule.polarity)?.expect("present input"))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    Diligent,
    NonDiligent,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Diligent => "diligent",
            Tag::NonDiligent => "non-diligent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatement {
    pub cluster: usize,
    /// Mean center probability over all rules.
    pub mean_probability: f64,
    /// Level 0 only.
    pub overall: Option<Tag>,
    /// Levels 1 and 2: one tag per rule of the level's importance class.
    pub rules: BTreeMap<u32, Tag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub level: u8,
    /// Level 0: the mean of cluster means each cluster is compared with.
    pub reference: Option<f64>,
    pub clusters: Vec<ClusterStatement>,
}

/// Level 0 tags a cluster non-diligent when its mean center probability
/// exceeds the mean over clusters (strict `>`). Levels 1 and 2 tag a cluster
/// non-diligent on rule `r` when its probability for `r` exceeds the mean
/// over clusters for `r`; level 1 covers the most important rules and
/// level 2 the less important ones.
pub fn interpret(center_diligence: &[Vec<f64>], partition: &ImportancePartition, level: u8) -> Result<Interpretation> {
    if level > 2 {
        return Err(Error::InvalidArgument(format!("interpretation level {level} is not 0, 1 or 2")));
    }
    if center_diligence.is_empty() {
        return Err(Error::InvalidArgument("no cluster centers to interpret".into()));
    }
    let k = center_diligence.len() as f64;
    let means: Vec<f64> = center_diligence
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
        .collect();
    let reference = means.iter().sum::<f64>() / k;

    let targets = match level {
        1 => Some(&partition.most),
        2 => Some(&partition.less),
        _ => None,
    };
    let clusters = center_diligence
        .iter()
        .zip(&means)
        .enumerate()
        .map(|(cluster, (probs, &mean))| {
            let mut statement = ClusterStatement {
                cluster,
                mean_probability: mean,
                overall: None,
                rules: BTreeMap::new(),
            };
            match targets {
                None => {
                    statement.overall = Some(if mean > reference { Tag::NonDiligent } else { Tag::Diligent });
                }
                Some(ids) => {
                    for &id in ids {
                        let idx = id as usize - 1;
                        let avg = center_diligence.iter().map(|c| c[idx]).sum::<f64>() / k;
                        let tag = if probs[idx] > avg { Tag::NonDiligent } else { Tag::Diligent };
                        statement.rules.insert(id, tag);
                    }
                }
            }
            statement
        })
        .collect();
    Ok(Interpretation {
        level,
        reference: (level == 0).then_some(reference),
        clusters,
    })
}

/// A fitted, frozen clustering with everything needed to explain it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub fit_month: Month,
    pub refit_period: u32,
    pub centers: Vec<Vec<f64>>,
    pub center_diligence: Vec<Vec<f64>>,
    pub imputer: Imputer,
    pub inertia: f64,
    pub assignments: BTreeMap<String, BTreeMap<Month, usize>>,
    pub importance: ImportancePartition,
    pub interpretations: Vec<Interpretation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub refit_period: u32,
    pub importance_thresholds: (f64, f64),
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: DEFAULT_K,
            seed: 0,
            restarts: DEFAULT_RESTARTS,
            refit_period: DEFAULT_REFIT_PERIOD,
            importance_thresholds: DEFAULT_IMPORTANCE_THRESHOLDS,
        }
    }
}

impl ClusterModel {
    /// Fits on every row of `matrix`; `fit_month` starts the freeze period.
    pub fn fit(
        matrix: &PercentageMatrix,
        kdes: &[KdeModel],
        rules: &RuleSet,
        fit_month: Month,
        cfg: &ClusterConfig,
    ) -> Result<Self> {
        let imputer = Imputer::fit(matrix)?;
        let keys: Vec<(String, Month)> = matrix.rows().map(|(a, m, _)| (a.to_string(), m)).collect();
        let vectors: Vec<Vec<f64>> = matrix.rows().map(|(_, _, r)| imputer.apply(r).0).collect();
        let fit = fit_kmeans(
            &vectors,
            &KMeansOptions {
                k: cfg.k,
                seed: cfg.seed,
                restarts: cfg.restarts,
                max_iter: DEFAULT_MAX_ITER,
            },
        )?;
        let center_diligence = center_diligence_vectors(&fit.centers, kdes, rules)?;
        let importance = partition_rule_importance(matrix, cfg.importance_thresholds)?;
        let interpretations = (0..=2)
            .map(|level| interpret(&center_diligence, &importance, level))
            .collect::<Result<_>>()?;
        let mut assignments: BTreeMap<String, BTreeMap<Month, usize>> = BTreeMap::new();
        for ((anm, month), label) in keys.into_iter().zip(&fit.labels) {
            assignments.entry(anm).or_default().insert(month, *label);
        }
        Ok(ClusterModel {
            k: cfg.k,
            fit_month,
            refit_period: cfg.refit_period,
            centers: fit.centers,
            center_diligence,
            imputer,
            inertia: fit.inertia,
            assignments,
            importance,
            interpretations,
        })
    }

    /// Last month the model may be used for (`fit_month + refit_period - 1`).
    pub fn expires_after(&self) -> Month {
        self.fit_month.offset(self.refit_period as i64 - 1)
    }

    pub fn check_fresh(&self, month: Month) -> Result<()> {
        if self.fit_month.months_until(month) >= self.refit_period as i64 {
            return Err(Error::StaleModel {
                fit_month: self.fit_month.to_string(),
                month: month.to_string(),
                refit_period: self.refit_period,
            });
        }
        Ok(())
    }

    /// Nearest center by Euclidean distance, ties to the lowest id.
    pub fn assign_cluster(&self, vector: &[f64], month: Month) -> Result<usize> {
        self.check_fresh(month)?;
        if vector.len() != self.imputer.means.len() {
            return Err(Error::InvalidArgument(format!(
                "vector has {} coordinates, model expects {}",
                vector.len(),
                self.imputer.means.len()
            )));
        }
        Ok(nearest(vector, &self.centers).0)
    }

    /// Like [`assign_cluster`](Self::assign_cluster) with missing entries imputed from training means.
    pub fn assign_row(&self, row: &[Option<f64>], month: Month) -> Result<usize> {
        let (filled, _) = self.imputer.apply(row);
        self.assign_cluster(&filled, month)
    }

    pub fn interpretation(&self, level: u8) -> Option<&Interpretation> {
        self.interpretations.iter().find(|i| i.level == level)
    }

    /// Clusters tagged diligent at level 0.
    pub fn good_clusters(&self) -> BTreeSet<usize> {
        self.interpretation(0)
            .map(|i| {
                i.clusters
                    .iter()
                    .filter(|s| s.overall == Some(Tag::Diligent))
                    .map(|s| s.cluster)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// One-line description of a cluster across all three levels.
    pub fn describe(&self, cluster: usize) -> String {
        let mut parts = Vec::new();
        if let Some(tag) = self
            .interpretation(0)
            .and_then(|i| i.clusters.get(cluster))
            .and_then(|s| s.overall)
        {
            parts.push(format!("L0 {tag}"));
        }
        for level in [1u8, 2] {
            let Some(s) = self.interpretation(level).and_then(|i| i.clusters.get(cluster)) else {
                continue;
            };
            let ids = |t: Tag| -> Vec<String> {
                s.rules
                    .iter()
                    .filter(|(_, &v)| v == t)
                    .map(|(id, _)| id.to_string())
                    .collect()
            };
            let bad = ids(Tag::NonDiligent);
            let good = ids(Tag::Diligent);
            if bad.is_empty() && good.is_empty() {
                continue;
            }
            let mut line = format!("L{level}");
            if !bad.is_empty() {
                line.push_str(&format!(" non-diligent on {}", bad.join(",")));
            }
            if !good.is_empty() {
                line.push_str(&format!(" diligent on {}", good.join(",")));
            }
            parts.push(line);
        }
        parts.join("; ")
    }
}
