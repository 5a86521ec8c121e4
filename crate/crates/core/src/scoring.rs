//! Behaviour vectors, the scalar diligence score, ranking and bucketing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};
use crate::kde::{non_diligence_prob, KdeModel};
use crate::rules::{PercentageMatrix, RuleSet};

/// Per-rule non-diligence probabilities for one worker-month.
///
/// Missing rules carry probability 0 and a set mask bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonDiligenceVector {
    pub anm_id: String,
    pub month: Month,
    pub probs: Vec<f64>,
    pub missing_mask: Vec<bool>,
}

impl NonDiligenceVector {
    /// Mask rendered as a string of `0`/`1`, rule 1 first.
    pub fn mask_string(&self) -> String {
        self.missing_mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiligenceScore {
    pub anm_id: String,
    pub month: Month,
    pub value: f64,
}

pub fn behavior_vector(
    anm_id: &str,
    month: Month,
    matrix: &PercentageMatrix,
    models: &[KdeModel],
    rules: &RuleSet,
) -> Result<NonDiligenceVector> {
    let row = matrix
        .row(anm_id, month)
        .ok_or_else(|| Error::NotFound(format!("no percentages for {anm_id} in {month}")))?;
    if models.len() != rules.len() || row.len() != rules.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rules, {} KDE models, {} matrix columns",
            rules.len(),
            models.len(),
            row.len()
        )));
    }
    let mut probs = Vec::with_capacity(row.len());
    let mut missing_mask = Vec::with_capacity(row.len());
    for ((p, model), rule) in row.iter().zip(models).zip(rules.rules()) {
        match non_diligence_prob(model, *p, rule.polarity)? {
            Some(prob) => {
                probs.push(prob);
                missing_mask.push(false);
            }
            None => {
                probs.push(0.0);
                missing_mask.push(true);
            }
        }
    }
    Ok(NonDiligenceVector {
        anm_id: anm_id.to_string(),
        month,
        probs,
        missing_mask,
    })
}

/// Euclidean norm of the behaviour vector; 0 is ideal, `sqrt(R)` worst.
pub fn diligence_score(v: &NonDiligenceVector) -> DiligenceScore {
    DiligenceScore {
        anm_id: v.anm_id.clone(),
        month: v.month,
        value: l2_norm(&v.probs),
    }
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedScore {
    /// 1 is the most diligent.
    pub rank: usize,
    pub score: DiligenceScore,
}

/// Sorts ascending by score; ties go to the lexicographically smaller id.
pub fn rank(scores: &[DiligenceScore]) -> Result<Vec<RankedScore>> {
    let mut seen = BTreeSet::new();
    for s in scores {
        if !seen.insert(s.anm_id.as_str()) {
            return Err(Error::Duplicate(format!("worker {} appears twice", s.anm_id)));
        }
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.anm_id.cmp(&b.anm_id)));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, score)| RankedScore { rank: i + 1, score })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bucket {
    Diligent,
    NonDiligent,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Diligent => "diligent",
            Bucket::NonDiligent => "non-diligent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BucketBasis {
    TopBand,
    BottomBand,
    MiddleResolvedByTrend,
}

impl fmt::Display for BucketBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BucketBasis::TopBand => "top-band",
            BucketBasis::BottomBand => "bottom-band",
            BucketBasis::MiddleResolvedByTrend => "middle-trend",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub anm_id: String,
    pub bucket: Bucket,
    pub basis: BucketBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFractions {
    pub top: f64,
    pub bottom: f64,
}

impl Default for BandFractions {
    fn default() -> Self {
        BandFractions { top: 0.30, bottom: 0.55 }
    }
}

/// Sizes of the (top, middle, bottom) bands for `n` workers. Each outer band
/// is `round_half_up(fraction * n)`, then capped so the three partition `n`.
pub fn band_sizes(n: usize, fractions: BandFractions) -> (usize, usize, usize) {
    let round = |x: f64| ((x + 0.5).floor().max(0.0) as usize).min(n);
    let top = round(fractions.top * n as f64);
    let bottom = round(fractions.bottom * n as f64).min(n - top);
    (top, n - top - bottom, bottom)
}

/// Ordinary least-squares slope of `ys` against `0, 1, 2, ...`; 0 for fewer than two points.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let mean_x = (n - 1) as f64 / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Buckets ranked workers.
///
/// The top band is diligent and the bottom band non-diligent. A middle-band
/// worker is diligent only if the least-squares slope of `history[anm]`
/// (chronological scores) is `<= 0` and every id in `cluster_history[anm]`
/// is in `good_clusters`. A middle-band worker without score history is
/// non-diligent.
pub fn bucketize(
    ranked: &[RankedScore],
    history: &BTreeMap<String, Vec<f64>>,
    cluster_history: &BTreeMap<String, Vec<usize>>,
    good_clusters: &BTreeSet<usize>,
    fractions: BandFractions,
) -> Vec<BucketAssignment> {
    let (top, middle, _) = band_sizes(ranked.len(), fractions);
    ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let anm_id = r.score.anm_id.clone();
            let (bucket, basis) = if i < top {
                (Bucket::Diligent, BucketBasis::TopBand)
            } else if i >= top + middle {
                (Bucket::NonDiligent, BucketBasis::BottomBand)
            } else {
                let improving = history
                    .get(&anm_id)
                    .filter(|h| !h.is_empty())
                    .is_some_and(|h| trend_slope(h) <= 0.0);
                let good = cluster_history
                    .get(&anm_id)
                    .is_none_or(|cs| cs.iter().all(|c| good_clusters.contains(c)));
                let bucket = if improving && good {
                    Bucket::Diligent
                } else {
                    Bucket::NonDiligent
                };
                (bucket, BucketBasis::MiddleResolvedByTrend)
            };
            BucketAssignment { anm_id, bucket, basis }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::KdeModel;
    use crate::rules::{Polarity, Predicate, RuleDefinition, RuleKind};
    use proptest::prelude::*;

    fn month() -> Month {
        "2020-06".parse().unwrap()
    }

    fn rules(polarities: &[Polarity]) -> RuleSet {
        RuleSet::new(
            polarities
                .iter()
                .enumerate()
                .map(|(i, &polarity)| RuleDefinition {
                    id: i as u32 + 1,
                    name: format!("r{}", i + 1),
                    kind: RuleKind::KnownNonDiligence,
                    polarity,
                    numerator: Predicate::Always,
                    denominator: Predicate::Always,
                    granularity: None,
                    bandwidth: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn vector(probs: Vec<f64>) -> NonDiligenceVector {
        NonDiligenceVector {
            anm_id: "a".into(),
            month: month(),
            missing_mask: vec![false; probs.len()],
            probs,
        }
    }

    fn score(id: &str, v: f64) -> DiligenceScore {
        DiligenceScore {
            anm_id: id.into(),
            month: month(),
            value: v,
        }
    }

    #[test]
    fn extremes_give_zero_and_one_vectors() {
        let pol: Vec<Polarity> = (0..11)
            .map(|i| if i % 3 == 0 { Polarity::LowBad } else { Polarity::HighBad })
            .collect();
        let rs = rules(&pol);
        let models: Vec<KdeModel> = (1..=11).map(|id| KdeModel::uniform(id, 0)).collect();
        let good: Vec<Option<f64>> = pol
            .iter()
            .map(|p| Some(if *p == Polarity::HighBad { 0.0 } else { 100.0 }))
            .collect();
        let bad: Vec<Option<f64>> = good.iter().map(|p| p.map(|v| 100.0 - v)).collect();
        let mut with_missing = good.clone();
        with_missing[4] = None;

        let mut m = PercentageMatrix::new(11);
        m.insert("good", month(), good).unwrap();
        m.insert("bad", month(), bad).unwrap();
        m.insert("gap", month(), with_missing).unwrap();

        let v = behavior_vector("good", month(), &m, &models, &rs).unwrap();
        assert_eq!(v.probs, vec![0.0; 11]);
        let v = behavior_vector("bad", month(), &m, &models, &rs).unwrap();
        assert_eq!(v.probs, vec![1.0; 11]);
        let v = behavior_vector("gap", month(), &m, &models, &rs).unwrap();
        assert_eq!(v.probs, vec![0.0; 11]);
        assert_eq!(v.mask_string(), "00001000000");

        assert!(matches!(
            behavior_vector("nobody", month(), &m, &models, &rs),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(diligence_score(&vector(vec![0.0; 11])).value, 0.0);
        assert!((diligence_score(&vector(vec![1.0; 11])).value - 11f64.sqrt()).abs() < 1e-15);
        assert!((11f64.sqrt() - 3.31662).abs() < 1e-5);
        let mut v = vec![0.0; 11];
        v[0] = 0.6;
        v[1] = 0.8;
        assert!((diligence_score(&vector(v)).value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_examples() {
        let r = rank(&[score("a", 0.2), score("b", 1.1), score("c", 0.2)]).unwrap();
        let ids: Vec<_> = r.iter().map(|r| r.score.anm_id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert_eq!(r.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(rank(&[score("z", 3.0)]).unwrap().len(), 1);
        let r = rank(&[score("q", 1.0), score("b", 1.0), score("m", 1.0)]).unwrap();
        let ids: Vec<_> = r.iter().map(|r| r.score.anm_id.as_str()).collect();
        assert_eq!(ids, ["b", "m", "q"]);
        assert!(matches!(rank(&[score("a", 1.0), score("a", 2.0)]), Err(Error::Duplicate(_))));
        let again: Vec<DiligenceScore> = r.iter().map(|x| x.score.clone()).collect();
        assert_eq!(rank(&again).unwrap(), r);
    }

    #[test]
    fn band_sizes_for_66() {
        assert_eq!(band_sizes(66, BandFractions::default()), (20, 10, 36));
        assert_eq!(band_sizes(0, BandFractions::default()), (0, 0, 0));
        assert_eq!(band_sizes(1, BandFractions::default()), (0, 0, 1));
        assert_eq!(band_sizes(10, BandFractions { top: 0.6, bottom: 0.6 }), (6, 0, 4));
    }

    #[test]
    fn trend_slope_values() {
        assert_eq!(trend_slope(&[1.0]), 0.0);
        assert!((trend_slope(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!(trend_slope(&[2.0, 1.5, 1.4, 1.0]) < 0.0);
        assert_eq!(trend_slope(&[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn middle_band_resolution() {
        let scores: Vec<DiligenceScore> = (0..66).map(|i| score(&format!("w{i:02}"), i as f64 / 30.0)).collect();
        let ranked = rank(&scores).unwrap();
        let middle: Vec<String> = (20..30).map(|i| format!("w{i:02}")).collect();
        let good: BTreeSet<usize> = [0].into();
        let mut history = BTreeMap::new();
        let mut clusters = BTreeMap::new();
        for (j, id) in middle.iter().enumerate() {
            let h: Vec<f64> = match j % 4 {
                0 => vec![2.0, 1.8, 1.5, 1.2],
                1 => vec![1.0, 1.2, 1.5, 1.9],
                2 => vec![2.0, 1.8, 1.5, 1.2],
                _ => vec![],
            };
            history.insert(id.clone(), h);
            clusters.insert(id.clone(), if j % 4 == 2 { vec![0, 2] } else { vec![0, 0] });
        }
        let buckets = bucketize(&ranked, &history, &clusters, &good, BandFractions::default());
        let count = |b: Bucket, basis: BucketBasis| buckets.iter().filter(|x| x.bucket == b && x.basis == basis).count();
        assert_eq!(count(Bucket::Diligent, BucketBasis::TopBand), 20);
        assert_eq!(count(Bucket::NonDiligent, BucketBasis::BottomBand), 36);
        for (j, id) in middle.iter().enumerate() {
            let b = buckets.iter().find(|b| &b.anm_id == id).unwrap();
            assert_eq!(b.basis, BucketBasis::MiddleResolvedByTrend);
            let want = if j % 4 == 0 { Bucket::Diligent } else { Bucket::NonDiligent };
            assert_eq!(b.bucket, want, "{id}");
        }
    }

    proptest! {
        #[test]
        fn score_bounds_and_monotonicity(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..16),
            idx in any::<proptest::sample::Index>(),
            bump in 1e-6f64..1.0,
        ) {
            let r = probs.len();
            let s = diligence_score(&vector(probs.clone())).value;
            prop_assert!(s >= 0.0 && s <= (r as f64).sqrt() + 1e-12);
            prop_assert_eq!(s == 0.0, probs.iter().all(|&p| p == 0.0));

            let mut rev = probs.clone();
            rev.reverse();
            prop_assert!((diligence_score(&vector(rev)).value - s).abs() < 1e-12);

            let i = idx.index(r);
            if probs[i] < 1.0 {
                let mut up = probs.clone();
                up[i] = (up[i] + bump).min(1.0);
                prop_assert!(diligence_score(&vector(up)).value > s);
            }
        }
    }
}
