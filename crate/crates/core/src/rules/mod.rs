//! Configurable non-diligence rules and the per-worker monthly percentage matrix.
//!
//! A rule yields `100 * |numerator| / |denominator|` over one worker-month of
//! records, where the numerator is only evaluated on records that already
//! match the denominator. A window without denominator matches yields `None`
//! (missing), never 0 or 100.
//!
//! Rule files are TOML with one `[[rule]]` table per rule:
//!
//! ```toml
//! [[rule]]
//! id = 1
//! name = "bp-fixed-values"
//! kind = "known-non-diligence"      # or "contradiction"
//! polarity = "high-bad"             # or "low-bad"
//! granularity = 2.0                 # optional rounding step for numeric values
//! bandwidth = 3.0                   # optional KDE bandwidth override
//! denominator = "(present bp)"
//! numerator = "(pair-in bp [(120,80),(110,70)])"
//! ```
//!
//! See [`predicate`] for the expression grammar.

pub mod predicate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{HealthRecord, Month, Window};
use crate::error::{Error, Result};
pub use predicate::{parse_predicate, Literal, Predicate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    KnownNonDiligence,
    Contradiction,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::KnownNonDiligence => "known-non-diligence",
            RuleKind::Contradiction => "contradiction",
        })
    }
}

/// Which percentage extreme means certain non-diligence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// 100% is certainly non-diligent.
    HighBad,
    /// 0% is certainly non-diligent.
    LowBad,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::HighBad => "high-bad",
            Polarity::LowBad => "low-bad",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDefinition {
    pub id: u32,
    pub name: String,
    pub kind: RuleKind,
    pub polarity: Polarity,
    pub numerator: Predicate,
    pub denominator: Predicate,
    pub granularity: Option<f64>,
    pub bandwidth: Option<f64>,
}

/// Percentage for one rule over one worker-month, `None` when no record
/// matches the denominator.
pub fn evaluate_rule(rule: &RuleDefinition, window: &[&HealthRecord]) -> Option<f64> {
    let mut denominator = 0usize;
    let mut numerator = 0usize;
    for r in window {
        if rule.denominator.matches(r, window, rule.granularity) {
            denominator += 1;
            if rule.numerator.matches(r, window, rule.granularity) {
                numerator += 1;
            }
        }
    }
    (denominator > 0).then(|| 100.0 * numerator as f64 / denominator as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<RuleDefinition>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    rule: Vec<RawRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: u32,
    name: String,
    kind: RuleKind,
    polarity: Polarity,
    numerator: String,
    denominator: String,
    #[serde(default)]
    granularity: Option<f64>,
    #[serde(default)]
    bandwidth: Option<f64>,
}

impl RuleSet {
    /// Validates ids: unique, non-empty, numbered `1..=R` in file order.
    pub fn new(rules: Vec<RuleDefinition>) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Config("rule set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &rules {
            if !seen.insert(r.id) {
                return Err(Error::Rule {
                    rule: format!("{} ({})", r.id, r.name),
                    message: format!("duplicate id {}", r.id),
                });
            }
        }
        for (i, r) in rules.iter().enumerate() {
            let label = format!("{} ({})", r.id, r.name);
            if r.id as usize != i + 1 {
                return Err(Error::Rule {
                    rule: label,
                    message: format!("ids must run 1..=R in order; expected {}", i + 1),
                });
            }
            if r.name.trim().is_empty() {
                return Err(Error::Rule {
                    rule: label,
                    message: "name must not be empty".into(),
                });
            }
            if let Some(g) = r.granularity {
                if !(g.is_finite() && g >= 0.0) {
                    return Err(Error::Rule {
                        rule: label,
                        message: format!("granularity {g} must be a nonnegative number"),
                    });
                }
            }
            if let Some(b) = r.bandwidth {
                if !(b.is_finite() && b > 0.0) {
                    return Err(Error::Rule {
                        rule: label,
                        message: format!("bandwidth {b} must be positive"),
                    });
                }
            }
        }
        Ok(RuleSet { rules })
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let file: RuleFile = toml::from_str(src).map_err(|e| Error::Config(format!("rule file: {e}")))?;
        let mut rules = Vec::with_capacity(file.rule.len());
        for raw in file.rule {
            let label = format!("{} ({})", raw.id, raw.name);
            let pred = |which: &str, src: &str| {
                parse_predicate(src).map_err(|message| Error::Rule {
                    rule: label.clone(),
                    message: format!("{which}: {message}"),
                })
            };
            rules.push(RuleDefinition {
                id: raw.id,
                numerator: pred("numerator", &raw.numerator)?,
                denominator: pred("denominator", &raw.denominator)?,
                name: raw.name,
                kind: raw.kind,
                polarity: raw.polarity,
                granularity: raw.granularity.filter(|g| *g != 0.0),
                bandwidth: raw.bandwidth,
            });
        }
        RuleSet::new(rules)
    }

    pub fn rules(&self) -> &[RuleDefinition] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&RuleDefinition> {
        (id as usize).checked_sub(1).and_then(|i| self.rules.get(i))
    }

    pub fn polarities(&self) -> Vec<Polarity> {
        self.rules.iter().map(|r| r.polarity).collect()
    }
}

/// Reads and validates a rule file.
pub fn parse_rule_config(path: impl AsRef<Path>) -> Result<RuleSet> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RuleSet::from_toml_str(&src)
}

/// Raw percentages per `(worker, month)`, one column per rule in rule-id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PercentageMatrix {
    rule_count: usize,
    entries: BTreeMap<(String, Month), Vec<Option<f64>>>,
}

impl PercentageMatrix {
    pub fn new(rule_count: usize) -> Self {
        PercentageMatrix {
            rule_count,
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a row. Present values must lie in [0, 100].
    pub fn insert(&mut self, anm_id: &str, month: Month, row: Vec<Option<f64>>) -> Result<()> {
        if row.len() != self.rule_count {
            return Err(Error::InvalidArgument(format!(
                "row has {} entries, expected {}",
                row.len(),
                self.rule_count
            )));
        }
        for v in row.iter().flatten() {
            if !(0.0..=100.0).contains(v) {
                return Err(Error::Domain {
                    value: *v,
                    low: 0.0,
                    high: 100.0,
                });
            }
        }
        self.entries.insert((anm_id.to_string(), month), row);
        Ok(())
    }

    pub fn rule_count(&self) -> usize {
        self.rule_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn anms(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(a, _)| a.as_str()).collect()
    }

    pub fn months(&self) -> BTreeSet<Month> {
        self.entries.keys().map(|(_, m)| *m).collect()
    }

    pub fn row(&self, anm_id: &str, month: Month) -> Option<&[Option<f64>]> {
        self.entries.get(&(anm_id.to_string(), month)).map(Vec::as_slice)
    }

    /// Entry for a 1-based rule id.
    pub fn get(&self, anm_id: &str, month: Month, rule_id: u32) -> Option<Option<f64>> {
        let idx = (rule_id as usize).checked_sub(1)?;
        self.row(anm_id, month).and_then(|r| r.get(idx).copied())
    }

    /// Rows in `(worker, month)` order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, Month, &[Option<f64>])> {
        self.entries.iter().map(|((a, m), r)| (a.as_str(), *m, r.as_slice()))
    }

    /// Present values of the rule at 0-based column `idx`.
    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.entries.values().filter_map(|r| r[idx]).collect()
    }

    /// Copy restricted to months satisfying `keep`.
    pub fn filter_months(&self, keep: impl Fn(Month) -> bool) -> Self {
        PercentageMatrix {
            rule_count: self.rule_count,
            entries: self
                .entries
                .iter()
                .filter(|((_, m), _)| keep(*m))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Evaluates every rule on every window.
pub fn percentage_matrix(rules: &RuleSet, windows: &[Window<'_>]) -> PercentageMatrix {
    let mut m = PercentageMatrix::new(rules.len());
    for w in windows {
        let row = rules.rules().iter().map(|r| evaluate_rule(r, &w.records)).collect();
        m.insert(w.anm_id, w.month, row)
            .expect("rule percentages always lie in [0, 100]");
    }
    m
}
