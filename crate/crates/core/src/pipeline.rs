//! End-to-end commands: train, score, predict-eval, baseline, synth and report.
//!
//! Every command is deterministic in its inputs: maps are ordered, floats are
//! printed with fixed precision and all randomness is seeded from the config.
//! Layout under `output_dir`:
//!
//! ```text
//! models/kde_rule_NN.json   one per rule
//! models/cluster.json
//! models/linear.json
//! reports/...               text and CSV reports
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{anomaly_baseline, split_means, threshold_baseline, CombineMode, TagSplit};
use crate::cluster::{elbow_k, elbow_scan, ClusterModel};
use crate::config::{MonthRange, PipelineConfig};
use crate::data::{filter_anms, load_records_excluding, window_by_month, write_records, FilterReport, Month};
use crate::error::{Error, Result};
use crate::kde::{fit_models, Fallback, KdeModel};
use crate::predict::{
    build_features, evaluate, fit_linear, inference_features, predict_score, LinearModel, MetricsReport, ScoreHistory,
};
use crate::rules::{parse_rule_config, percentage_matrix, PercentageMatrix, Polarity, RuleSet};
use crate::scoring::{behavior_vector, bucketize, diligence_score, rank, Bucket, BucketBasis, DiligenceScore};
use crate::synth::{generate_cohort, ground_truth, write_ground_truth, CohortMetadata, CohortSpec};

/// Files written and the human-readable report of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub text: String,
}

/// A fitted KDE together with how its training data was selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeFile {
    pub rule_id: u32,
    pub rule_name: String,
    pub polarity: Polarity,
    pub excludes_filtered_anms: bool,
    pub excluded_months: Vec<Month>,
    pub training_window: MonthRange,
    pub model: KdeModel,
}

/// Records loaded, filtered and turned into percentages.
pub struct Prepared {
    pub rules: RuleSet,
    pub filter_report: FilterReport,
    pub matrix: PercentageMatrix,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let rules = parse_rule_config(&cfg.paths.rules)?;
    let records = load_records_excluding(&cfg.paths.records, &cfg.filter.excluded_months)?;
    let (kept, filter_report) = filter_anms(&records, &cfg.filter_config());
    let matrix = percentage_matrix(&rules, &window_by_month(&kept));
    Ok(Prepared {
        rules,
        filter_report,
        matrix,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&src).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

fn kde_path(cfg: &PipelineConfig, rule_id: u32) -> PathBuf {
    cfg.models_dir().join(format!("kde_rule_{rule_id:02}.json"))
}

fn cluster_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.models_dir().join("cluster.json")
}

fn linear_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.models_dir().join("linear.json")
}

fn is_numeric_cell(s: &str) -> bool {
    s.parse::<f64>().is_ok() || matches!(s, "n/a" | "unavailable" | "-")
}

/// Aligned text table: numeric columns right-aligned, the rest left-aligned.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let cells = |c: usize| rows.iter().filter_map(move |r| r.get(c));
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            cells(c)
                .chain(std::iter::once(&header[c]))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let numeric: Vec<bool> = (0..cols)
        .map(|c| rows.iter().any(|r| r.get(c).is_some()) && cells(c).all(|s| is_numeric_cell(s)))
        .collect();
    let line = |row: &[String]| {
        let mut out = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if numeric[c] {
                let _ = write!(out, "{cell:>w$}", w = widths[c]);
            } else {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(header).map_err(ser)?;
    for r in rows {
        w.write_record(r).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt4(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), f4)
}

/// Diligence score for every row of `matrix`.
pub fn score_history(matrix: &PercentageMatrix, kdes: &[KdeModel], rules: &RuleSet) -> Result<ScoreHistory> {
    let mut history = ScoreHistory::new();
    for (anm, month, _) in matrix.rows() {
        let v = behavior_vector(anm, month, matrix, kdes, rules)?;
        history
            .entry(anm.to_string())
            .or_default()
            .insert(month, diligence_score(&v).value);
    }
    Ok(history)
}

fn training_matrix(cfg: &PipelineConfig, prepared: &Prepared) -> Result<PercentageMatrix> {
    let m = prepared.matrix.filter_months(|m| cfg.train.contains(m));
    if m.is_empty() {
        return Err(Error::InsufficientData(format!(
            "training window {}..{} has no data after exclusions and filtering",
            cfg.train.start, cfg.train.end
        )));
    }
    Ok(m)
}

fn max_score(rules: &RuleSet) -> f64 {
    (rules.len() as f64).sqrt()
}

/// Fits KDEs, the cluster model and the linear predictor on the training window.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<CommandOutput> {
    let prepared = prepare(cfg)?;
    let rules = &prepared.rules;
    let train = training_matrix(cfg, &prepared)?;

    let kdes = fit_models(&train, rules, cfg.kde.min_samples)?;
    let fit_month = *train.months().iter().next_back().expect("training matrix is nonempty");
    let cluster = ClusterModel::fit(&train, &kdes, rules, fit_month, &cfg.cluster_config())?;
    let history = score_history(&train, &kdes, rules)?;
    let linear = fit_linear(&build_features(&history, cfg.predict.lags))?;

    let elbow = if cfg.cluster.elbow_k_max > 0 {
        let vectors: Vec<Vec<f64>> = train.rows().map(|(_, _, r)| cluster.imputer.apply(r).0).collect();
        let k_max = cfg.cluster.elbow_k_max.min(vectors.len());
        elbow_scan(&vectors, k_max, cfg.cluster.seed, cfg.cluster.restarts)?
    } else {
        Vec::new()
    };

    let mut files = Vec::new();
    for (rule, model) in rules.rules().iter().zip(&kdes) {
        let path = kde_path(cfg, rule.id);
        write_json(
            &path,
            &KdeFile {
                rule_id: rule.id,
                rule_name: rule.name.clone(),
                polarity: rule.polarity,
                excludes_filtered_anms: true,
                excluded_months: cfg.filter.excluded_months.clone(),
                training_window: cfg.train,
                model: model.clone(),
            },
        )?;
        files.push(path);
    }
    write_json(&cluster_path(cfg), &cluster)?;
    files.push(cluster_path(cfg));
    write_json(&linear_path(cfg), &linear)?;
    files.push(linear_path(cfg));

    let summary = TrainingSummary {
        cfg,
        rules,
        filter_report: Some(&prepared.filter_report),
        train: Some(&train),
        kdes: &kdes,
        cluster: &cluster,
        linear: &linear,
        elbow: &elbow,
    };
    let text = summary.render();
    let reports = cfg.reports_dir();
    let txt = reports.join("training_summary.txt");
    write_file(&txt, &text)?;
    let (h, rows) = summary.rule_rows();
    let rules_csv = reports.join("training_rules.csv");
    write_file(&rules_csv, &csv_string(&h, &rows)?)?;
    let (h, rows) = center_rows(&cluster, rules, false);
    let centers_csv = reports.join("cluster_centers.csv");
    write_file(&centers_csv, &csv_string(&h, &rows)?)?;
    files.extend([txt, rules_csv, centers_csv]);
    Ok(CommandOutput { files, text })
}

struct TrainingSummary<'a> {
    cfg: &'a PipelineConfig,
    rules: &'a RuleSet,
    filter_report: Option<&'a FilterReport>,
    train: Option<&'a PercentageMatrix>,
    kdes: &'a [KdeModel],
    cluster: &'a ClusterModel,
    linear: &'a LinearModel,
    elbow: &'a [(usize, f64)],
}

fn center_rows(cluster: &ClusterModel, rules: &RuleSet, probabilities: bool) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["Cluster".to_string()];
    header.extend(rules.rules().iter().map(|r| r.id.to_string()));
    let src = if probabilities {
        &cluster.center_diligence
    } else {
        &cluster.centers
    };
    let rows = src
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut row = vec![format!("Cluster {i}")];
            row.extend(c.iter().map(|v| if probabilities { f4(*v) } else { format!("{v:.2}") }));
            row
        })
        .collect();
    (header, rows)
}

impl TrainingSummary<'_> {
    fn rule_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header: Vec<String> = [
            "rule", "name", "kind", "polarity", "samples", "bandwidth", "fallback", "stddev", "importance",
        ]
        .map(String::from)
        .to_vec();
        let imp = &self.cluster.importance;
        let rows = self
            .rules
            .rules()
            .iter()
            .zip(self.kdes)
            .enumerate()
            .map(|(i, (r, k))| {
                vec![
                    r.id.to_string(),
                    r.name.clone(),
                    r.kind.to_string(),
                    r.polarity.to_string(),
                    k.samples_used.to_string(),
                    f4(k.bandwidth),
                    match k.fallback {
                        Fallback::None => "kde".into(),
                        Fallback::Uniform => "uniform".into(),
                    },
                    f4(imp.stddevs[i]),
                    imp.class_of(r.id).map_or_else(|| "-".into(), |i| i.to_string()),
                ]
            })
            .collect();
        (header, rows)
    }

    fn render(&self) -> String {
        let cfg = self.cfg;
        let c = self.cluster;
        let mut out = String::new();
        let _ = writeln!(out, "Training summary");
        let _ = writeln!(out, "================");
        let _ = writeln!(
            out,
            "training window: {} .. {} ({} months)",
            cfg.train.start,
            cfg.train.end,
            cfg.train.months().len()
        );
        let excluded: Vec<String> = cfg.filter.excluded_months.iter().map(Month::to_string).collect();
        let _ = writeln!(
            out,
            "excluded months: {}",
            if excluded.is_empty() { "none".into() } else { excluded.join(", ") }
        );
        if let Some(fr) = self.filter_report {
            let _ = writeln!(out, "workers retained: {}, removed: {}", fr.retained.len(), fr.removed.len());
            for (anm, reasons) in &fr.removed {
                let rs: Vec<String> = reasons.iter().map(ToString::to_string).collect();
                let _ = writeln!(out, "  removed {anm}: {}", rs.join(", "));
            }
        }
        if let Some(t) = self.train {
            let _ = writeln!(out, "training vectors: {}", t.len());
        }
        let _ = writeln!(out);

        let _ = writeln!(out, "Rules");
        let (h, rows) = self.rule_rows();
        out.push_str(&render_table(&h, &rows));
        let imp = &c.importance;
        let ids = |s: &BTreeSet<u32>| s.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            out,
            "importance thresholds: stddev < {} least, > {} most",
            imp.thresholds.0, imp.thresholds.1
        );
        let _ = writeln!(out, "  most:  {}", ids(&imp.most));
        let _ = writeln!(out, "  less:  {}", ids(&imp.less));
        let _ = writeln!(out, "  least: {}", ids(&imp.least));
        let _ = writeln!(out);

        let _ = writeln!(out, "Cluster centers (percentages), k = {}, inertia {:.4}", c.k, c.inertia);
        let (h, rows) = center_rows(c, self.rules, false);
        out.push_str(&render_table(&h, &rows));
        let _ = writeln!(out);
        let _ = writeln!(out, "Cluster center non-diligence probabilities");
        let (h, rows) = center_rows(c, self.rules, true);
        out.push_str(&render_table(&h, &rows));
        let _ = writeln!(out);

        let _ = writeln!(out, "Interpretation");
        if let Some(l0) = c.interpretation(0) {
            let _ = writeln!(out, "level 0 reference (mean of cluster means): {}", opt4(l0.reference));
            for s in &l0.clusters {
                let _ = writeln!(out, "  cluster {} mean probability {}", s.cluster, f4(s.mean_probability));
            }
        }
        for i in 0..c.k {
            let _ = writeln!(out, "  cluster {i}: {}", c.describe(i));
        }
        let _ = writeln!(
            out,
            "fitted {}, valid through {} (refit every {} months)",
            c.fit_month,
            c.expires_after(),
            c.refit_period
        );
        let _ = writeln!(out);

        if !self.elbow.is_empty() {
            let _ = writeln!(out, "Elbow scan");
            let rows: Vec<Vec<String>> = self
                .elbow
                .iter()
                .map(|(k, inertia)| vec![k.to_string(), f4(*inertia)])
                .collect();
            out.push_str(&render_table(&["k".into(), "inertia".into()], &rows));
            if let Some(k) = elbow_k(self.elbow) {
                let _ = writeln!(out, "elbow at k = {k}");
            }
            let _ = writeln!(out);
        }

        let l = self.linear;
        let _ = writeln!(
            out,
            "Linear predictor ({} lags{})",
            l.lags,
            if l.ridge { ", ridge fallback" } else { "" }
        );
        let _ = writeln!(out, "  intercept {}", f6(l.intercept));
        for (i, w) in l.weights.iter().enumerate() {
            let _ = writeln!(out, "  lag t-{} weight {}", l.lags - i, f6(*w));
        }
        out
    }
}

/// Frozen models read back from `output_dir/models`.
pub struct Models {
    pub kdes: Vec<KdeModel>,
    pub cluster: ClusterModel,
    pub linear: LinearModel,
}

pub fn load_models(cfg: &PipelineConfig, rules: &RuleSet) -> Result<Models> {
    let mut kdes = Vec::with_capacity(rules.len());
    for rule in rules.rules() {
        let file: KdeFile = read_json(&kde_path(cfg, rule.id))?;
        if file.rule_id != rule.id {
            return Err(Error::Serialization(format!(
                "KDE file for rule {} holds rule {}",
                rule.id, file.rule_id
            )));
        }
        file.model.validate()?;
        kdes.push(file.model);
    }
    let cluster: ClusterModel = read_json(&cluster_path(cfg))?;
    if cluster.imputer.means.len() != rules.len() {
        return Err(Error::Serialization(format!(
            "cluster model has {} rules, rule set has {}",
            cluster.imputer.means.len(),
            rules.len()
        )));
    }
    let linear: LinearModel = read_json(&linear_path(cfg))?;
    Ok(Models { kdes, cluster, linear })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub anm_id: String,
    pub probs: Vec<f64>,
    pub missing_mask: String,
    pub score: f64,
    pub rank: usize,
    pub bucket: Bucket,
    pub basis: BucketBasis,
    pub cluster: usize,
    pub interpretation: String,
    /// `None` when fewer than `lags` consecutive months are scored.
    pub predicted_next: Option<f64>,
}

fn cluster_of(model: &ClusterModel, matrix: &PercentageMatrix, anm: &str, month: Month) -> Result<Option<usize>> {
    if let Some(c) = model.assignments.get(anm).and_then(|m| m.get(&month)) {
        return Ok(Some(*c));
    }
    match matrix.row(anm, month) {
        Some(row) => model.assign_row(row, month).map(Some),
        None => Ok(None),
    }
}

/// Per-worker report for `month` using the frozen models. Never writes to `models/`.
pub fn score_month(cfg: &PipelineConfig, month: Month) -> Result<(Vec<ScoreRow>, Models, RuleSet)> {
    let prepared = prepare(cfg)?;
    let rules = prepared.rules;
    let models = load_models(cfg, &rules)?;
    models.cluster.check_fresh(month)?;
    let matrix = prepared.matrix.filter_months(|m| m <= month);
    let current: Vec<&str> = matrix.rows().filter(|(_, m, _)| *m == month).map(|(a, _, _)| a).collect();
    if current.is_empty() {
        return Err(Error::NotFound(format!("no records for month {month}")));
    }
    let history = score_history(&matrix, &models.kdes, &rules)?;

    let n = models.cluster.refit_period as i64;
    let span_start = month.offset(1 - n);
    let mut trend: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut clusters: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut vectors = BTreeMap::new();
    let mut scores = Vec::new();
    for &anm in &current {
        let v = behavior_vector(anm, month, &matrix, &models.kdes, &rules)?;
        scores.push(DiligenceScore {
            anm_id: anm.to_string(),
            month,
            value: diligence_score(&v).value,
        });
        vectors.insert(anm.to_string(), v);
        for m in Month::range_inclusive(span_start, month) {
            if let Some(s) = history.get(anm).and_then(|h| h.get(&m)) {
                trend.entry(anm.to_string()).or_default().push(*s);
            }
            if let Some(c) = cluster_of(&models.cluster, &matrix, anm, m)? {
                clusters.entry(anm.to_string()).or_default().push(c);
            }
        }
    }
    let ranked = rank(&scores)?;
    let buckets = bucketize(
        &ranked,
        &trend,
        &clusters,
        &models.cluster.good_clusters(),
        cfg.band_fractions(),
    );

    let mut rows = Vec::with_capacity(ranked.len());
    for (r, b) in ranked.iter().zip(&buckets) {
        let anm = r.score.anm_id.as_str();
        let v = &vectors[anm];
        let cluster = *clusters[anm].last().expect("current month is assigned");
        let predicted_next = match inference_features(&history, anm, month.next(), cfg.predict.lags) {
            Some(f) => Some(predict_score(&models.linear, &f.x, max_score(&rules))?.value),
            None => None,
        };
        rows.push(ScoreRow {
            anm_id: anm.to_string(),
            probs: v.probs.clone(),
            missing_mask: v.mask_string(),
            score: r.score.value,
            rank: r.rank,
            bucket: b.bucket,
            basis: b.basis,
            cluster,
            interpretation: models.cluster.describe(cluster),
            predicted_next,
        });
    }
    Ok((rows, models, rules))
}

pub fn cmd_score(cfg: &PipelineConfig, month: Month) -> Result<CommandOutput> {
    let (rows, models, rules) = score_month(cfg, month)?;

    let mut header: Vec<String> = vec!["rank".into(), "anm_id".into(), "score".into()];
    header.extend(rules.rules().iter().map(|r| format!("p{:02}", r.id)));
    header.extend(
        ["missing_mask", "bucket", "basis", "cluster", "predicted_next", "interpretation"].map(String::from),
    );
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.rank.to_string(), r.anm_id.clone(), f6(r.score)];
            row.extend(r.probs.iter().map(|p| f6(*p)));
            row.extend([
                r.missing_mask.clone(),
                r.bucket.to_string(),
                r.basis.to_string(),
                r.cluster.to_string(),
                r.predicted_next.map_or_else(|| "unavailable".into(), f6),
                r.interpretation.clone(),
            ]);
            row
        })
        .collect();

    let mut text = String::new();
    let _ = writeln!(text, "Monthly report {month}");
    let _ = writeln!(
        text,
        "cluster model fitted {}, valid through {}",
        models.cluster.fit_month,
        models.cluster.expires_after()
    );
    let diligent = rows.iter().filter(|r| r.bucket == Bucket::Diligent).count();
    let _ = writeln!(
        text,
        "workers: {}, diligent: {}, non-diligent: {}",
        rows.len(),
        diligent,
        rows.len() - diligent
    );
    let _ = writeln!(text);
    let text_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.rank.to_string(),
                r.anm_id.clone(),
                f4(r.score),
                r.bucket.to_string(),
                r.basis.to_string(),
                r.cluster.to_string(),
                r.predicted_next.map_or_else(|| "unavailable".into(), f4),
                r.missing_mask.clone(),
            ]
        })
        .collect();
    text.push_str(&render_table(
        &["rank", "anm", "score", "bucket", "basis", "cluster", "next", "missing"].map(String::from),
        &text_rows,
    ));
    let _ = writeln!(text);
    let _ = writeln!(text, "Cluster interpretations");
    for i in 0..models.cluster.k {
        let _ = writeln!(text, "  cluster {i}: {}", models.cluster.describe(i));
    }

    let dir = cfg.reports_dir();
    let csv_path = dir.join(format!("score_{month}.csv"));
    let txt_path = dir.join(format!("score_{month}.txt"));
    write_file(&csv_path, &csv_string(&header, &csv_rows)?)?;
    write_file(&txt_path, &text)?;
    Ok(CommandOutput {
        files: vec![csv_path, txt_path],
        text,
    })
}

fn test_window(cfg: &PipelineConfig) -> Result<MonthRange> {
    cfg.test
        .ok_or_else(|| Error::Config("no test window configured (set test.start and test.end)".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonthMetrics {
    pub month: Month,
    pub metrics: Option<MetricsReport>,
}

/// Hindsight evaluation of the frozen predictor over the test window.
pub fn predict_eval(cfg: &PipelineConfig) -> Result<(Vec<MonthMetrics>, Option<MetricsReport>)> {
    let window = test_window(cfg)?;
    let prepared = prepare(cfg)?;
    let models = load_models(cfg, &prepared.rules)?;
    let matrix = prepared.matrix.filter_months(|m| m <= window.end);
    let history = score_history(&matrix, &models.kdes, &prepared.rules)?;
    let cap = max_score(&prepared.rules);

    let (mut all_p, mut all_t) = (Vec::new(), Vec::new());
    let mut per_month = Vec::new();
    for month in window.months() {
        let (mut preds, mut truths) = (Vec::new(), Vec::new());
        for (anm, scores) in &history {
            let (Some(truth), Some(f)) = (
                scores.get(&month),
                inference_features(&history, anm, month, models.linear.lags),
            ) else {
                continue;
            };
            preds.push(predict_score(&models.linear, &f.x, cap)?.value);
            truths.push(*truth);
        }
        let metrics = if preds.is_empty() { None } else { Some(evaluate(&preds, &truths)?) };
        all_p.extend(preds);
        all_t.extend(truths);
        per_month.push(MonthMetrics { month, metrics });
    }
    let pooled = if all_p.is_empty() { None } else { Some(evaluate(&all_p, &all_t)?) };
    Ok((per_month, pooled))
}

pub fn cmd_predict_eval(cfg: &PipelineConfig) -> Result<CommandOutput> {
    let (per_month, pooled) = predict_eval(cfg)?;
    let header: Vec<String> = ["period", "n", "mse", "r2", "pearson"].map(String::from).to_vec();
    let fmt = |label: String, m: &Option<MetricsReport>| match m {
        Some(m) => vec![label, m.n.to_string(), f6(m.mse), opt4(m.r2), opt4(m.pearson)],
        None => vec![label, "0".into(), "n/a".into(), "n/a".into(), "n/a".into()],
    };
    let mut rows: Vec<Vec<String>> = per_month.iter().map(|m| fmt(m.month.to_string(), &m.metrics)).collect();
    rows.push(fmt("pooled".into(), &pooled));

    let mut text = String::from("Predictor evaluation (hindsight, frozen model)\n\n");
    text.push_str(&render_table(&header, &rows));
    let dir = cfg.reports_dir();
    let csv_path = dir.join("predict_eval.csv");
    let txt_path = dir.join("predict_eval.txt");
    write_file(&csv_path, &csv_string(&header, &rows)?)?;
    write_file(&txt_path, &text)?;
    Ok(CommandOutput {
        files: vec![csv_path, txt_path],
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub split: TagSplit,
    pub tagged_ids: BTreeSet<String>,
}

/// Threshold (AND, OR) and anomaly baselines over the test window, scored with the frozen KDEs.
pub fn baseline_rows(cfg: &PipelineConfig) -> Result<Vec<BaselineRow>> {
    let window = test_window(cfg)?;
    let prepared = prepare(cfg)?;
    let rules = &prepared.rules;
    let models = load_models(cfg, rules)?;
    let test = prepared.matrix.filter_months(|m| window.contains(m));
    if test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "test window {}..{} has no data",
            window.start, window.end
        )));
    }
    let scores = score_history(&test, &models.kdes, rules)?;
    let score_of = |anm: &str, m: Month| scores[anm][&m];

    let mut rows = Vec::new();
    for mode in [CombineMode::And, CombineMode::Or] {
        let tags = threshold_baseline(&test, &cfg.threshold_config(rules, mode)?)?;
        rows.push(BaselineRow {
            method: format!("threshold rules ({mode})"),
            split: split_means(tags.iter().map(|((a, m), t)| (*t, score_of(a, *m)))),
            tagged_ids: tags.iter().filter(|(_, t)| **t).map(|((a, _), _)| a.clone()).collect(),
        });
    }
    let both = prepared
        .matrix
        .filter_months(|m| window.contains(m) || cfg.train.contains(m));
    let train_months: BTreeSet<Month> = both.months().into_iter().filter(|m| cfg.train.contains(*m)).collect();
    let anomaly: Vec<_> = anomaly_baseline(&both, &train_months, cfg.baseline.quantile)?
        .into_iter()
        .filter(|t| window.contains(t.month))
        .collect();
    rows.push(BaselineRow {
        method: format!("anomaly (q = {})", cfg.baseline.quantile),
        split: split_means(anomaly.iter().map(|t| (t.tagged, score_of(&t.anm_id, t.month)))),
        tagged_ids: anomaly.iter().filter(|t| t.tagged).map(|t| t.anm_id.clone()).collect(),
    });
    Ok(rows)
}

pub fn cmd_baseline(cfg: &PipelineConfig) -> Result<CommandOutput> {
    let rows = baseline_rows(cfg)?;
    let window = test_window(cfg)?;
    let header: Vec<String> = ["method", "tagged", "not tagged", "mean score tagged", "mean score not tagged"]
        .map(String::from)
        .to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.split.tagged.to_string(),
                r.split.untagged.to_string(),
                opt4(r.split.mean_tagged),
                opt4(r.split.mean_untagged),
            ]
        })
        .collect();
    let mut text = format!(
        "Baseline comparison, {} .. {} (counts are worker-months)\n\n",
        window.start, window.end
    );
    text.push_str(&render_table(&header, &table));
    let _ = writeln!(text);
    for r in &rows {
        let ids: Vec<&str> = r.tagged_ids.iter().map(String::as_str).collect();
        let _ = writeln!(
            text,
            "{} tagged: {}",
            r.method,
            if ids.is_empty() { "none".into() } else { ids.join(", ") }
        );
    }
    let dir = cfg.reports_dir();
    let csv_path = dir.join("baseline.csv");
    let txt_path = dir.join("baseline.txt");
    write_file(&csv_path, &csv_string(&header, &table)?)?;
    write_file(&txt_path, &text)?;
    Ok(CommandOutput {
        files: vec![csv_path, txt_path],
        text,
    })
}

/// Writes `cohort.csv`, `ground_truth.csv` and `cohort_meta.json` into `out_dir`.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<CommandOutput> {
    let spec = CohortSpec::load(spec_path)?;
    let records = generate_cohort(&spec)?;
    let mut cohort = Vec::new();
    write_records(&records, &mut cohort)?;
    let mut truth = Vec::new();
    write_ground_truth(&ground_truth(&spec), &mut truth)?;
    let meta = CohortMetadata::new(&spec, &records);

    let cohort_path = out_dir.join("cohort.csv");
    let truth_path = out_dir.join("ground_truth.csv");
    let meta_path = out_dir.join("cohort_meta.json");
    write_file(
        &cohort_path,
        std::str::from_utf8(&cohort).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    write_file(
        &truth_path,
        std::str::from_utf8(&truth).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    write_json(&meta_path, &meta)?;
    let text = format!(
        "{} workers, {} months, {} records (seed {}, {})\n",
        meta.anms,
        meta.months.len(),
        meta.records,
        meta.seed,
        meta.rng
    );
    Ok(CommandOutput {
        files: vec![cohort_path, truth_path, meta_path],
        text,
    })
}

/// Renders the saved models without refitting or writing anything.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<CommandOutput> {
    let rules = parse_rule_config(&cfg.paths.rules)?;
    let models = load_models(cfg, &rules)?;
    let summary = TrainingSummary {
        cfg,
        rules: &rules,
        filter_report: None,
        train: None,
        kdes: &models.kdes,
        cluster: &models.cluster,
        linear: &models.linear,
        elbow: &[],
    };
    let mut text = summary.render();
    let mut scored: Vec<String> = match std::fs::read_dir(cfg.reports_dir()) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.starts_with("score_") && n.ends_with(".csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    scored.sort();
    let _ = writeln!(text);
    let _ = writeln!(
        text,
        "Monthly reports: {}",
        if scored.is_empty() { "none".into() } else { scored.join(", ") }
    );
    Ok(CommandOutput {
        files: Vec::new(),
        text,
    })
}
