//! Evaluation metrics over scored trials: average precision, temporal
//! intersection-over-union on correctly detected instances, and term
//! weighted value with its maximum over decision thresholds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EventSpan;

/// One (utterance, term) evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub utterance_id: String,
    pub term_id: String,
    /// Whether the term is truly uttered in the utterance.
    pub label: bool,
    pub score: f64,
    pub predicted: Option<EventSpan>,
    /// Ground-truth span; present iff `label` is true.
    pub reference: Option<EventSpan>,
}

impl Trial {
    pub fn positive(utterance_id: impl Into<String>, term_id: impl Into<String>, reference: EventSpan) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            term_id: term_id.into(),
            label: true,
            score: 0.0,
            predicted: None,
            reference: Some(reference),
        }
    }

    pub fn negative(utterance_id: impl Into<String>, term_id: impl Into<String>) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            term_id: term_id.into(),
            label: false,
            score: 0.0,
            predicted: None,
            reference: None,
        }
    }
}

/// Average precision of score-ranked trials: the mean of precision-at-rank
/// over positive ranks. Ties keep the input order (stable sort).
pub fn average_precision(trials: &[Trial]) -> Result<f64> {
    if !trials.iter().any(|t| t.label) {
        return Err(Error::NoPositiveTrials);
    }
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials[b].score.partial_cmp(&trials[a].score).unwrap());
    let mut positives_seen = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if trials[idx].label {
            positives_seen += 1;
            precision_sum += positives_seen as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(precision_sum / positives_seen as f64)
}

/// Temporal intersection-over-union of two spans on the real line.
pub fn iou(a: &EventSpan, b: &EventSpan) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.duration() + b.duration() - inter;
    inter / union
}

/// Mean IOU between predicted and reference spans over positive trials whose
/// score strictly exceeds the threshold ("correctly detected").
pub fn mean_iou_correct(trials: &[Trial], threshold: f64) -> Result<f64> {
    let positives = trials.iter().filter(|t| t.label).count();
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in trials {
        if t.label && t.score > threshold {
            let (p, r) = match (&t.predicted, &t.reference) {
                (Some(p), Some(r)) => (p, r),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "correct trial ({}, {}) is missing a span",
                        t.utterance_id, t.term_id
                    )))
                }
            };
            sum += iou(p, r);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoCorrectDetections {
            threshold,
            positives,
        });
    }
    Ok(sum / count as f64)
}

/// Parameters of the term weighted value sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwvConfig {
    /// False-alarm weight. 1.0 suits balanced trial sets; the NIST
    /// duration-based convention of 999.9 is selectable.
    pub beta: f64,
    /// Candidate decision thresholds; `None` uses midpoints of adjacent
    /// distinct scores plus sentinels below and above every score.
    pub thresholds: Option<Vec<f64>>,
}

impl Default for TwvConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            thresholds: None,
        }
    }
}

fn per_term_counts(trials: &[Trial]) -> Result<BTreeMap<&str, (Vec<f64>, Vec<f64>)>> {
    let mut by_term: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in trials {
        let entry = by_term.entry(t.term_id.as_str()).or_default();
        if t.label {
            entry.0.push(t.score);
        } else {
            entry.1.push(t.score);
        }
    }
    for (term, (targets, non_targets)) in &by_term {
        if targets.is_empty() || non_targets.is_empty() {
            return Err(Error::TermMissingTrials {
                term: term.to_string(),
                targets: targets.len(),
                non_targets: non_targets.len(),
            });
        }
    }
    Ok(by_term)
}

/// Term weighted value at one decision threshold:
/// `1 - mean over terms of (P_miss + beta * P_FA)`, with trial-based
/// probabilities (`P_miss` = missed targets / targets, `P_FA` = false alarms
/// / non-target trials). Detection is `score > threshold`.
pub fn twv(trials: &[Trial], threshold: f64, beta: f64) -> Result<f64> {
    let by_term = per_term_counts(trials)?;
    let mut cost = 0.0;
    for (targets, non_targets) in by_term.values() {
        let miss = targets.iter().filter(|s| **s <= threshold).count() as f64;
        let fa = non_targets.iter().filter(|s| **s > threshold).count() as f64;
        cost += miss / targets.len() as f64 + beta * fa / non_targets.len() as f64;
    }
    Ok(1.0 - cost / by_term.len() as f64)
}

fn default_threshold_grid(trials: &[Trial]) -> Vec<f64> {
    let mut scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mut grid = Vec::with_capacity(scores.len() + 1);
    grid.push(scores.first().unwrap() - 1.0);
    for w in scores.windows(2) {
        grid.push((w[0] + w[1]) / 2.0);
    }
    grid.push(scores.last().unwrap() + 1.0);
    grid
}

/// Maximize the term weighted value over the threshold grid; ties go to the
/// smallest threshold. Returns (best threshold, MTWV).
pub fn mtwv(trials: &[Trial], config: &TwvConfig) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::DegenerateTrials("empty trial set".into()));
    }
    let grid = match &config.thresholds {
        Some(g) if !g.is_empty() => {
            let mut g = g.clone();
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            g
        }
        _ => default_threshold_grid(trials),
    };
    let mut best: Option<(f64, f64)> = None;
    for &theta in &grid {
        let v = twv(trials, theta, config.beta)?;
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((theta, v)),
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// One point of a detection-tradeoff sweep.
#[derive(Debug, Clone, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
    pub twv: f64,
}

/// Term-averaged miss/false-alarm rates and TWV over the threshold grid.
pub fn det_sweep(trials: &[Trial], config: &TwvConfig) -> Result<Vec<DetPoint>> {
    let by_term = per_term_counts(trials)?;
    let grid = match &config.thresholds {
        Some(g) if !g.is_empty() => g.clone(),
        _ => default_threshold_grid(trials),
    };
    let mut points = Vec::with_capacity(grid.len());
    for theta in grid {
        let mut p_miss = 0.0;
        let mut p_fa = 0.0;
        for (targets, non_targets) in by_term.values() {
            p_miss += targets.iter().filter(|s| **s <= theta).count() as f64
                / targets.len() as f64;
            p_fa += non_targets.iter().filter(|s| **s > theta).count() as f64
                / non_targets.len() as f64;
        }
        p_miss /= by_term.len() as f64;
        p_fa /= by_term.len() as f64;
        points.push(DetPoint {
            threshold: theta,
            p_miss,
            p_fa,
            twv: 1.0 - (p_miss + config.beta * p_fa),
        });
    }
    Ok(points)
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub subset: String,
    pub dissim_variant: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(metric: &str, subset: &str, dissim: &str, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            subset: subset.to_string(),
            dissim_variant: dissim.to_string(),
            value,
        }
    }
}

/// CSV report with a JSON mirror next to it.
pub fn write_report(csv_path: &Path, json_path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(f, "metric,subset,dissim_variant,value")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.metric, r.subset, r.dissim_variant, r.value)?;
    }
    f.flush()?;
    let j = std::io::BufWriter::new(std::fs::File::create(json_path)?);
    serde_json::to_writer_pretty(j, rows)?;
    Ok(())
}

pub fn write_det_sweep(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,p_miss,p_fa,twv")?;
    for p in points {
        writeln!(f, "{},{},{},{}", p.threshold, p.p_miss, p.p_fa, p.twv)?;
    }
    f.flush()?;
    Ok(())
}
