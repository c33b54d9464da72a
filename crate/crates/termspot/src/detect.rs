//! Inference: per-cell cosine scoring against a query embedding, thresholded
//! detection with localization, utterance-level scoring for ranked trials,
//! and validation-set threshold tuning.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, TermEmbedding};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::{CellGrid, CellLocal, EventSpan};
use crate::metrics::Trial;
use crate::net::{self, ModelParameters, NormMode, Prediction};

/// One above-threshold cell with its localized span.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub cell_index: usize,
    pub score: f64,
    pub span: EventSpan,
}

/// A tuned decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub objective: TuneObjective,
    pub objective_value: f64,
    pub tuning_set: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TuneObjective {
    /// Maximize F1 over detection decisions `score > threshold`.
    F1,
    /// Maximize `1 - (P_miss + beta * P_FA)` over the pooled trial set.
    Twv { beta: f64 },
}

/// Cosine between the query and each cell's predicted embedding.
pub fn score_cells(pred: &Prediction, query: &TermEmbedding) -> Result<Vec<f64>> {
    pred.cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            crate::embedding::cosine(query.as_slice(), &c.embedding)
                .map_err(|_| Error::ZeroNormPrediction { cell: i })
        })
        .collect()
}

/// Emit one detection per cell whose score strictly exceeds the threshold,
/// localized through the grid.
pub fn detect(
    pred: &Prediction,
    query: &TermEmbedding,
    threshold: f64,
    grid: &CellGrid,
) -> Result<Vec<Detection>> {
    let scores = score_cells(pred, query)?;
    let mut out = Vec::new();
    for (i, score) in scores.into_iter().enumerate() {
        if score > threshold {
            let span = grid.to_absolute_span(&CellLocal {
                cell_index: i,
                rel_center: pred.cells[i].rel_center,
                duration: pred.cells[i].duration,
            })?;
            out.push(Detection {
                cell_index: i,
                score,
                span,
            });
        }
    }
    Ok(out)
}

/// Utterance-level score: the maximum cell cosine and its cell, ties broken
/// by the lowest cell index.
pub fn utterance_score(pred: &Prediction, query: &TermEmbedding) -> Result<(f64, usize)> {
    let scores = score_cells(pred, query)?;
    let mut best = (scores[0], 0usize);
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > best.0 {
            best = (*s, i);
        }
    }
    Ok(best)
}

/// Sweep candidate thresholds at midpoints between adjacent distinct scores
/// (plus the sentinels -1 and 1) and return the objective maximizer; ties go
/// to the smallest threshold.
pub fn tune_threshold(
    scored: &[(f64, bool)],
    objective: TuneObjective,
    tuning_set: &str,
) -> Result<Threshold> {
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateTrials(format!(
            "threshold tuning needs both labels; got {positives} positive and {negatives} negative"
        )));
    }
    let mut distinct: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() == 1 {
        return Err(Error::DegenerateTrials(
            "all trial scores identical; no separating threshold exists".into(),
        ));
    }
    let mut candidates = vec![-1.0];
    for w in distinct.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(1.0);

    let evaluate = |phi: f64| -> f64 {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut missed = 0usize;
        for (s, label) in scored {
            let detected = *s > phi;
            match (detected, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => missed += 1,
                (false, false) => {}
            }
        }
        match objective {
            TuneObjective::F1 => {
                let denom = 2 * tp + fp + missed;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            }
            TuneObjective::Twv { beta } => {
                let p_miss = missed as f64 / positives as f64;
                let p_fa = fp as f64 / negatives as f64;
                1.0 - (p_miss + beta * p_fa)
            }
        }
    };

    let mut best = (candidates[0], evaluate(candidates[0]));
    for &phi in &candidates[1..] {
        let v = evaluate(phi);
        if v > best.1 {
            best = (phi, v);
        }
    }
    Ok(Threshold {
        value: best.0,
        objective,
        objective_value: best.1,
        tuning_set: tuning_set.to_string(),
    })
}

/// Everything inferred for one utterance/query pair.
#[derive(Debug, Clone)]
pub struct UtteranceScore {
    pub score: f64,
    pub best_cell: usize,
    pub predicted_span: EventSpan,
    pub cell_scores: Vec<f64>,
}

/// Run the network on one pair and pool the per-cell decisions.
pub fn score_pair(
    params: &ModelParameters,
    grid: &CellGrid,
    x: &FeatureMatrix,
    query: &TermEmbedding,
    mode: NormMode,
) -> Result<UtteranceScore> {
    let (pred, _) = net::forward(params, x, query, mode)?;
    let cell_scores = score_cells(&pred, query)?;
    let (score, best_cell) = utterance_score(&pred, query)?;
    let predicted_span = grid.to_absolute_span(&CellLocal {
        cell_index: best_cell,
        rel_center: pred.cells[best_cell].rel_center,
        duration: pred.cells[best_cell].duration,
    })?;
    Ok(UtteranceScore {
        score,
        best_cell,
        predicted_span,
        cell_scores,
    })
}

/// Reference events for positive trials, keyed by (utterance id, term id).
pub type EventIndex = BTreeMap<(String, String), Vec<EventSpan>>;

/// Score a batch of trials in place: fills `score` and `predicted`, and for
/// positive trials sets `reference` to the ground-truth event with the best
/// overlap against the prediction. Runs in parallel; output is ordered by
/// trial index and independent of worker count.
pub fn score_trials(
    params: &ModelParameters,
    features: &BTreeMap<String, &FeatureMatrix>,
    embeddings: &EmbeddingTable,
    events: &EventIndex,
    trials: &mut [Trial],
    mode: NormMode,
) -> Result<()> {
    let grid = CellGrid::new(
        params.config.input_frames as u32,
        params.config.num_cells as u32,
    )?;
    trials.par_iter_mut().try_for_each(|trial| {
        let x = features.get(&trial.utterance_id).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no features for utterance {:?}",
                trial.utterance_id
            ))
        })?;
        let query = embeddings.get(&trial.term_id).ok_or_else(|| {
            Error::InvalidConfig(format!("no embedding for term {:?}", trial.term_id))
        })?;
        let scored = score_pair(params, &grid, x, query, mode)?;
        trial.score = scored.score;
        if trial.label {
            let key = (trial.utterance_id.clone(), trial.term_id.clone());
            let refs = events
                .get(&key)
                .ok_or_else(|| Error::InvalidConfig(format!("no reference events for {key:?}")))?;
            trial.reference = refs
                .iter()
                .map(|r| (crate::metrics::iou(&scored.predicted_span, r), *r))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .map(|(_, r)| r)
                .or(trial.reference);
        }
        trial.predicted = Some(scored.predicted_span);
        Ok::<(), Error>(())
    })
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    utterance_id: &'a str,
    term_id: &'a str,
    score: f64,
    start: f64,
    end: f64,
    cell: usize,
}

/// Export scored trials as JSON Lines: one record per trial whose score
/// exceeds the threshold and that carries a predicted span.
pub fn write_detections(path: &Path, trials: &[Trial], threshold: f64, grid: &CellGrid) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trials {
        if t.score > threshold {
            if let Some(span) = &t.predicted {
                let cell = grid.assign_cell(span.center())?;
                serde_json::to_writer(
                    &mut f,
                    &DetectionRecord {
                        utterance_id: &t.utterance_id,
                        term_id: &t.term_id,
                        score: t.score,
                        start: span.start(),
                        end: span.end(),
                        cell,
                    },
                )?;
                f.write_all(b"\n")?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::CellPrediction;

    fn unit(values: Vec<f64>) -> TermEmbedding {
        TermEmbedding::unit(values).unwrap()
    }

    fn pred_with_embeddings(embs: Vec<Vec<f64>>) -> Prediction {
        Prediction {
            cells: embs
                .into_iter()
                .map(|embedding| CellPrediction {
                    embedding,
                    rel_center: 16.0,
                    duration: 10.0,
                })
                .collect(),
        }
    }

    fn mk(cos: f64) -> Vec<f64> {
        vec![cos, (1.0f64 - cos * cos).sqrt()]
    }

    #[test]
    fn score_cells_extremes() {
        let q = unit(vec![1.0, 0.0]);
        let p = pred_with_embeddings(vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![-3.0, 0.0]]);
        let s = score_cells(&p, &q).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] + 1.0).abs() < 1e-12);

        let zero = pred_with_embeddings(vec![vec![0.0, 0.0]]);
        assert!(matches!(
            score_cells(&zero, &q),
            Err(Error::ZeroNormPrediction { cell: 0 })
        ));
    }

    #[test]
    fn detect_strict_threshold() {
        let grid = CellGrid::new(96, 3).unwrap();
        let q = unit(vec![1.0, 0.0]);
        let p = pred_with_embeddings(vec![mk(0.9), mk(0.1), mk(0.2)]);
        let d = detect(&p, &q, 0.5, &grid).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].cell_index, 0);
        assert!(d[0].span.start() >= 0.0 && d[0].span.end() <= 96.0);

        assert!(detect(&p, &q, 0.95, &grid).unwrap().is_empty());

        // exactly at the threshold is not emitted
        let single = pred_with_embeddings(vec![mk(0.9)]);
        let g1 = CellGrid::new(96, 1).unwrap();
        let score = score_cells(&single, &q).unwrap()[0];
        assert!(detect(&single, &q, score, &g1).unwrap().is_empty());

        // phi = 1 empty, phi = -1 emits every cell
        assert!(detect(&p, &q, 1.0, &grid).unwrap().is_empty());
        assert_eq!(detect(&p, &q, -1.0, &grid).unwrap().len(), 3);
    }

    #[test]
    fn detection_monotone_in_threshold() {
        let grid = CellGrid::new(96, 3).unwrap();
        let q = unit(vec![1.0, 0.0]);
        let p = pred_with_embeddings(vec![mk(0.7), mk(-0.2), mk(0.4)]);
        let mut prev = usize::MAX;
        for phi in [-1.0, -0.5, 0.0, 0.5, 0.9, 1.0] {
            let n = detect(&p, &q, phi, &grid).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn utterance_score_pooling() {
        let q = unit(vec![1.0, 0.0]);

        let single = pred_with_embeddings(vec![mk(0.42)]);
        let (s, c) = utterance_score(&single, &q).unwrap();
        assert!((s - 0.42).abs() < 1e-12);
        assert_eq!(c, 0);

        let tied = pred_with_embeddings(vec![mk(0.3), mk(0.8), mk(0.8)]);
        let (s, c) = utterance_score(&tied, &q).unwrap();
        assert!((s - 0.8).abs() < 1e-12);
        assert_eq!(c, 1, "ties break to the lowest cell index");

        let neg = pred_with_embeddings(vec![mk(-0.2), mk(-0.5), mk(-0.9)]);
        let (s, c) = utterance_score(&neg, &q).unwrap();
        assert!((s + 0.2).abs() < 1e-12);
        assert_eq!(c, 0);
    }

    #[test]
    fn utterance_score_scale_invariant() {
        let q = unit(vec![1.0, 0.0, 0.0]);
        let p1 = pred_with_embeddings(vec![vec![0.5, 0.2, 0.1], vec![-0.4, 0.9, 0.0]]);
        let p2 = pred_with_embeddings(vec![vec![5.0, 2.0, 1.0], vec![-0.4, 0.9, 0.0]]);
        let a = utterance_score(&p1, &q).unwrap();
        let b = utterance_score(&p2, &q).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn tune_threshold_f1_midpoint() {
        let scored = vec![(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        let th = tune_threshold(&scored, TuneObjective::F1, "val").unwrap();
        assert_eq!(th.value, 0.5);
        assert_eq!(th.objective_value, 1.0);
    }

    #[test]
    fn tune_threshold_degenerate_inputs() {
        let same = vec![(0.5, true), (0.5, false)];
        assert!(matches!(
            tune_threshold(&same, TuneObjective::F1, "val"),
            Err(Error::DegenerateTrials(_))
        ));
        let one_class = vec![(0.5, true), (0.7, true)];
        assert!(matches!(
            tune_threshold(&one_class, TuneObjective::F1, "val"),
            Err(Error::DegenerateTrials(_))
        ));
    }

    fn brute_force_f1(scored: &[(f64, bool)], candidates: &[f64]) -> f64 {
        let mut best: f64 = 0.0;
        for &phi in candidates {
            let tp = scored.iter().filter(|(s, l)| *l && *s > phi).count();
            let fp = scored.iter().filter(|(s, l)| !*l && *s > phi).count();
            let missed = scored.iter().filter(|(s, l)| *l && *s <= phi).count();
            let f1 = if 2 * tp + fp + missed == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + missed) as f64
            };
            best = best.max(f1);
        }
        best
    }

    #[test]
    fn tune_threshold_inverted_scores() {
        // positives score lower than negatives; the best achievable F1 is
        // still reported without a crash
        let scored = vec![(0.1, true), (0.2, true), (0.8, false), (0.9, false)];
        let th = tune_threshold(&scored, TuneObjective::F1, "val").unwrap();
        let best = brute_force_f1(&scored, &[-1.0, 0.15, 0.5, 0.85, 1.0]);
        assert!((th.objective_value - best).abs() < 1e-12);
    }

    #[test]
    fn tune_threshold_matches_brute_force_sweep() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let scored: Vec<(f64, bool)> = (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0, rng.random::<bool>()))
                .collect();
            let positives = scored.iter().filter(|(_, l)| *l).count();
            if positives == 0 || positives == scored.len() {
                continue;
            }
            let mut distinct: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            if distinct.len() == 1 {
                continue;
            }
            let th = tune_threshold(&scored, TuneObjective::F1, "x").unwrap();
            let mut candidates = vec![-1.0, 1.0];
            for w in distinct.windows(2) {
                candidates.push((w[0] + w[1]) / 2.0);
            }
            let best = brute_force_f1(&scored, &candidates);
            assert!((th.objective_value - best).abs() < 1e-12);
        }
    }
}
