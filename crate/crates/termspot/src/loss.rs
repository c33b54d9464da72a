//! Composite training objective over one prediction/target pair.
//!
//! Positive cells (those owning the event center) pay `1 - cos(f_q, f')`
//! plus a localization term; every other cell pays a dissimilarity penalty
//! pushing its predicted embedding away from the query. The localization
//! term is squared error on the relative center plus squared error between
//! the square roots of the durations.

use serde::{Deserialize, Serialize};

use crate::embedding::TermEmbedding;
use crate::error::{Error, Result};
use crate::grid::CellLocal;
use crate::net::{CellGradient, Prediction, PredictionGradient};

/// Dissimilarity applied to predicted embeddings in non-event cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissimVariant {
    /// |cos|
    AbsCos,
    /// |-1 - cos| = 1 + cos
    ShiftedCos,
    /// cos^2
    CosSquared,
}

impl DissimVariant {
    pub const ALL: [DissimVariant; 3] = [
        DissimVariant::AbsCos,
        DissimVariant::ShiftedCos,
        DissimVariant::CosSquared,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DissimVariant::AbsCos => "abs_cos",
            DissimVariant::ShiftedCos => "shifted_cos",
            DissimVariant::CosSquared => "cos_squared",
        }
    }

    fn apply(&self, cos: f64) -> f64 {
        match self {
            DissimVariant::AbsCos => cos.abs(),
            DissimVariant::ShiftedCos => 1.0 + cos,
            DissimVariant::CosSquared => cos * cos,
        }
    }

    /// d dissim / d cos, with subgradient 0 at the |.| kink.
    fn derivative(&self, cos: f64) -> f64 {
        match self {
            DissimVariant::AbsCos => {
                if cos > 0.0 {
                    1.0
                } else if cos < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            DissimVariant::ShiftedCos => 1.0,
            DissimVariant::CosSquared => 2.0 * cos,
        }
    }
}

impl std::str::FromStr for DissimVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_cos" => Ok(DissimVariant::AbsCos),
            "shifted_cos" => Ok(DissimVariant::ShiftedCos),
            "cos_squared" => Ok(DissimVariant::CosSquared),
            other => Err(Error::InvalidConfig(format!(
                "unknown dissimilarity {other:?}; expected abs_cos, shifted_cos or cos_squared"
            ))),
        }
    }
}

impl std::fmt::Display for DissimVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Weight of the duration term inside the localization loss.
    pub duration: f64,
    pub dissim: DissimVariant,
}

impl LossWeights {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self> {
        let w = Self {
            l1,
            l2,
            l3,
            duration: 1.0,
            dissim: DissimVariant::CosSquared,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = duration;
        self
    }

    pub fn with_dissim(mut self, dissim: DissimVariant) -> Self {
        self.dissim = dissim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.l1, self.l2, self.l3, self.duration];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0)
            || (self.l1 == 0.0 && self.l2 == 0.0 && self.l3 == 0.0)
        {
            return Err(Error::InvalidLossWeights);
        }
        Ok(())
    }

    pub fn combine(&self, l1: f64, l2: f64, l3: f64) -> f64 {
        self.l1 * l1 + self.l2 * l2 + self.l3 * l3
    }
}

/// Localization target for a positive cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub rel_center: f64,
    pub duration: f64,
}

/// Per-example supervision: query embedding plus the indicator mask with
/// cell-local coordinates for the (at most one) positive cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTarget {
    pub embedding: TermEmbedding,
    pub cells: Vec<Option<CellTarget>>,
}

impl TrainingTarget {
    /// Target for an utterance that contains the query term at `local`.
    pub fn for_event(embedding: TermEmbedding, num_cells: usize, local: &CellLocal) -> Result<Self> {
        if local.cell_index >= num_cells {
            return Err(Error::ShapeMismatch(format!(
                "event cell {} outside grid of {num_cells} cells",
                local.cell_index
            )));
        }
        if local.duration <= 0.0 {
            return Err(Error::NonPositiveDuration(local.duration));
        }
        let mut cells = vec![None; num_cells];
        cells[local.cell_index] = Some(CellTarget {
            rel_center: local.rel_center,
            duration: local.duration,
        });
        Ok(Self { embedding, cells })
    }

    /// All-negative target for an utterance that does not contain the term.
    pub fn absent(embedding: TermEmbedding, num_cells: usize) -> Self {
        Self {
            embedding,
            cells: vec![None; num_cells],
        }
    }

    pub fn positive_cell(&self) -> Option<usize> {
        self.cells.iter().position(|c| c.is_some())
    }
}

fn check_dims(pred: &Prediction, target: &TrainingTarget) -> Result<()> {
    if pred.cells.len() != target.cells.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} cells, target {}",
            pred.cells.len(),
            target.cells.len()
        )));
    }
    let k = target.embedding.dim();
    if pred.cells.iter().any(|c| c.embedding.len() != k) {
        return Err(Error::ShapeMismatch(
            "prediction embedding dimension mismatch".into(),
        ));
    }
    Ok(())
}

fn cell_cosine(query: &[f64], pred_emb: &[f64], cell: usize) -> Result<f64> {
    crate::embedding::cosine(query, pred_emb).map_err(|_| Error::ZeroNormPrediction { cell })
}

/// Detection loss: sum over positive cells of `1 - cos(f_q, f'_i)`.
pub fn loss_l1(pred: &Prediction, target: &TrainingTarget) -> Result<f64> {
    check_dims(pred, target)?;
    let q = target.embedding.as_slice();
    let mut total = 0.0;
    for (i, t) in target.cells.iter().enumerate() {
        if t.is_some() {
            total += 1.0 - cell_cosine(q, &pred.cells[i].embedding, i)?;
        }
    }
    Ok(total)
}

/// Dissimilarity between two embedding vectors.
pub fn dissim(variant: DissimVariant, e1: &[f64], e2: &[f64]) -> Result<f64> {
    Ok(variant.apply(crate::embedding::cosine(e1, e2)?))
}

/// Non-detection loss: sum over negative cells of the dissimilarity between
/// the query and the predicted embedding.
pub fn loss_l2(pred: &Prediction, target: &TrainingTarget, variant: DissimVariant) -> Result<f64> {
    check_dims(pred, target)?;
    let q = target.embedding.as_slice();
    let mut total = 0.0;
    for (i, t) in target.cells.iter().enumerate() {
        if t.is_none() {
            total += variant.apply(cell_cosine(q, &pred.cells[i].embedding, i)?);
        }
    }
    Ok(total)
}

/// Localization loss over positive cells: squared center error plus the
/// weighted squared difference of duration square roots.
pub fn loss_l3(pred: &Prediction, target: &TrainingTarget, duration_weight: f64) -> Result<f64> {
    check_dims(pred, target)?;
    let mut total = 0.0;
    for (i, t) in target.cells.iter().enumerate() {
        if let Some(ct) = t {
            let p = &pred.cells[i];
            if ct.duration <= 0.0 {
                return Err(Error::NonPositiveDuration(ct.duration));
            }
            if p.duration <= 0.0 {
                return Err(Error::NonPositiveDuration(p.duration));
            }
            let dc = ct.rel_center - p.rel_center;
            let ds = ct.duration.sqrt() - p.duration.sqrt();
            total += dc * dc + duration_weight * ds * ds;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// All three components and their weighted sum.
pub fn loss_components(
    pred: &Prediction,
    target: &TrainingTarget,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let l1 = loss_l1(pred, target)?;
    let l2 = loss_l2(pred, target, weights.dissim)?;
    let l3 = loss_l3(pred, target, weights.duration)?;
    Ok(LossBreakdown {
        l1,
        l2,
        l3,
        total: weights.combine(l1, l2, l3),
    })
}

pub fn loss_total(pred: &Prediction, target: &TrainingTarget, weights: &LossWeights) -> Result<f64> {
    Ok(loss_components(pred, target, weights)?.total)
}

/// Analytic gradient of the weighted loss with respect to every predicted
/// embedding, relative center, and duration.
pub fn loss_gradient(
    pred: &Prediction,
    target: &TrainingTarget,
    weights: &LossWeights,
) -> Result<PredictionGradient> {
    weights.validate()?;
    check_dims(pred, target)?;
    let q = target.embedding.as_slice();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut cells = Vec::with_capacity(pred.cells.len());
    for (i, t) in target.cells.iter().enumerate() {
        let p = &pred.cells[i];
        let pn = p.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pn < 1e-12 {
            return Err(Error::ZeroNormPrediction { cell: i });
        }
        let dot: f64 = q.iter().zip(&p.embedding).map(|(a, b)| a * b).sum();
        let cos = dot / (qn * pn);
        // d cos / d f'_j = (q_j / |q| - cos * f'_j / |f'|) / |f'|
        let dcos = |j: usize| (q[j] / qn - cos * p.embedding[j] / pn) / pn;

        let mut d_embedding = vec![0.0; p.embedding.len()];
        let mut d_rel_center = 0.0;
        let mut d_duration = 0.0;
        match t {
            Some(ct) => {
                if ct.duration <= 0.0 {
                    return Err(Error::NonPositiveDuration(ct.duration));
                }
                if p.duration <= 0.0 {
                    return Err(Error::NonPositiveDuration(p.duration));
                }
                // l1: d(1 - cos) = -dcos
                for (j, g) in d_embedding.iter_mut().enumerate() {
                    *g = -weights.l1 * dcos(j);
                }
                // l3
                d_rel_center = weights.l3 * 2.0 * (p.rel_center - ct.rel_center);
                d_duration = weights.l3
                    * weights.duration
                    * (1.0 - (ct.duration / p.duration).sqrt());
            }
            None => {
                let factor = weights.l2 * weights.dissim.derivative(cos);
                for (j, g) in d_embedding.iter_mut().enumerate() {
                    *g = factor * dcos(j);
                }
            }
        }
        cells.push(CellGradient {
            d_embedding,
            d_rel_center,
            d_duration,
        });
    }
    Ok(PredictionGradient { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::CellPrediction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(values: Vec<f64>) -> TermEmbedding {
        TermEmbedding::unit(values).unwrap()
    }

    fn pred(cells: Vec<(Vec<f64>, f64, f64)>) -> Prediction {
        Prediction {
            cells: cells
                .into_iter()
                .map(|(embedding, rel_center, duration)| CellPrediction {
                    embedding,
                    rel_center,
                    duration,
                })
                .collect(),
        }
    }

    fn target_one_positive(q: TermEmbedding, cells: usize, idx: usize) -> TrainingTarget {
        TrainingTarget::for_event(
            q,
            cells,
            &CellLocal {
                cell_index: idx,
                rel_center: 10.0,
                duration: 8.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn l1_cosine_extremes() {
        let q = unit(vec![1.0, 0.0]);
        let t = target_one_positive(q, 1, 0);
        let aligned = pred(vec![(vec![2.0, 0.0], 10.0, 8.0)]);
        assert!((loss_l1(&aligned, &t).unwrap() - 0.0).abs() < 1e-12);
        let ortho = pred(vec![(vec![0.0, 3.0], 10.0, 8.0)]);
        assert!((loss_l1(&ortho, &t).unwrap() - 1.0).abs() < 1e-12);
        let anti = pred(vec![(vec![-1.0, 0.0], 10.0, 8.0)]);
        assert!((loss_l1(&anti, &t).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l1_zero_norm_prediction_fails() {
        let q = unit(vec![1.0, 0.0]);
        let t = target_one_positive(q, 1, 0);
        let zero = pred(vec![(vec![0.0, 0.0], 10.0, 8.0)]);
        assert!(matches!(
            loss_l1(&zero, &t),
            Err(Error::ZeroNormPrediction { cell: 0 })
        ));
    }

    #[test]
    fn dissim_variants() {
        let e1 = [1.0, 0.0];
        for (cos, abs, shifted, squared) in [
            (0.5, 0.5, 1.5, 0.25),
            (-0.5, 0.5, 0.5, 0.25),
            (-1.0, 1.0, 0.0, 1.0),
        ] {
            let e2 = [cos, (1.0f64 - cos * cos).sqrt()];
            let a = dissim(DissimVariant::AbsCos, &e1, &e2).unwrap();
            let s = dissim(DissimVariant::ShiftedCos, &e1, &e2).unwrap();
            let c = dissim(DissimVariant::CosSquared, &e1, &e2).unwrap();
            assert!((a - abs).abs() < 1e-12, "abs at cos={cos}");
            assert!((s - shifted).abs() < 1e-12, "shifted at cos={cos}");
            assert!((c - squared).abs() < 1e-12, "squared at cos={cos}");
        }
        assert!(dissim(DissimVariant::AbsCos, &[0.0, 0.0], &e1).is_err());
    }

    #[test]
    fn l2_masking_and_values() {
        let q = unit(vec![1.0, 0.0]);
        // all cells positive -> empty sum
        let t = target_one_positive(q.clone(), 1, 0);
        let p = pred(vec![(vec![1.0, 1.0], 10.0, 8.0)]);
        assert_eq!(loss_l2(&p, &t, DissimVariant::CosSquared).unwrap(), 0.0);

        // one negative orthogonal cell under cos^2 -> 0
        let t = TrainingTarget::absent(q.clone(), 1);
        let p = pred(vec![(vec![0.0, 5.0], 10.0, 8.0)]);
        assert!(loss_l2(&p, &t, DissimVariant::CosSquared).unwrap() < 1e-12);

        // two negatives at cos 0.5 and -0.5 under cos^2 -> 0.5
        let t = TrainingTarget::absent(q, 2);
        let s = (0.75f64).sqrt();
        let p = pred(vec![
            (vec![0.5, s], 10.0, 8.0),
            (vec![-0.5, s], 10.0, 8.0),
        ]);
        assert!((loss_l2(&p, &t, DissimVariant::CosSquared).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l3_hand_values() {
        let q = unit(vec![1.0, 0.0]);
        let t = TrainingTarget::for_event(
            q,
            1,
            &CellLocal {
                cell_index: 0,
                rel_center: 13.0,
                duration: 10.0,
            },
        )
        .unwrap();

        let exact = pred(vec![(vec![1.0, 0.0], 13.0, 10.0)]);
        assert_eq!(loss_l3(&exact, &t, 1.0).unwrap(), 0.0);

        let off = pred(vec![(vec![1.0, 0.0], 10.0, 4.0)]);
        let expected = 9.0 + (10.0f64.sqrt() - 2.0) * (10.0f64.sqrt() - 2.0);
        let got = loss_l3(&off, &t, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 10.350889359326483).abs() < 1e-12);

        assert_eq!(loss_l3(&off, &t, 0.0).unwrap(), 9.0);

        let bad = pred(vec![(vec![1.0, 0.0], 10.0, 0.0)]);
        assert!(matches!(
            loss_l3(&bad, &t, 1.0),
            Err(Error::NonPositiveDuration(_))
        ));
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let a = LossWeights::new(0.5, 1.0, 2.0).unwrap();
        assert!((a.combine(0.2, 0.3, 0.1) - 0.6).abs() < 1e-12);
        let b = LossWeights::new(1.0, 0.5, 3.0).unwrap();
        assert!((b.combine(0.2, 0.3, 0.1) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_characterization_cos_squared() {
        let q = unit(vec![1.0, 0.0]);
        let t = TrainingTarget::for_event(
            q,
            2,
            &CellLocal {
                cell_index: 0,
                rel_center: 13.0,
                duration: 10.0,
            },
        )
        .unwrap();
        let w = LossWeights::new(1.0, 1.0, 1.0).unwrap();

        // aligned positive, orthogonal negative, exact localization
        let perfect = pred(vec![
            (vec![3.0, 0.0], 13.0, 10.0),
            (vec![0.0, 1.0], 1.0, 1.0),
        ]);
        assert!(loss_total(&perfect, &t, &w).unwrap() < 1e-12);

        // each defect alone makes the loss positive
        let bad_align = pred(vec![
            (vec![1.0, 1.0], 13.0, 10.0),
            (vec![0.0, 1.0], 1.0, 1.0),
        ]);
        assert!(loss_total(&bad_align, &t, &w).unwrap() > 1e-3);
        let bad_neg = pred(vec![
            (vec![3.0, 0.0], 13.0, 10.0),
            (vec![1.0, 1.0], 1.0, 1.0),
        ]);
        assert!(loss_total(&bad_neg, &t, &w).unwrap() > 1e-3);
        let bad_loc = pred(vec![
            (vec![3.0, 0.0], 12.0, 10.0),
            (vec![0.0, 1.0], 1.0, 1.0),
        ]);
        assert!(loss_total(&bad_loc, &t, &w).unwrap() > 1e-3);
    }

    #[test]
    fn scale_invariance_of_embedding_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k = 6;
            let q = unit((0..k).map(|_| rng.random::<f64>() - 0.5).collect());
            let t = target_one_positive(q, 3, 1);
            let mut cells = Vec::new();
            for _ in 0..3 {
                let emb: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 0.5).collect();
                cells.push((emb, 5.0, 4.0));
            }
            let p1 = pred(cells.clone());
            let p2 = pred(
                cells
                    .into_iter()
                    .map(|(e, a, b)| (e.iter().map(|v| v * 2.0).collect(), a, b))
                    .collect(),
            );
            for variant in DissimVariant::ALL {
                let a = loss_l2(&p1, &t, variant).unwrap();
                let b = loss_l2(&p2, &t, variant).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
            let a = loss_l1(&p1, &t).unwrap();
            let b = loss_l1(&p2, &t).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn component_sum_matches_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let k = 5;
            let q = unit((0..k).map(|_| rng.random::<f64>() - 0.5).collect());
            let positive = rng.random::<f64>() < 0.7;
            let t = if positive {
                target_one_positive(q, 3, rng.random_range(0..3))
            } else {
                TrainingTarget::absent(q, 3)
            };
            let cells = (0..3)
                .map(|_| {
                    (
                        (0..k).map(|_| rng.random::<f64>() - 0.5).collect(),
                        rng.random::<f64>() * 20.0,
                        rng.random::<f64>() * 30.0 + 0.1,
                    )
                })
                .collect();
            let p = pred(cells);
            let w = LossWeights::new(0.5, 1.0, 2.0)
                .unwrap()
                .with_duration(0.7)
                .with_dissim(DissimVariant::AbsCos);
            let b = loss_components(&p, &t, &w).unwrap();
            assert!(b.l1 >= 0.0 && b.l2 >= 0.0 && b.l3 >= 0.0 && b.total >= 0.0);
            assert!((w.combine(b.l1, b.l2, b.l3) - b.total).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_zero_at_l3_minimum() {
        let q = unit(vec![1.0, 0.0]);
        let t = TrainingTarget::for_event(
            q,
            1,
            &CellLocal {
                cell_index: 0,
                rel_center: 13.0,
                duration: 10.0,
            },
        )
        .unwrap();
        let p = pred(vec![(vec![1.0, 0.0], 13.0, 10.0)]);
        let w = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        let g = loss_gradient(&p, &t, &w).unwrap();
        assert_eq!(g.cells[0].d_rel_center, 0.0);
        assert_eq!(g.cells[0].d_duration, 0.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(LossWeights::new(1.0, 0.0, 0.0).is_ok());
    }
}
