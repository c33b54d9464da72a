//! Mini-batch training with Adam: shuffled epochs, per-example gradients
//! reduced in index order (bit-deterministic regardless of worker count),
//! per-epoch validation scoring, and best-checkpoint tracking.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, TrainingExample, Utterance};
use crate::detect;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::metrics::{average_precision, Trial};
use crate::net::{self, ModelParameters, NormMode, ParamGradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub weights: LossWeights,
    pub grad_clip: Option<f64>,
    /// Stop after this many epochs without a validation-AP improvement.
    pub early_stop_patience: Option<usize>,
    pub norm_momentum: f64,
    /// First epoch label, for resumed runs.
    pub start_epoch: usize,
}

impl TrainConfig {
    pub fn new(weights: LossWeights, epochs: usize, shuffle_seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs,
            shuffle_seed,
            weights,
            grad_clip: None,
            early_stop_patience: None,
            norm_momentum: 0.9,
            start_epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Adam moments, aligned with the parameter tensor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        Self {
            step: 0,
            names: params.tensors.iter().map(|t| t.name.clone()).collect(),
            m: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// One Adam update: biased first/second moments, bias correction,
/// `step = lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &ParamGradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.tensors.len() != state.m.len() {
        return Err(Error::ShapeMismatch(
            "gradient/optimizer tensor count mismatch".into(),
        ));
    }
    for (ti, g) in grads.tensors.iter().enumerate() {
        if let Some(bad) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {}[{bad}]", g.name)));
        }
        if g.name != state.names[ti] || g.data.len() != state.m[ti].len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient tensor {} does not match optimizer state",
                g.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (ti, g) in grads.tensors.iter().enumerate() {
        let p = &mut params.tensors[ti].data;
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_l3: f64,
    pub validation_ap: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub validation_ap: f64,
    pub params: ModelParameters,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub best: Option<BestCheckpoint>,
    pub history: TrainHistory,
    /// Epoch at which a non-finite loss aborted training; `params` then
    /// holds the last good end-of-epoch checkpoint.
    pub aborted_nonfinite: Option<usize>,
}

/// Validation trials re-scored after every epoch.
pub struct ValidationSpec<'a> {
    pub utterances: &'a [Utterance],
    pub trials: Vec<Trial>,
    pub embeddings: &'a EmbeddingTable,
}

/// Mean loss of the examples at fixed parameters (no updates).
pub fn evaluate_mean_loss(
    params: &ModelParameters,
    utterances: &[Utterance],
    examples: &[TrainingExample],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut sum = LossBreakdown {
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
        total: 0.0,
    };
    for ex in examples {
        let x = &utterances[ex.utterance_index].features;
        let (pred, _) = net::forward(params, x, &ex.target.embedding, NormMode::Batch)?;
        let b = loss::loss_components(&pred, &ex.target, weights)?;
        sum.l1 += b.l1;
        sum.l2 += b.l2;
        sum.l3 += b.l3;
        sum.total += b.total;
    }
    let n = examples.len().max(1) as f64;
    Ok(LossBreakdown {
        l1: sum.l1 / n,
        l2: sum.l2 / n,
        l3: sum.l3 / n,
        total: sum.total / n,
    })
}

pub fn train(
    params: ModelParameters,
    utterances: &[Utterance],
    examples: &[TrainingExample],
    validation: Option<&ValidationSpec>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(params, utterances, examples, validation, cfg, &mut |_| {})
}

pub fn train_with_progress(
    params: ModelParameters,
    utterances: &[Utterance],
    examples: &[TrainingExample],
    validation: Option<&ValidationSpec>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut history = TrainHistory::default();
    let mut best: Option<BestCheckpoint> = None;
    let mut last_good = params.clone();
    let mut aborted = None;
    let mut epochs_since_best = 0usize;

    let val_features = validation.map(|v| corpus::features_by_id(v.utterances));
    let val_events = validation.map(|v| corpus::events_index(v.utterances));

    let mut order: Vec<usize> = (0..examples.len()).collect();
    'epochs: for e in 0..cfg.epochs {
        let epoch = cfg.start_epoch + e;
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossBreakdown, ParamGradients, net::ForwardState)>> = batch
                .par_iter()
                .map(|&idx| {
                    let ex = &examples[idx];
                    let x = &utterances[ex.utterance_index].features;
                    let (pred, state) =
                        net::forward(&params, x, &ex.target.embedding, NormMode::Batch)?;
                    let breakdown = loss::loss_components(&pred, &ex.target, &cfg.weights)?;
                    let pred_grad = loss::loss_gradient(&pred, &ex.target, &cfg.weights)?;
                    let grads = net::backward(&params, &state, &pred_grad)?;
                    Ok((breakdown, grads, state))
                })
                .collect();

            let mut batch_grads = ParamGradients::zeros_like(&params);
            let mut batch_total = 0.0;
            let mut states = Vec::with_capacity(batch.len());
            for r in results {
                let (breakdown, grads, state) = r?;
                batch_grads.accumulate(&grads);
                batch_total += breakdown.total;
                sums.0 += breakdown.total;
                sums.1 += breakdown.l1;
                sums.2 += breakdown.l2;
                sums.3 += breakdown.l3;
                states.push(state);
            }
            seen += batch.len();
            let scale = 1.0 / batch.len() as f64;
            batch_grads.scale(scale);
            if !(batch_total * scale).is_finite() {
                params = last_good.clone();
                aborted = Some(epoch);
                break 'epochs;
            }
            if let Some(max_norm) = cfg.grad_clip {
                let norm = batch_grads.l2_norm();
                if norm > max_norm {
                    batch_grads.scale(max_norm / norm);
                }
            }
            adam_step(&mut params, &batch_grads, &mut adam, cfg)?;
            let state_refs: Vec<&net::ForwardState> = states.iter().collect();
            params.update_running_stats(&state_refs, cfg.norm_momentum);
        }

        let validation_ap = match (validation, &val_features, &val_events) {
            (Some(v), Some(features), Some(events)) => {
                let mut trials = v.trials.clone();
                detect::score_trials(
                    &params,
                    features,
                    v.embeddings,
                    events,
                    &mut trials,
                    NormMode::Batch,
                )?;
                Some(average_precision(&trials)?)
            }
            _ => None,
        };

        let n = seen as f64;
        let stats = EpochStats {
            epoch,
            mean_total: sums.0 / n,
            mean_l1: sums.1 / n,
            mean_l2: sums.2 / n,
            mean_l3: sums.3 / n,
            validation_ap,
            wall_ms: started.elapsed().as_millis(),
        };
        on_epoch(&stats);
        history.epochs.push(stats);

        last_good = params.clone();
        if let Some(ap) = validation_ap {
            let improved = best.as_ref().map(|b| ap > b.validation_ap).unwrap_or(true);
            if improved {
                best = Some(BestCheckpoint {
                    epoch,
                    validation_ap: ap,
                    params: params.clone(),
                });
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if let Some(patience) = cfg.early_stop_patience {
                    if epochs_since_best >= patience {
                        break;
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        params,
        best,
        history,
        aborted_nonfinite: aborted,
    })
}

/// Grid size, loss weights, and embedding dimension for the two published
/// experimental setups, at desk scale by default.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub num_cells: usize,
    pub weights: LossWeights,
    pub embedding_dim: usize,
}

pub fn preset(name: &str, paper_scale: bool) -> Result<Preset> {
    let embedding_dim = if paper_scale { 1024 } else { 64 };
    match name {
        "single_word" => Ok(Preset {
            name: "single_word",
            num_cells: 1,
            weights: LossWeights::new(0.5, 1.0, 2.0)?,
            embedding_dim,
        }),
        "multi_word" => Ok(Preset {
            name: "multi_word",
            num_cells: 3,
            weights: LossWeights::new(1.0, 0.5, 3.0)?,
            embedding_dim,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// History rows as CSV, mirroring [`EpochStats`].
pub fn write_history_csv(path: &std::path::Path, history: &TrainHistory) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,mean_total,mean_l1,mean_l2,mean_l3,validation_ap,wall_ms")?;
    for e in &history.epochs {
        let ap = e
            .validation_ap
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            e.epoch, e.mean_total, e.mean_l1, e.mean_l2, e.mean_l3, ap, e.wall_ms
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &std::path::Path) -> Result<TrainHistory> {
    let text = std::fs::read_to_string(path)?;
    let mut history = TrainHistory::default();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::InvalidConfig(format!("bad history row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad history value: {s}")))
        };
        history.epochs.push(EpochStats {
            epoch: parts[0]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad epoch: {}", parts[0])))?,
            mean_total: parse(parts[1])?,
            mean_l1: parse(parts[2])?,
            mean_l2: parse(parts[3])?,
            mean_l3: parse(parts[4])?,
            validation_ap: if parts[5].is_empty() {
                None
            } else {
                Some(parse(parts[5])?)
            },
            wall_ms: parts[6]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad wall_ms: {}", parts[6])))?,
        });
    }
    Ok(history)
}

/// Deterministic seeds for the independent random streams of one run.
pub fn run_seeds(root: u64) -> RunSeeds {
    RunSeeds {
        net_init: corpus::derive_seed(root, "net-init"),
        shuffle: corpus::derive_seed(root, "shuffle"),
        examples: corpus::derive_seed(root, "examples"),
        trials: corpus::derive_seed(root, "trials"),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunSeeds {
    pub net_init: u64,
    pub shuffle: u64,
    pub examples: u64,
    pub trials: u64,
}
