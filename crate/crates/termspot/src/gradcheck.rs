//! Finite-difference verification of the analytic gradients, at two levels:
//! the loss gradients in prediction space, and the end-to-end gradients of
//! the weighted loss with respect to every network parameter.
//!
//! Central differences cannot be trusted across non-smooth points, so
//! instances are resampled when they land too close to one: the |.| kinks of
//! the absolute-value dissimilarities (measured as distance of the cosine
//! from the kink) and the ReLU kinks (measured as the smallest
//! |pre-activation| in the forward pass).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::CellLocal;
use crate::loss::{self, DissimVariant, LossWeights, TrainingTarget};
use crate::net::{self, CellPrediction, ConvBlockConfig, EncoderPooling, ModelParameters, NetConfig, NormMode, Prediction, PredictionGradient};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Accepted random instances per check.
    pub instances: usize,
    pub seed: u64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Reject instances whose cosine lies within this distance of a |.| kink.
    pub cos_margin: f64,
    /// Reject net instances whose smallest |pre-activation| is below this.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 2024,
            fd_step: 1e-4,
            tolerance: 1e-4,
            cos_margin: 1e-3,
            kink_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub instances: usize,
    pub skipped: usize,
    pub checked_values: usize,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor: differences below the floor scale
/// (1e-3) are measured against the floor instead, so near-zero gradients do
/// not amplify finite-difference noise into spurious failures.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Which loss the check differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossComponent {
    L1,
    L2(DissimVariant),
    L3,
    Total(DissimVariant),
}

impl LossComponent {
    pub fn label(&self) -> String {
        match self {
            LossComponent::L1 => "l1".into(),
            LossComponent::L2(v) => format!("l2[{v}]"),
            LossComponent::L3 => "l3".into(),
            LossComponent::Total(v) => format!("total[{v}]"),
        }
    }

    fn weights(&self, rng: &mut ChaCha8Rng) -> LossWeights {
        match self {
            LossComponent::L1 => LossWeights::new(1.0, 0.0, 0.0).unwrap(),
            LossComponent::L2(v) => LossWeights::new(0.0, 1.0, 0.0).unwrap().with_dissim(*v),
            LossComponent::L3 => LossWeights::new(0.0, 0.0, 1.0)
                .unwrap()
                .with_duration(0.8),
            LossComponent::Total(v) => {
                let r = |rng: &mut ChaCha8Rng| 0.2 + 1.8 * rng.random::<f64>();
                LossWeights::new(r(rng), r(rng), r(rng))
                    .unwrap()
                    .with_duration(0.3 + 1.2 * rng.random::<f64>())
                    .with_dissim(*v)
            }
        }
    }

    fn variant(&self) -> Option<DissimVariant> {
        match self {
            LossComponent::L2(v) | LossComponent::Total(v) => Some(*v),
            _ => None,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct LossInstance {
    pred: Prediction,
    target: TrainingTarget,
    weights: LossWeights,
}

/// Sample a random instance, rejecting those within the kink margins.
fn sample_loss_instance(
    rng: &mut ChaCha8Rng,
    component: LossComponent,
    cfg: &GradCheckConfig,
) -> Option<LossInstance> {
    let cells = rng.random_range(1..=3usize);
    let k = rng.random_range(4..=16usize);
    let cell_width = 32.0;
    let total = cell_width * cells as f64;
    let query = crate::embedding::TermEmbedding::unit(normal_vec(rng, k)).ok()?;

    let target = if rng.random::<f64>() < 0.8 {
        TrainingTarget::for_event(
            query.clone(),
            cells,
            &CellLocal {
                cell_index: rng.random_range(0..cells),
                rel_center: rng.random::<f64>() * cell_width,
                duration: 0.5 + rng.random::<f64>() * (total - 0.5),
            },
        )
        .ok()?
    } else {
        TrainingTarget::absent(query.clone(), cells)
    };

    let mut pred_cells = Vec::with_capacity(cells);
    for _ in 0..cells {
        let mut embedding = normal_vec(rng, k);
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 0.5 {
            embedding.iter_mut().for_each(|v| *v /= norm.max(1e-9));
        }
        pred_cells.push(CellPrediction {
            embedding,
            rel_center: rng.random::<f64>() * cell_width,
            duration: 0.2 + rng.random::<f64>() * total,
        });
    }
    let pred = Prediction { cells: pred_cells };
    let weights = component.weights(rng);

    if let Some(variant) = component.variant() {
        for (i, t) in target.cells.iter().enumerate() {
            if t.is_none() {
                let cos = crate::embedding::cosine(
                    query.as_slice(),
                    &pred.cells[i].embedding,
                )
                .ok()?;
                let near_kink = match variant {
                    DissimVariant::AbsCos => cos.abs() < cfg.cos_margin,
                    DissimVariant::ShiftedCos => cos < -1.0 + cfg.cos_margin,
                    DissimVariant::CosSquared => false,
                };
                if near_kink {
                    return None;
                }
            }
        }
    }
    Some(LossInstance {
        pred,
        target,
        weights,
    })
}

fn component_loss(
    component: LossComponent,
    pred: &Prediction,
    target: &TrainingTarget,
    weights: &LossWeights,
) -> Result<f64> {
    match component {
        LossComponent::L1 => loss::loss_l1(pred, target),
        LossComponent::L2(v) => loss::loss_l2(pred, target, v),
        LossComponent::L3 => loss::loss_l3(pred, target, weights.duration),
        LossComponent::Total(_) => loss::loss_total(pred, target, weights),
    }
}

pub type LossGradFn =
    dyn Fn(&Prediction, &TrainingTarget, &LossWeights) -> Result<PredictionGradient> + Sync;

/// Check one loss component against central differences in prediction space
/// (every embedding coordinate, relative center, and duration).
///
/// The analytic gradient is supplied as a function so a deliberately broken
/// one can be injected as a negative control.
pub fn check_loss_gradients(
    cfg: &GradCheckConfig,
    component: LossComponent,
    grad_fn: &LossGradFn,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        crate::corpus::derive_seed(cfg.seed, &format!("gradcheck/{}", component.label())),
    );
    let mut accepted = 0usize;
    let mut skipped = 0usize;
    let mut checked_values = 0usize;
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut attempts = 0usize;
    let max_attempts = cfg.instances * 50;

    while accepted < cfg.instances {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "gradcheck {}: instance sampling stalled after {max_attempts} attempts",
                component.label()
            )));
        }
        let Some(mut inst) = sample_loss_instance(&mut rng, component, cfg) else {
            skipped += 1;
            continue;
        };
        accepted += 1;

        // the component-only weights zero out the other parts, so the total
        // gradient equals the component gradient
        let analytic = grad_fn(&inst.pred, &inst.target, &inst.weights)?;
        let h = cfg.fd_step;
        let cells = inst.pred.cells.len();
        for ci in 0..cells {
            let k = inst.pred.cells[ci].embedding.len();
            for j in 0..k + 2 {
                let read = |p: &Prediction| -> f64 {
                    match j {
                        x if x < k => p.cells[ci].embedding[x],
                        x if x == k => p.cells[ci].rel_center,
                        _ => p.cells[ci].duration,
                    }
                };
                let write = |p: &mut Prediction, v: f64| match j {
                    x if x < k => p.cells[ci].embedding[x] = v,
                    x if x == k => p.cells[ci].rel_center = v,
                    _ => p.cells[ci].duration = v,
                };
                let orig = read(&inst.pred);
                write(&mut inst.pred, orig + h);
                let f_plus = component_loss(component, &inst.pred, &inst.target, &inst.weights)?;
                write(&mut inst.pred, orig - h);
                let f_minus = component_loss(component, &inst.pred, &inst.target, &inst.weights)?;
                write(&mut inst.pred, orig);
                let numeric = (f_plus - f_minus) / (2.0 * h);
                let a = match j {
                    x if x < k => analytic.cells[ci].d_embedding[x],
                    x if x == k => analytic.cells[ci].d_rel_center,
                    _ => analytic.cells[ci].d_duration,
                };
                let weighted_a = a;
                let err = rel_err(weighted_a, numeric);
                checked_values += 1;
                if err > max_rel_err {
                    max_rel_err = err;
                    worst = Some(format!(
                        "instance {accepted} cell {ci} coord {j}: analytic {weighted_a:.6e}, numeric {numeric:.6e}"
                    ));
                }
            }
        }
    }
    Ok(GradCheckReport {
        label: component.label(),
        instances: accepted,
        skipped,
        checked_values,
        max_rel_err,
        worst,
        tolerance: cfg.tolerance,
    })
}

fn small_net_config(seed: u64) -> NetConfig {
    NetConfig {
        input_frames: 12,
        input_dim: 4,
        conv_blocks: vec![
            ConvBlockConfig {
                out_channels: 6,
                kernel: 3,
                stride: 1,
                pool: 2,
            },
            ConvBlockConfig {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pool: 2,
            },
        ],
        encoder_dim: 8,
        embedding_dim: 8,
        num_cells: 2,
        normalize_activations: true,
        pooling: EncoderPooling::Flatten,
        seed,
    }
}

/// Check the end-to-end gradient of the weighted loss with respect to every
/// network parameter on a small network, cycling through the dissimilarity
/// variants across instances.
pub fn check_net_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(crate::corpus::derive_seed(cfg.seed, "gradcheck/net"));
    let mut accepted = 0usize;
    let mut skipped = 0usize;
    let mut checked_values = 0usize;
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut attempts = 0usize;
    let max_attempts = cfg.instances * 50;

    while accepted < cfg.instances {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "net gradcheck: instance sampling stalled after {max_attempts} attempts"
            )));
        }
        let variant = DissimVariant::ALL[attempts % 3];
        let net_cfg = small_net_config(rng.random::<u64>());
        let params = ModelParameters::init(net_cfg.clone())?;
        let x = FeatureMatrix::from_data(
            net_cfg.input_frames,
            net_cfg.input_dim,
            normal_vec(&mut rng, net_cfg.input_frames * net_cfg.input_dim),
        )?;
        let query =
            crate::embedding::TermEmbedding::unit(normal_vec(&mut rng, net_cfg.embedding_dim))?;
        let target = if rng.random::<f64>() < 0.8 {
            let w = net_cfg.cell_width();
            TrainingTarget::for_event(
                query.clone(),
                net_cfg.num_cells,
                &CellLocal {
                    cell_index: rng.random_range(0..net_cfg.num_cells),
                    rel_center: rng.random::<f64>() * w,
                    duration: 0.5 + rng.random::<f64>() * (net_cfg.input_frames as f64 - 0.5),
                },
            )?
        } else {
            TrainingTarget::absent(query.clone(), net_cfg.num_cells)
        };
        let r = |rng: &mut ChaCha8Rng| 0.2 + 1.8 * rng.random::<f64>();
        let weights = LossWeights::new(r(&mut rng), r(&mut rng), r(&mut rng))?
            .with_duration(0.3 + 1.2 * rng.random::<f64>())
            .with_dissim(variant);

        let (pred, state) = net::forward(&params, &x, &query, NormMode::Batch)?;
        // reject instances near a ReLU kink or a dissimilarity kink, where
        // central differences straddle the non-smooth point
        if state.kink_margin() < cfg.kink_margin {
            skipped += 1;
            continue;
        }
        let near_cos_kink = target.cells.iter().enumerate().any(|(i, t)| {
            if t.is_some() {
                return false;
            }
            let cos =
                crate::embedding::cosine(query.as_slice(), &pred.cells[i].embedding).unwrap_or(0.0);
            match variant {
                DissimVariant::AbsCos => cos.abs() < 10.0 * cfg.cos_margin,
                DissimVariant::ShiftedCos => cos < -1.0 + cfg.cos_margin,
                DissimVariant::CosSquared => false,
            }
        });
        if near_cos_kink {
            skipped += 1;
            continue;
        }
        accepted += 1;

        let pred_grad = loss::loss_gradient(&pred, &target, &weights)?;
        let analytic = net::backward(&params, &state, &pred_grad)?;

        let mut perturbed = params.clone();
        let h = cfg.fd_step;
        for ti in 0..params.tensors.len() {
            for i in 0..params.tensors[ti].data.len() {
                let orig = params.tensors[ti].data[i];
                perturbed.tensors[ti].data[i] = orig + h;
                let f_plus = {
                    let (p, _) = net::forward(&perturbed, &x, &query, NormMode::Batch)?;
                    loss::loss_total(&p, &target, &weights)?
                };
                perturbed.tensors[ti].data[i] = orig - h;
                let f_minus = {
                    let (p, _) = net::forward(&perturbed, &x, &query, NormMode::Batch)?;
                    loss::loss_total(&p, &target, &weights)?
                };
                perturbed.tensors[ti].data[i] = orig;
                let numeric = (f_plus - f_minus) / (2.0 * h);
                let a = analytic.tensors[ti].data[i];
                let err = rel_err(a, numeric);
                checked_values += 1;
                if err > max_rel_err {
                    max_rel_err = err;
                    worst = Some(format!(
                        "instance {accepted} {}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}",
                        params.tensors[ti].name
                    ));
                }
            }
        }
    }
    Ok(GradCheckReport {
        label: "net".into(),
        instances: accepted,
        skipped,
        checked_values,
        max_rel_err,
        worst,
        tolerance: cfg.tolerance,
    })
}

/// All loss components plus the end-to-end network check.
pub fn run_full_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let components = [
        LossComponent::L1,
        LossComponent::L2(DissimVariant::AbsCos),
        LossComponent::L2(DissimVariant::ShiftedCos),
        LossComponent::L2(DissimVariant::CosSquared),
        LossComponent::L3,
        LossComponent::Total(DissimVariant::AbsCos),
        LossComponent::Total(DissimVariant::ShiftedCos),
        LossComponent::Total(DissimVariant::CosSquared),
    ];
    for c in components {
        reports.push(check_loss_gradients(cfg, c, &loss::loss_gradient)?);
    }
    reports.push(check_net_gradients(cfg)?);
    Ok(reports)
}
