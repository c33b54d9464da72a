//! The prediction network: a 1-D convolutional encoder over the utterance,
//! concatenation with the query term embedding, and a linear head emitting
//! `C * (K + 2)` values: per cell a candidate embedding (K raw values), a
//! relative event center, and an event duration.
//!
//! Raw head outputs map to coordinates as `t' = W * sigmoid(u)` (confined to
//! the cell) and `dt' = T * sigmoid(v) + eps` (positive, may exceed the cell
//! width). Forward and backward are hand-rolled reverse-mode passes over flat
//! `f64` tensors; gradients are verified against central finite differences
//! in the gradcheck suite.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TermEmbedding;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Floor added to predicted durations so the square root in the localization
/// loss never sees zero.
pub const DURATION_EPS: f64 = 1e-3;

const NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPooling {
    /// Flatten the final feature map (channels x time) before projection.
    Flatten,
    /// Average each channel over time before projection.
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Average-pooling window and stride; 1 disables pooling.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_frames: usize,
    pub input_dim: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    /// Encoder output dimension M.
    pub encoder_dim: usize,
    /// Term embedding dimension K.
    pub embedding_dim: usize,
    /// Number of grid cells C.
    pub num_cells: usize,
    pub normalize_activations: bool,
    pub pooling: EncoderPooling,
    pub seed: u64,
}

impl NetConfig {
    /// Desk-scale default encoder: four conv blocks, kernel 3, stride 1,
    /// per-channel normalization, pooling /2, flattened into a linear
    /// projection to M.
    pub fn desk_scale(
        input_frames: usize,
        input_dim: usize,
        embedding_dim: usize,
        num_cells: usize,
        seed: u64,
    ) -> Self {
        let block = |out_channels| ConvBlockConfig {
            out_channels,
            kernel: 3,
            stride: 1,
            pool: 2,
        };
        Self {
            input_frames,
            input_dim,
            conv_blocks: vec![block(16), block(32), block(32), block(64)],
            encoder_dim: 32,
            embedding_dim,
            num_cells,
            normalize_activations: true,
            pooling: EncoderPooling::Flatten,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_frames > 0
            && self.input_dim > 0
            && self.encoder_dim > 0
            && self.embedding_dim > 0
            && self.num_cells > 0
            && !self.conv_blocks.is_empty();
        if !dims_ok {
            return Err(Error::InvalidConfig(
                "all network dimensions must be positive".into(),
            ));
        }
        for b in &self.conv_blocks {
            if b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0 || b.pool == 0 {
                return Err(Error::InvalidConfig(format!(
                    "invalid conv block {b:?}: channels/stride/pool must be positive, kernel odd"
                )));
            }
        }
        if self.feature_len() == 0 {
            return Err(Error::InvalidConfig(
                "encoder reduces the input to zero time steps".into(),
            ));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        self.input_frames as f64 / self.num_cells as f64
    }

    /// (channels, time) after each block.
    fn stage_dims(&self) -> Vec<(usize, usize)> {
        let mut t = self.input_frames;
        let mut dims = Vec::with_capacity(self.conv_blocks.len());
        for b in &self.conv_blocks {
            let pad = b.kernel / 2;
            t = (t + 2 * pad - b.kernel) / b.stride + 1;
            t /= b.pool;
            dims.push((b.out_channels, t));
        }
        dims
    }

    /// Length of the encoder feature vector fed to the projection layer.
    pub fn feature_len(&self) -> usize {
        let (ch, t) = *self.stage_dims().last().expect("at least one block");
        match self.pooling {
            EncoderPooling::Flatten => ch * t,
            EncoderPooling::GlobalAverage => ch,
        }
    }

    pub fn head_in(&self) -> usize {
        self.encoder_dim + self.embedding_dim
    }

    pub fn head_out(&self) -> usize {
        self.num_cells * (self.embedding_dim + 2)
    }
}

/// A named flat tensor; shapes are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![0.0; len],
        }
    }

    fn filled(name: &str, shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![value; len],
        }
    }

    fn xavier(name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
            .collect();
        Self {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

/// Per-block running normalization statistics for inference mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All model weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub version: u32,
    pub seed: u64,
    pub config: NetConfig,
    pub tensors: Vec<Tensor>,
    pub running_stats: Vec<RunningStats>,
}

impl ModelParameters {
    /// Deterministic initialization from the config seed: Xavier-uniform
    /// weights, zero biases, unit normalization scales.
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Vec::new();
        let mut running_stats = Vec::new();
        let mut in_ch = config.input_dim;
        for (i, b) in config.conv_blocks.iter().enumerate() {
            let fan_in = in_ch * b.kernel;
            let fan_out = b.out_channels * b.kernel;
            tensors.push(Tensor::xavier(
                &format!("conv{i}.weight"),
                vec![b.out_channels, in_ch, b.kernel],
                fan_in,
                fan_out,
                &mut rng,
            ));
            tensors.push(Tensor::zeros(&format!("conv{i}.bias"), vec![b.out_channels]));
            if config.normalize_activations {
                tensors.push(Tensor::filled(
                    &format!("norm{i}.gamma"),
                    vec![b.out_channels],
                    1.0,
                ));
                tensors.push(Tensor::zeros(&format!("norm{i}.beta"), vec![b.out_channels]));
            }
            running_stats.push(RunningStats {
                mean: vec![0.0; b.out_channels],
                var: vec![1.0; b.out_channels],
            });
            in_ch = b.out_channels;
        }
        let feat = config.feature_len();
        tensors.push(Tensor::xavier(
            "proj.weight",
            vec![config.encoder_dim, feat],
            feat,
            config.encoder_dim,
            &mut rng,
        ));
        tensors.push(Tensor::zeros("proj.bias", vec![config.encoder_dim]));
        let (hin, hout) = (config.head_in(), config.head_out());
        tensors.push(Tensor::xavier(
            "head.weight",
            vec![hout, hin],
            hin,
            hout,
            &mut rng,
        ));
        tensors.push(Tensor::zeros("head.bias", vec![hout]));
        let seed = config.seed;
        Ok(Self {
            version: CHECKPOINT_FORMAT,
            seed,
            config,
            tensors,
            running_stats,
        })
    }

    /// All-zero weights with the given config (useful in tests).
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name:?}")))
    }

    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name:?}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Cheap fingerprint tying forward states to the parameters that
    /// produced them. Covers shapes plus the boundary values of every
    /// tensor, which change under any optimizer update in practice.
    fn stamp(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for t in &self.tensors {
            mix(t.data.len() as u64);
            if let (Some(first), Some(last)) = (t.data.first(), t.data.last()) {
                mix(first.to_bits());
                mix(last.to_bits());
            }
        }
        h
    }

    /// Replace the final linear layer for a new grid/embedding size while
    /// preserving every encoder weight bit-exactly.
    pub fn replace_head(&self, new_cells: usize, new_dim: usize, seed: u64) -> Result<Self> {
        if new_cells == 0 || new_dim == 0 {
            return Err(Error::InvalidConfig(
                "replacement head dimensions must be positive".into(),
            ));
        }
        let mut out = self.clone();
        out.config.num_cells = new_cells;
        out.config.embedding_dim = new_dim;
        let (hin, hout) = (out.config.head_in(), out.config.head_out());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *out.tensor_mut("head.weight")? =
            Tensor::xavier("head.weight", vec![hout, hin], hin, hout, &mut rng);
        *out.tensor_mut("head.bias")? = Tensor::zeros("head.bias", vec![hout]);
        Ok(out)
    }

    /// Momentum update of the running normalization statistics from one
    /// batch of per-example statistics.
    pub fn update_running_stats(&mut self, batch: &[&ForwardState], momentum: f64) {
        if batch.is_empty() {
            return;
        }
        for (bi, rs) in self.running_stats.iter_mut().enumerate() {
            for c in 0..rs.mean.len() {
                let mut mean = 0.0;
                let mut var = 0.0;
                for st in batch {
                    mean += st.blocks[bi].norm_mean[c];
                    var += st.blocks[bi].norm_var[c];
                }
                mean /= batch.len() as f64;
                var /= batch.len() as f64;
                rs.mean[c] = momentum * rs.mean[c] + (1.0 - momentum) * mean;
                rs.var[c] = momentum * rs.var[c] + (1.0 - momentum) * var;
            }
        }
    }
}

/// Gradients with the same named-tensor structure as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub tensors: Vec<Tensor>,
}

impl ParamGradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, t.shape.clone()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn accumulate(&mut self, other: &ParamGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Zero the gradient of every tensor whose name starts with `prefix`
    /// (freezing that parameter subset).
    pub fn mask_prefix(&mut self, prefix: &str) {
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-cell network output in prediction space.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    /// Raw (unnormalized) candidate embedding.
    pub embedding: Vec<f64>,
    /// Event center in frames relative to the cell start, in [0, W].
    pub rel_center: f64,
    /// Event duration in frames, in (0, T + eps].
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cells: Vec<CellPrediction>,
}

impl Prediction {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Gradient of a scalar loss with respect to a [`Prediction`].
#[derive(Debug, Clone)]
pub struct PredictionGradient {
    pub cells: Vec<CellGradient>,
}

#[derive(Debug, Clone)]
pub struct CellGradient {
    pub d_embedding: Vec<f64>,
    pub d_rel_center: f64,
    pub d_duration: f64,
}

impl PredictionGradient {
    pub fn zeros(num_cells: usize, dim: usize) -> Self {
        Self {
            cells: (0..num_cells)
                .map(|_| CellGradient {
                    d_embedding: vec![0.0; dim],
                    d_rel_center: 0.0,
                    d_duration: 0.0,
                })
                .collect(),
        }
    }
}

/// Whether normalization uses the current example's statistics or the
/// stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Channel-major feature map: `data[c * time + t]`.
#[derive(Debug, Clone)]
struct Fm {
    ch: usize,
    time: usize,
    data: Vec<f64>,
}

impl Fm {
    fn zeros(ch: usize, time: usize) -> Self {
        Self {
            ch,
            time,
            data: vec![0.0; ch * time],
        }
    }
}

#[derive(Debug, Clone)]
struct BlockState {
    input: Fm,
    /// Normalized values (x-hat) when normalization is enabled, otherwise
    /// unused.
    xhat: Fm,
    norm_mean: Vec<f64>,
    norm_var: Vec<f64>,
    inv_std: Vec<f64>,
    /// Values entering ReLU (after conv and optional normalization).
    pre_relu: Fm,
    /// Values after ReLU, before pooling.
    relu_out: Fm,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    params_stamp: u64,
    blocks: Vec<BlockState>,
    last_out: Fm,
    proj_pre: Vec<f64>,
    head_in: Vec<f64>,
    head_raw: Vec<f64>,
    norm_mode: NormMode,
}

impl ForwardState {
    /// Smallest |pre-activation| across all ReLU inputs: the distance to the
    /// nearest activation kink, used by the gradcheck harness to reject
    /// instances where finite differences straddle a non-smooth point.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for b in &self.blocks {
            for v in &b.pre_relu.data {
                margin = margin.min(v.abs());
            }
        }
        for v in &self.proj_pre {
            margin = margin.min(v.abs());
        }
        margin
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run the network on one utterance/query pair.
pub fn forward(
    params: &ModelParameters,
    x: &FeatureMatrix,
    query: &TermEmbedding,
    mode: NormMode,
) -> Result<(Prediction, ForwardState)> {
    let cfg = &params.config;
    if x.frames() != cfg.input_frames || x.dim() != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x{}, network expects {}x{}",
            x.frames(),
            x.dim(),
            cfg.input_frames,
            cfg.input_dim
        )));
    }
    if query.dim() != cfg.embedding_dim {
        return Err(Error::ShapeMismatch(format!(
            "query embedding dim {} != {}",
            query.dim(),
            cfg.embedding_dim
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("input features".into()));
    }

    // transpose to channel-major
    let mut cur = Fm::zeros(cfg.input_dim, cfg.input_frames);
    for t in 0..cfg.input_frames {
        for d in 0..cfg.input_dim {
            cur.data[d * cfg.input_frames + t] = x.get(t, d);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.conv_blocks.len());
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        let w = params.tensor(&format!("conv{i}.weight"))?;
        let bias = params.tensor(&format!("conv{i}.bias"))?;
        let conv = conv1d_forward(&cur, &w.data, &bias.data, b.out_channels, b.kernel, b.stride);

        let (pre_relu, xhat, norm_mean, norm_var, inv_std);
        if cfg.normalize_activations {
            let gamma = params.tensor(&format!("norm{i}.gamma"))?;
            let beta = params.tensor(&format!("norm{i}.beta"))?;
            let (mean, var) = match mode {
                NormMode::Batch => channel_stats(&conv),
                NormMode::Running => (
                    params.running_stats[i].mean.clone(),
                    params.running_stats[i].var.clone(),
                ),
            };
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut xh = Fm::zeros(conv.ch, conv.time);
            let mut y = Fm::zeros(conv.ch, conv.time);
            for c in 0..conv.ch {
                let off = c * conv.time;
                for t in 0..conv.time {
                    let h = (conv.data[off + t] - mean[c]) * istd[c];
                    xh.data[off + t] = h;
                    y.data[off + t] = gamma.data[c] * h + beta.data[c];
                }
            }
            pre_relu = y;
            xhat = xh;
            norm_mean = mean;
            norm_var = var;
            inv_std = istd;
        } else {
            pre_relu = conv.clone();
            xhat = Fm::zeros(0, 0);
            norm_mean = vec![0.0; conv.ch];
            norm_var = vec![1.0; conv.ch];
            inv_std = vec![1.0; conv.ch];
        }

        let mut relu_out = Fm::zeros(pre_relu.ch, pre_relu.time);
        for (o, v) in relu_out.data.iter_mut().zip(&pre_relu.data) {
            *o = v.max(0.0);
        }

        let pooled = avg_pool_forward(&relu_out, b.pool);
        let input = std::mem::replace(&mut cur, pooled);
        blocks.push(BlockState {
            input,
            xhat,
            norm_mean,
            norm_var,
            inv_std,
            pre_relu,
            relu_out,
        });
    }

    let last_out = cur;
    let feat: Vec<f64> = match cfg.pooling {
        EncoderPooling::Flatten => last_out.data.clone(),
        EncoderPooling::GlobalAverage => {
            let mut v = vec![0.0; last_out.ch];
            for c in 0..last_out.ch {
                let off = c * last_out.time;
                v[c] = last_out.data[off..off + last_out.time].iter().sum::<f64>()
                    / last_out.time as f64;
            }
            v
        }
    };

    let pw = params.tensor("proj.weight")?;
    let pb = params.tensor("proj.bias")?;
    let proj_pre = linear_forward(&feat, &pw.data, &pb.data, cfg.encoder_dim);
    let mut head_in = Vec::with_capacity(cfg.head_in());
    head_in.extend(proj_pre.iter().map(|v| v.max(0.0)));
    head_in.extend_from_slice(query.as_slice());

    let hw = params.tensor("head.weight")?;
    let hb = params.tensor("head.bias")?;
    let head_raw = linear_forward(&head_in, &hw.data, &hb.data, cfg.head_out());

    let w_cell = cfg.cell_width();
    let t_total = cfg.input_frames as f64;
    let k = cfg.embedding_dim;
    let cells = (0..cfg.num_cells)
        .map(|i| {
            let base = i * (k + 2);
            CellPrediction {
                embedding: head_raw[base..base + k].to_vec(),
                rel_center: w_cell * sigmoid(head_raw[base + k]),
                duration: t_total * sigmoid(head_raw[base + k + 1]) + DURATION_EPS,
            }
        })
        .collect();

    let state = ForwardState {
        params_stamp: params.stamp(),
        blocks,
        last_out,
        proj_pre,
        head_in,
        head_raw,
        norm_mode: mode,
    };
    Ok((Prediction { cells }, state))
}

/// Reverse pass: gradients for every parameter given gradients in
/// prediction space. The state must come from a forward call on the same
/// parameter values.
pub fn backward(
    params: &ModelParameters,
    state: &ForwardState,
    grad: &PredictionGradient,
) -> Result<ParamGradients> {
    let cfg = &params.config;
    if state.params_stamp != params.stamp() {
        return Err(Error::StaleForwardState(
            "parameters changed since this forward pass".into(),
        ));
    }
    if grad.cells.len() != cfg.num_cells
        || grad.cells.iter().any(|c| c.d_embedding.len() != cfg.embedding_dim)
    {
        return Err(Error::ShapeMismatch(
            "prediction gradient shape does not match the network".into(),
        ));
    }

    let mut grads = ParamGradients::zeros_like(params);
    let k = cfg.embedding_dim;
    let w_cell = cfg.cell_width();
    let t_total = cfg.input_frames as f64;

    // prediction space -> raw head outputs
    let mut d_raw = vec![0.0; cfg.head_out()];
    for (i, cg) in grad.cells.iter().enumerate() {
        let base = i * (k + 2);
        d_raw[base..base + k].copy_from_slice(&cg.d_embedding);
        let su = sigmoid(state.head_raw[base + k]);
        d_raw[base + k] = cg.d_rel_center * w_cell * su * (1.0 - su);
        let sv = sigmoid(state.head_raw[base + k + 1]);
        d_raw[base + k + 1] = cg.d_duration * t_total * sv * (1.0 - sv);
    }

    // head linear
    let hw = params.tensor("head.weight")?;
    let (d_head_w, d_head_b, d_head_in) =
        linear_backward(&state.head_in, &hw.data, &d_raw, cfg.head_out());
    grads_set(&mut grads, "head.weight", d_head_w);
    grads_set(&mut grads, "head.bias", d_head_b);

    // split concat; the query embedding is an input, not a parameter
    let mut d_proj_pre = vec![0.0; cfg.encoder_dim];
    for m in 0..cfg.encoder_dim {
        if state.proj_pre[m] > 0.0 {
            d_proj_pre[m] = d_head_in[m];
        }
    }

    let pw = params.tensor("proj.weight")?;
    let feat: Vec<f64> = match cfg.pooling {
        EncoderPooling::Flatten => state.last_out.data.clone(),
        EncoderPooling::GlobalAverage => {
            let lo = &state.last_out;
            (0..lo.ch)
                .map(|c| lo.data[c * lo.time..(c + 1) * lo.time].iter().sum::<f64>() / lo.time as f64)
                .collect()
        }
    };
    let (d_proj_w, d_proj_b, d_feat) =
        linear_backward(&feat, &pw.data, &d_proj_pre, cfg.encoder_dim);
    grads_set(&mut grads, "proj.weight", d_proj_w);
    grads_set(&mut grads, "proj.bias", d_proj_b);

    // un-pool the encoder feature vector back onto the last feature map
    let mut d_cur = match cfg.pooling {
        EncoderPooling::Flatten => Fm {
            ch: state.last_out.ch,
            time: state.last_out.time,
            data: d_feat,
        },
        EncoderPooling::GlobalAverage => {
            let mut fm = Fm::zeros(state.last_out.ch, state.last_out.time);
            for c in 0..fm.ch {
                let g = d_feat[c] / fm.time as f64;
                for t in 0..fm.time {
                    fm.data[c * fm.time + t] = g;
                }
            }
            fm
        }
    };

    for (i, b) in cfg.conv_blocks.iter().enumerate().rev() {
        let st = &state.blocks[i];

        // average pooling distributes gradient evenly over its window
        let mut d_relu = Fm::zeros(st.relu_out.ch, st.relu_out.time);
        for c in 0..d_cur.ch {
            for t in 0..d_cur.time {
                let g = d_cur.data[c * d_cur.time + t] / b.pool as f64;
                for j in 0..b.pool {
                    d_relu.data[c * st.relu_out.time + t * b.pool + j] = g;
                }
            }
        }

        // ReLU
        let mut d_pre = d_relu;
        for (g, v) in d_pre.data.iter_mut().zip(&st.pre_relu.data) {
            if *v <= 0.0 {
                *g = 0.0;
            }
        }

        // normalization
        let d_conv = if cfg.normalize_activations {
            let gamma = params.tensor(&format!("norm{i}.gamma"))?;
            let n = d_pre.time as f64;
            let mut d_gamma = vec![0.0; d_pre.ch];
            let mut d_beta = vec![0.0; d_pre.ch];
            let mut d_conv = Fm::zeros(d_pre.ch, d_pre.time);
            for c in 0..d_pre.ch {
                let off = c * d_pre.time;
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for t in 0..d_pre.time {
                    let dy = d_pre.data[off + t];
                    sum_dy += dy;
                    sum_dy_xhat += dy * st.xhat.data[off + t];
                }
                d_gamma[c] = sum_dy_xhat;
                d_beta[c] = sum_dy;
                match state.norm_mode {
                    NormMode::Batch => {
                        let scale = gamma.data[c] * st.inv_std[c];
                        for t in 0..d_pre.time {
                            let dy = d_pre.data[off + t];
                            d_conv.data[off + t] = scale
                                * (dy - sum_dy / n - st.xhat.data[off + t] * sum_dy_xhat / n);
                        }
                    }
                    NormMode::Running => {
                        // statistics are constants in this mode
                        let scale = gamma.data[c] * st.inv_std[c];
                        for t in 0..d_pre.time {
                            d_conv.data[off + t] = scale * d_pre.data[off + t];
                        }
                    }
                }
            }
            grads_set(&mut grads, &format!("norm{i}.gamma"), d_gamma);
            grads_set(&mut grads, &format!("norm{i}.beta"), d_beta);
            d_conv
        } else {
            d_pre
        };

        let w = params.tensor(&format!("conv{i}.weight"))?;
        let (d_w, d_b, d_input) =
            conv1d_backward(&st.input, &w.data, &d_conv, b.out_channels, b.kernel, b.stride);
        grads_set(&mut grads, &format!("conv{i}.weight"), d_w);
        grads_set(&mut grads, &format!("conv{i}.bias"), d_b);
        d_cur = d_input;
    }

    Ok(grads)
}

fn grads_set(grads: &mut ParamGradients, name: &str, data: Vec<f64>) {
    let t = grads
        .tensors
        .iter_mut()
        .find(|t| t.name == name)
        .expect("gradient tensor exists");
    t.data = data;
}

fn channel_stats(fm: &Fm) -> (Vec<f64>, Vec<f64>) {
    let n = fm.time as f64;
    let mut mean = vec![0.0; fm.ch];
    let mut var = vec![0.0; fm.ch];
    for c in 0..fm.ch {
        let off = c * fm.time;
        let m = fm.data[off..off + fm.time].iter().sum::<f64>() / n;
        let v = fm.data[off..off + fm.time]
            .iter()
            .map(|x| (x - m) * (x - m))
            .sum::<f64>()
            / n;
        mean[c] = m;
        var[c] = v;
    }
    (mean, var)
}

fn conv1d_forward(
    inp: &Fm,
    w: &[f64],
    bias: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Fm {
    let pad = kernel / 2;
    let out_time = (inp.time + 2 * pad - kernel) / stride + 1;
    let mut out = Fm::zeros(out_ch, out_time);
    for oc in 0..out_ch {
        let w_oc = &w[oc * inp.ch * kernel..(oc + 1) * inp.ch * kernel];
        let out_off = oc * out_time;
        for ot in 0..out_time {
            let base = (ot * stride) as isize - pad as isize;
            let mut acc = bias[oc];
            for ic in 0..inp.ch {
                let in_off = ic * inp.time;
                let w_ic = &w_oc[ic * kernel..(ic + 1) * kernel];
                for (j, wv) in w_ic.iter().enumerate() {
                    let ti = base + j as isize;
                    if ti >= 0 && (ti as usize) < inp.time {
                        acc += wv * inp.data[in_off + ti as usize];
                    }
                }
            }
            out.data[out_off + ot] = acc;
        }
    }
    out
}

fn conv1d_backward(
    inp: &Fm,
    w: &[f64],
    d_out: &Fm,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Fm) {
    let pad = kernel / 2;
    let mut d_w = vec![0.0; out_ch * inp.ch * kernel];
    let mut d_b = vec![0.0; out_ch];
    let mut d_in = Fm::zeros(inp.ch, inp.time);
    for oc in 0..out_ch {
        let out_off = oc * d_out.time;
        let w_oc = &w[oc * inp.ch * kernel..(oc + 1) * inp.ch * kernel];
        let dw_oc = &mut d_w[oc * inp.ch * kernel..(oc + 1) * inp.ch * kernel];
        for ot in 0..d_out.time {
            let g = d_out.data[out_off + ot];
            if g == 0.0 {
                continue;
            }
            d_b[oc] += g;
            let base = (ot * stride) as isize - pad as isize;
            for ic in 0..inp.ch {
                let in_off = ic * inp.time;
                for j in 0..kernel {
                    let ti = base + j as isize;
                    if ti >= 0 && (ti as usize) < inp.time {
                        let t = in_off + ti as usize;
                        dw_oc[ic * kernel + j] += g * inp.data[t];
                        d_in.data[t] += g * w_oc[ic * kernel + j];
                    }
                }
            }
        }
    }
    (d_w, d_b, d_in)
}

fn avg_pool_forward(inp: &Fm, pool: usize) -> Fm {
    if pool == 1 {
        return inp.clone();
    }
    let out_time = inp.time / pool;
    let mut out = Fm::zeros(inp.ch, out_time);
    for c in 0..inp.ch {
        let in_off = c * inp.time;
        let out_off = c * out_time;
        for t in 0..out_time {
            let s: f64 = inp.data[in_off + t * pool..in_off + (t + 1) * pool].iter().sum();
            out.data[out_off + t] = s / pool as f64;
        }
    }
    out
}

fn linear_forward(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut out = Vec::with_capacity(out_dim);
    for i in 0..out_dim {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let mut acc = b[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

fn linear_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    out_dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let mut d_w = vec![0.0; out_dim * in_dim];
    let mut d_x = vec![0.0; in_dim];
    for i in 0..out_dim {
        let g = d_out[i];
        if g == 0.0 {
            continue;
        }
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let d_row = &mut d_w[i * in_dim..(i + 1) * in_dim];
        for j in 0..in_dim {
            d_row[j] = g * x[j];
            d_x[j] += g * row[j];
        }
    }
    (d_w, d_out.to_vec(), d_x)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    model: ModelParameters,
}

/// Write a checkpoint as JSON; `f64` values round-trip bit-exactly.
pub fn save_checkpoint(path: &Path, params: &ModelParameters) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        f,
        &Checkpoint {
            format: CHECKPOINT_FORMAT,
            model: params.clone(),
        },
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(f)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint format {}",
            ckpt.format
        )));
    }
    ckpt.model.config.validate()?;
    Ok(ckpt.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TermEmbedding;

    fn small_config() -> NetConfig {
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
            seed: 3,
        }
    }

    fn unit_query(k: usize) -> TermEmbedding {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        TermEmbedding::unit(v).unwrap()
    }

    fn ramp_input(frames: usize, dim: usize) -> FeatureMatrix {
        let data = (0..frames * dim).map(|i| (i as f64 * 0.37).sin()).collect();
        FeatureMatrix::from_data(frames, dim, data).unwrap()
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetConfig::desk_scale(96, 16, 64, 3, 1);
        let params = ModelParameters::init(cfg).unwrap();
        let (pred, state) = forward(
            &params,
            &ramp_input(96, 16),
            &unit_query(64),
            NormMode::Batch,
        )
        .unwrap();
        assert_eq!(pred.cells.len(), 3);
        assert!(pred.cells.iter().all(|c| c.embedding.len() == 64));
        assert_eq!(state.head_raw.len(), 3 * 66);
    }

    #[test]
    fn zero_parameters_give_midpoint_coordinates() {
        let cfg = small_config();
        let params = ModelParameters::zeroed(cfg.clone()).unwrap();
        let (pred, _) = forward(
            &params,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        let w = cfg.cell_width();
        for c in &pred.cells {
            assert_eq!(c.rel_center, w * 0.5);
            assert_eq!(c.duration, 12.0 * 0.5 + DURATION_EPS);
            assert!(c.embedding.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_deterministic() {
        let params = ModelParameters::init(small_config()).unwrap();
        let x = ramp_input(12, 4);
        let q = unit_query(8);
        let (a, _) = forward(&params, &x, &q, NormMode::Batch).unwrap();
        let (b, _) = forward(&params, &x, &q, NormMode::Batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_deterministic() {
        let a = ModelParameters::init(small_config()).unwrap();
        let b = ModelParameters::init(small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_invariants_hold() {
        let params = ModelParameters::init(small_config()).unwrap();
        let (pred, _) = forward(
            &params,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        let w = params.config.cell_width();
        for c in &pred.cells {
            assert!(c.rel_center >= 0.0 && c.rel_center <= w);
            assert!(c.duration > 0.0 && c.duration <= 12.0 + DURATION_EPS);
        }
    }

    #[test]
    fn input_validation() {
        let params = ModelParameters::init(small_config()).unwrap();
        let bad_shape = ramp_input(10, 4);
        assert!(matches!(
            forward(&params, &bad_shape, &unit_query(8), NormMode::Batch),
            Err(Error::ShapeMismatch(_))
        ));
        let mut nan = ramp_input(12, 4);
        nan.row_mut(0)[0] = f64::NAN;
        assert!(matches!(
            forward(&params, &nan, &unit_query(8), NormMode::Batch),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            forward(&params, &ramp_input(12, 4), &unit_query(7), NormMode::Batch),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let params = ModelParameters::init(small_config()).unwrap();
        let (_, state) = forward(
            &params,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        let grads = backward(&params, &state, &PredictionGradient::zeros(2, 8)).unwrap();
        assert!(grads.tensors.iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn masked_gradients_are_exactly_zero() {
        let params = ModelParameters::init(small_config()).unwrap();
        let (_, state) = forward(
            &params,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        let mut g = PredictionGradient::zeros(2, 8);
        g.cells[0].d_embedding[0] = 1.0;
        g.cells[1].d_rel_center = -0.5;
        let mut grads = backward(&params, &state, &g).unwrap();
        assert!(grads
            .tensor("conv0.weight")
            .unwrap()
            .data
            .iter()
            .any(|v| *v != 0.0));
        grads.mask_prefix("conv0.");
        assert!(grads
            .tensor("conv0.weight")
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 0.0));
        assert!(grads
            .tensor("conv0.bias")
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn stale_state_rejected() {
        let params = ModelParameters::init(small_config()).unwrap();
        let (_, state) = forward(
            &params,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        let other = params.replace_head(2, 8, 99).unwrap();
        let mut g = PredictionGradient::zeros(2, 8);
        g.cells[0].d_rel_center = 1.0;
        assert!(matches!(
            backward(&other, &state, &g),
            Err(Error::StaleForwardState(_))
        ));
    }

    #[test]
    fn replace_head_preserves_encoder() {
        let params = ModelParameters::init(small_config()).unwrap();
        let replaced = params.replace_head(2, 8, 42).unwrap();
        for t in &params.tensors {
            if !t.name.starts_with("head.") {
                assert_eq!(t, replaced.tensor(&t.name).unwrap());
            }
        }
        // identical dims but fresh init
        assert_eq!(
            replaced.tensor("head.weight").unwrap().shape,
            params.tensor("head.weight").unwrap().shape
        );

        let wider = params.replace_head(3, 8, 42).unwrap();
        assert_eq!(wider.tensor("head.weight").unwrap().shape, vec![30, 16]);
        let (pred, _) = forward(
            &wider,
            &ramp_input(12, 4),
            &unit_query(8),
            NormMode::Batch,
        )
        .unwrap();
        assert_eq!(pred.cells.len(), 3);
        let w = wider.config.cell_width();
        assert!(pred
            .cells
            .iter()
            .all(|c| c.rel_center >= 0.0 && c.rel_center <= w && c.duration > 0.0));

        assert!(params.replace_head(0, 8, 1).is_err());
    }

    #[test]
    fn head_dim_arithmetic() {
        let one = NetConfig::desk_scale(96, 16, 64, 1, 0);
        let three = NetConfig::desk_scale(96, 16, 64, 3, 0);
        assert_eq!(one.head_out(), 66);
        assert_eq!(three.head_out(), 198);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let params = ModelParameters::init(small_config()).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn running_mode_uses_stored_stats() {
        let mut params = ModelParameters::init(small_config()).unwrap();
        let x = ramp_input(12, 4);
        let q = unit_query(8);
        let (_, st) = forward(&params, &x, &q, NormMode::Batch).unwrap();
        params.update_running_stats(&[&st], 0.0);
        let (a, _) = forward(&params, &x, &q, NormMode::Batch).unwrap();
        let (b, _) = forward(&params, &x, &q, NormMode::Running).unwrap();
        // with momentum 0 the running stats equal this example's stats
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            for (x, y) in ca.embedding.iter().zip(&cb.embedding) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
