//! Spatio-temporal graph convolution encoder, projection head and the
//! momentum-updated key copy.
//!
//! A block is `relu(norm(tconv(A * x * W)))`: graph mixing over joints with
//! the fixed normalized adjacency `A`, a learned channel map `W`, a depthwise
//! temporal convolution, and per-channel normalization. The hidden vector is
//! the mean over frames and joints of the last block. The projector maps it
//! to a unit-norm embedding through one affine layer and a ReLU.

mod checkpoint;

use std::hash::{DefaultHasher, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_VERSION};

use crate::numcore::{ChannelStats, Graph, Tensor, TensorError, Var};
use crate::skeldata::{SkeletonGraph, SkeletonSequence, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output width of each block.
    pub channels: Vec<usize>,
    /// Temporal stride of each block.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    /// Width of the pooled hidden vector; equals the last block width.
    pub hidden_dim: usize,
    pub projection_dim: usize,
    /// Weight of the current batch in the running normalization statistics.
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            temporal_kernel: 9,
            hidden_dim: 64,
            projection_dim: 32,
            norm_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input has {got} joints, encoder graph has {expected}")]
    Joints { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: std::path::PathBuf, reason: String },
    #[error("i/o error on {path}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EncoderConfig {
    /// Slim variant for quick experiments and tests.
    pub fn tiny() -> Self {
        Self {
            channels: vec![8, 16],
            strides: vec![1, 2],
            temporal_kernel: 5,
            hidden_dim: 16,
            projection_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.channels.is_empty() {
            return bad("need at least one block".into());
        }
        if self.strides.len() != self.channels.len() {
            return bad(format!(
                "{} strides for {} blocks",
                self.strides.len(),
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("block widths and strides must be positive".into());
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.hidden_dim != *self.channels.last().expect("non-empty") {
            return bad(format!(
                "hidden dim {} must equal the last block width {}",
                self.hidden_dim,
                self.channels.last().expect("non-empty")
            ));
        }
        if self.projection_dim < 2 || self.hidden_dim < self.projection_dim {
            return bad(format!(
                "need hidden dim >= projection dim >= 2, got {} and {}",
                self.hidden_dim, self.projection_dim
            ));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) || !(self.norm_eps > 0.0) {
            return bad("normalization momentum must be in (0, 1] and eps positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated by the caller.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `[c_in, c_out]`
    pub spatial: Tensor,
    /// `[c_out, k]`
    pub temporal: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Encoder and projector weights plus normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    /// `[c_h, c_z]`
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = CHANNELS;
        for &c_out in &cfg.channels {
            let k = cfg.temporal_kernel;
            blocks.push(BlockParams {
                spatial: uniform(&[c_in, c_out], (6.0 / c_in as f64).sqrt(), rng),
                temporal: uniform(&[c_out, k], (3.0 / k as f64).sqrt(), rng),
                scale: Tensor::ones(&[c_out]),
                shift: Tensor::zeros(&[c_out]),
                running_mean: Tensor::zeros(&[c_out]),
                running_var: Tensor::ones(&[c_out]),
            });
            c_in = c_out;
        }
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        Self {
            blocks,
            proj_weight: uniform(&[cfg.hidden_dim, cfg.projection_dim], bound, rng),
            proj_bias: uniform(&[cfg.projection_dim], bound, rng),
        }
    }

    /// Learnable tensors in a fixed order with stable names.
    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.spatial"), &b.spatial));
            out.push((format!("block{i}.temporal"), &b.temporal));
            out.push((format!("block{i}.scale"), &b.scale));
            out.push((format!("block{i}.shift"), &b.shift));
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out
    }

    /// Same order as [`EncoderParams::learnable`].
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &mut self.blocks {
            out.push(&mut b.spatial);
            out.push(&mut b.temporal);
            out.push(&mut b.scale);
            out.push(&mut b.shift);
        }
        out.push(&mut self.proj_weight);
        out.push(&mut self.proj_bias);
        out
    }

    /// Every tensor, learnable ones first, then normalization buffers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.learnable();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.running_mean"), &b.running_mean));
            out.push((format!("block{i}.running_var"), &b.running_var));
        }
        out
    }

    /// Same order as [`EncoderParams::named_tensors`].
    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut learnable = Vec::with_capacity(self.blocks.len() * 4 + 2);
        let mut buffers = Vec::with_capacity(self.blocks.len() * 2);
        for b in &mut self.blocks {
            learnable.push(&mut b.spatial);
            learnable.push(&mut b.temporal);
            learnable.push(&mut b.scale);
            learnable.push(&mut b.shift);
            buffers.push(&mut b.running_mean);
            buffers.push(&mut b.running_var);
        }
        learnable.push(&mut self.proj_weight);
        learnable.push(&mut self.proj_bias);
        learnable.extend(buffers);
        learnable
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Hash of every tensor's bit pattern; equal params give equal checksums.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named_tensors() {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<ChannelStats>], momentum: f64) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mean: Vec<f64> = block
                .running_mean
                .data()
                .iter()
                .zip(&s.mean)
                .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                .collect();
            let var: Vec<f64> = block
                .running_var
                .data()
                .iter()
                .zip(&s.var)
                .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
                .collect();
            block.running_mean = Tensor::vector(&mean);
            block.running_var = Tensor::vector(&var);
        }
    }
}

/// Graph leaves for one copy of the encoder parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub blocks: Vec<BoundBlock>,
    pub proj_weight: Var,
    pub proj_bias: Var,
    adjacency: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub spatial: Var,
    pub temporal: Var,
    pub scale: Var,
    pub shift: Var,
}

impl BoundParams {
    /// Learnable leaves in [`EncoderParams::learnable`] order.
    pub fn learnable(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &self.blocks {
            out.extend([b.spatial, b.temporal, b.scale, b.shift]);
        }
        out.push(self.proj_weight);
        out.push(self.proj_bias);
        out
    }
}

/// Encoder architecture bound to a skeleton graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    graph: SkeletonGraph,
}

/// Packs sequences into the internal `[B, T, V, C]` layout.
pub fn batch_tensor(seqs: &[&SkeletonSequence]) -> Result<Tensor, EncoderError> {
    let first = seqs
        .first()
        .ok_or_else(|| EncoderError::Config("empty batch".into()))?;
    let (t, v) = (first.frames(), first.joints());
    let mut data = Vec::with_capacity(seqs.len() * t * v * CHANNELS);
    for s in seqs {
        if s.frames() != t || s.joints() != v {
            return Err(EncoderError::Tensor(TensorError::Shape {
                op: "batch",
                detail: format!(
                    "sequence is T={} V={}, batch is T={t} V={v}",
                    s.frames(),
                    s.joints()
                ),
            }));
        }
        for ti in 0..t {
            for vi in 0..v {
                for c in 0..CHANNELS {
                    data.push(s.at(c, ti, vi));
                }
            }
        }
    }
    Ok(Tensor::new(vec![seqs.len(), t, v, CHANNELS], data)?)
}

/// Converts a `[B, C, T, V]` tensor into the internal `[B, T, V, C]` layout.
pub fn channels_last(batch: &Tensor) -> Result<Tensor, EncoderError> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(EncoderError::Tensor(TensorError::Shape {
            op: "channels_last",
            detail: format!("expected [B, C, T, V], got {s:?}"),
        }));
    }
    let (b, c, t, v) = (s[0], s[1], s[2], s[3]);
    let src = batch.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for ti in 0..t {
            for vi in 0..v {
                for ci in 0..c {
                    out.push(src[((bi * c + ci) * t + ti) * v + vi]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, t, v, c], out)?)
}

/// `A * x * W` for `x: [B, T, V, C_in]`: mixes joints with the adjacency, then
/// maps channels.
pub fn spatial_step(g: &mut Graph, adjacency: Var, x: Var, weight: Var) -> Result<Var, TensorError> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::Shape {
            op: "spatial_step",
            detail: format!("expected [B, T, V, C], got {s:?}"),
        });
    }
    let (b, t, v, c) = (s[0], s[1], s[2], s[3]);
    let stacked = g.reshape(x, &[b * t, v, c])?;
    let mixed = g.matmul(adjacency, stacked)?;
    let mapped = g.matmul(mixed, weight)?;
    let c_out = g.value(mapped).shape()[2];
    g.reshape(mapped, &[b, t, v, c_out])
}

impl Encoder {
    pub fn new(config: EncoderConfig, graph: SkeletonGraph) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(Self { config, graph })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> EncoderParams {
        EncoderParams::init(&self.config, rng)
    }

    /// Places `params` on `g`; `trainable` decides whether they get gradients.
    pub fn bind(&self, g: &mut Graph, params: &EncoderParams, trainable: bool) -> BoundParams {
        let blocks = params
            .blocks
            .iter()
            .map(|b| BoundBlock {
                spatial: g.leaf(b.spatial.clone(), trainable),
                temporal: g.leaf(b.temporal.clone(), trainable),
                scale: g.leaf(b.scale.clone(), trainable),
                shift: g.leaf(b.shift.clone(), trainable),
            })
            .collect();
        BoundParams {
            blocks,
            proj_weight: g.leaf(params.proj_weight.clone(), trainable),
            proj_bias: g.leaf(params.proj_bias.clone(), trainable),
            adjacency: g.constant(self.graph.adjacency().clone()),
        }
    }

    /// Hidden vectors `[B, c_h]` for `input: [B, T, V, 3]`.
    ///
    /// In train mode with more than one sample the returned statistics are
    /// the batch statistics of each block; otherwise entries are `None`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        params: &EncoderParams,
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Option<ChannelStats>>), EncoderError> {
        let s = g.value(input).shape().to_vec();
        if s.len() != 4 || s[3] != CHANNELS {
            return Err(EncoderError::Tensor(TensorError::Shape {
                op: "stgcn_forward",
                detail: format!("expected [B, T, V, {CHANNELS}], got {s:?}"),
            }));
        }
        if s[2] != self.graph.joint_count() {
            return Err(EncoderError::Joints {
                expected: self.graph.joint_count(),
                got: s[2],
            });
        }
        if s[1] < self.config.temporal_kernel {
            return Err(EncoderError::Tensor(TensorError::Shape {
                op: "stgcn_forward",
                detail: format!(
                    "{} frames is shorter than the temporal kernel {}",
                    s[1], self.config.temporal_kernel
                ),
            }));
        }
        let batch = s[0];
        let batch_stats = mode == Mode::Train && batch > 1;
        let mut x = input;
        let mut stats = Vec::with_capacity(bound.blocks.len());
        for ((block, bp), &stride) in bound.blocks.iter().zip(&params.blocks).zip(&self.config.strides) {
            let y = spatial_step(g, bound.adjacency, x, block.spatial)?;
            let y = g.temporal_conv(y, block.temporal, stride)?;
            let shape = g.value(y).shape().to_vec();
            let c = shape[3];
            let rows = g.reshape(y, &[shape[0] * shape[1] * shape[2], c])?;
            let normalized = if batch_stats {
                let (n, st) = g.standardize(rows, self.config.norm_eps)?;
                stats.push(Some(st));
                n
            } else {
                let inv_std: Vec<f64> = bp
                    .running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.config.norm_eps).sqrt())
                    .collect();
                let mean = g.constant(bp.running_mean.clone());
                let inv = g.constant(Tensor::vector(&inv_std));
                let centered = g.sub(rows, mean)?;
                stats.push(None);
                g.mul(centered, inv)?
            };
            let scaled = g.mul(normalized, block.scale)?;
            let shifted = g.add(scaled, block.shift)?;
            let activated = g.relu(shifted);
            x = g.reshape(activated, &shape)?;
        }
        let pooled = g.mean_axes(x, &[1, 2])?;
        Ok((pooled, stats))
    }

    /// Unit-norm embeddings `[B, c_z]` from hidden vectors `[B, c_h]`.
    pub fn project(&self, g: &mut Graph, bound: &BoundParams, hidden: Var) -> Result<Var, TensorError> {
        let lin = g.matmul(hidden, bound.proj_weight)?;
        let lin = g.add(lin, bound.proj_bias)?;
        let act = g.relu(lin);
        g.l2_normalize(act)
    }

    /// Gradient-free forward of a `[B, C, T, V]` batch to hidden vectors.
    pub fn stgcn_forward(&self, params: &EncoderParams, batch: &Tensor, mode: Mode) -> Result<Tensor, EncoderError> {
        let internal = channels_last(batch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, params, false);
        let x = g.constant(internal);
        let (h, _) = self.hidden(&mut g, &bound, params, x, mode)?;
        Ok(g.value(h).clone())
    }

    /// Gradient-free hidden vectors for sequences, in eval mode, chunked.
    pub fn embed(
        &self,
        params: &EncoderParams,
        seqs: &[&SkeletonSequence],
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>, EncoderError> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, params, false);
            let x = g.constant(batch_tensor(part)?);
            let (h, _) = self.hidden(&mut g, &bound, params, x, Mode::Eval)?;
            let t = g.value(h);
            let width = t.shape()[1];
            out.extend(t.data().chunks(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Query parameters and their momentum-averaged key copy.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoderPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    /// Coefficient `alpha` in `key <- alpha * key + (1 - alpha) * query`.
    pub momentum: f64,
}

impl MomentumEncoderPair {
    /// The key starts as an exact copy of the query.
    pub fn new(query: EncoderParams, momentum: f64) -> Result<Self, EncoderError> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(EncoderError::Config(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        let key = query.clone();
        Ok(Self { query, key, momentum })
    }

    pub fn momentum_update(&mut self) {
        self.momentum_update_with(self.momentum);
    }

    /// `key <- alpha * key + (1 - alpha) * query` over the learnable tensors.
    pub fn momentum_update_with(&mut self, alpha: f64) {
        let query = self.query.learnable();
        for (k, (_, q)) in self.key.learnable_mut().into_iter().zip(query) {
            let data = k
                .data()
                .iter()
                .zip(q.data())
                .map(|(kv, qv)| alpha * kv + (1.0 - alpha) * qv)
                .collect();
            *k = Tensor::new(k.shape().to_vec(), data).expect("same shape");
        }
    }
}

#[cfg(test)]
mod tests;
