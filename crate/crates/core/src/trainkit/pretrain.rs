use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sgd_step, OptimizerState, TrainConfig, TrainError};
use crate::augment::augment_pair;
use crate::contrastive::{batch_cross_terms, batch_infonce, bind_bank, BatchView, MemoryBank};
use crate::encoder::{batch_tensor, Checkpoint, Encoder, EncoderConfig, EncoderParams, Mode, MomentumEncoderPair};
use crate::numcore::{Graph, Tensor, Var};
use crate::skeldata::{make_view, LabeledDataset, SkeletonSequence, ViewKind};

/// Which objective produced a loss value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTag {
    /// Per-view instance discrimination.
    Infonce,
    /// Cross-view contrastive context learning.
    Crossview,
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTag::Infonce => "infonce",
            LossTag::Crossview => "crossview",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub stage: LossTag,
    pub lr: f64,
    /// Loss attributed to each view, in config order.
    pub view_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetric {
    pub epoch: usize,
    pub view: ViewKind,
    pub stage: LossTag,
    pub mean_loss: f64,
    pub lr: f64,
}

/// One view's trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewModel {
    pub view: ViewKind,
    pub pair: MomentumEncoderPair,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub encoder: Encoder,
    pub views: Vec<ViewModel>,
    pub trace: Vec<IterationRecord>,
    pub metrics: Vec<EpochMetric>,
    /// Number of (iteration, view) pairs whose key parameters were checked
    /// for absent gradients.
    pub key_gradient_audits: usize,
    /// Largest `| ||z|| - 1 |` over every query embedding produced.
    pub max_unit_deviation: f64,
}

fn view_stream(view: ViewKind, base: u64) -> u64 {
    base + ViewKind::ALL.iter().position(|&v| v == view).expect("listed") as u64
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 10;
const BANK_STREAM: u64 = 20;
const AUGMENT_STREAM: u64 = 30;

/// Epoch-by-epoch driver of the two-stage pretraining loop.
///
/// Random streams are keyed by view kind, so a view gets the same encoder
/// initialization, bank fill and augmentation draws whatever other views
/// are trained alongside it.
pub struct Trainer {
    encoder: Encoder,
    cfg: TrainConfig,
    views: Vec<ViewModel>,
    view_data: Vec<Vec<SkeletonSequence>>,
    shuffle_rng: ChaCha8Rng,
    augment_rngs: Vec<ChaCha8Rng>,
    epoch: usize,
    iteration: usize,
    trace: Vec<IterationRecord>,
    metrics: Vec<EpochMetric>,
    key_gradient_audits: usize,
    max_unit_deviation: f64,
}

struct ViewPass {
    query: Vec<Var>,
    key: Vec<Var>,
    z: Var,
    z_hat: Tensor,
    bank_t: Var,
    query_stats: Vec<Option<crate::numcore::ChannelStats>>,
    key_stats: Vec<Option<crate::numcore::ChannelStats>>,
}

impl Trainer {
    pub fn new(dataset: &LabeledDataset, encoder_cfg: EncoderConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if dataset.len() < cfg.batch_size {
            return Err(TrainError::Config(format!(
                "dataset has {} samples, fewer than the batch size {}",
                dataset.len(),
                cfg.batch_size
            )));
        }
        if cfg.contrastive.top_k > cfg.contrastive.bank_capacity {
            return Err(TrainError::Config("top-K exceeds the bank capacity".into()));
        }
        let encoder = Encoder::new(encoder_cfg, dataset.graph().clone())?;
        let mut views = Vec::with_capacity(cfg.views.len());
        let mut view_data = Vec::with_capacity(cfg.views.len());
        let mut augment_rngs = Vec::with_capacity(cfg.views.len());
        for &view in &cfg.views {
            let data = dataset
                .sequences()
                .iter()
                .map(|s| make_view(s, dataset.graph(), view))
                .collect::<Result<Vec<_>, _>>()?;
            view_data.push(data);
            let params = encoder.init_params(&mut seeded(cfg.seed, view_stream(view, INIT_STREAM)));
            let optimizer = OptimizerState::zeros_like(params.learnable().into_iter().map(|(_, t)| t));
            let pair = MomentumEncoderPair::new(params, cfg.contrastive.momentum)?;
            let bank = MemoryBank::with_random_fill(
                cfg.contrastive.bank_capacity,
                encoder.config().projection_dim,
                &mut seeded(cfg.seed, view_stream(view, BANK_STREAM)),
            )?;
            views.push(ViewModel {
                view,
                pair,
                optimizer,
                bank,
            });
            augment_rngs.push(seeded(cfg.seed, view_stream(view, AUGMENT_STREAM)));
        }
        Ok(Self {
            encoder,
            shuffle_rng: seeded(cfg.seed, SHUFFLE_STREAM),
            cfg,
            views,
            view_data,
            augment_rngs,
            epoch: 0,
            iteration: 0,
            trace: Vec::new(),
            metrics: Vec::new(),
            key_gradient_audits: 0,
            max_unit_deviation: 0.0,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn views(&self) -> &[ViewModel] {
        &self.views
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    pub fn metrics(&self) -> &[EpochMetric] {
        &self.metrics
    }

    /// Checkpoint of view `index` at the current epoch.
    pub fn checkpoint(&self, index: usize) -> Checkpoint {
        let vm = &self.views[index];
        let names = vm.pair.query.learnable().into_iter().map(|(n, _)| n);
        Checkpoint {
            encoder: self.encoder.clone(),
            pair: vm.pair.clone(),
            epoch: self.epoch,
            view: vm.view,
            optimizer: names
                .zip(&vm.optimizer.velocities)
                .map(|(n, v)| (format!("velocity.{n}"), v.clone()))
                .collect(),
        }
    }

    /// Runs one epoch and returns its per-view metrics.
    pub fn run_epoch(&mut self) -> Result<Vec<EpochMetric>, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let epoch = self.epoch;
        let lr = self.cfg.lr.at(epoch);
        let stage = if self.cfg.is_cross_stage(epoch) {
            LossTag::Crossview
        } else {
            LossTag::Infonce
        };
        let mut order: Vec<usize> = (0..self.view_data[0].len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sums = vec![0.0; self.views.len()];
        let mut count = 0usize;
        for batch in order.chunks_exact(self.cfg.batch_size) {
            let losses = self.step(batch, lr, stage)?;
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l;
            }
            count += 1;
            self.trace.push(IterationRecord {
                iteration: self.iteration,
                epoch,
                stage,
                lr,
                view_losses: losses,
            });
            self.iteration += 1;
        }
        let epoch_metrics: Vec<EpochMetric> = self
            .views
            .iter()
            .zip(sums)
            .map(|(vm, s)| EpochMetric {
                epoch,
                view: vm.view,
                stage,
                mean_loss: s / count as f64,
                lr,
            })
            .collect();
        self.metrics.extend(epoch_metrics.iter().cloned());
        self.epoch += 1;
        Ok(epoch_metrics)
    }

    fn forward_view(&mut self, g: &mut Graph, index: usize, batch: &[usize]) -> Result<ViewPass, TrainError> {
        let mut first = Vec::with_capacity(batch.len());
        let mut second = Vec::with_capacity(batch.len());
        for &i in batch {
            let (a, b) = augment_pair(&self.view_data[index][i], &self.cfg.augment, &mut self.augment_rngs[index])?;
            first.push(a);
            second.push(b);
        }
        let xq = batch_tensor(&first.iter().collect::<Vec<_>>())?;
        let xk = batch_tensor(&second.iter().collect::<Vec<_>>())?;
        let vm = &self.views[index];
        let enc = &self.encoder;
        let bq = enc.bind(g, &vm.pair.query, true);
        let bk = enc.bind(g, &vm.pair.key, false);
        let in_q = g.constant(xq);
        let (hq, query_stats) = enc.hidden(g, &bq, &vm.pair.query, in_q, Mode::Train)?;
        let z = enc.project(g, &bq, hq)?;
        let in_k = g.constant(xk);
        let (hk, key_stats) = enc.hidden(g, &bk, &vm.pair.key, in_k, Mode::Train)?;
        let zk = enc.project(g, &bk, hk)?;
        let z_hat = g.value(zk).clone();
        let bank_t = bind_bank(g, &vm.bank)?;
        Ok(ViewPass {
            query: bq.learnable(),
            key: bk.learnable(),
            z,
            z_hat,
            bank_t,
            query_stats,
            key_stats,
        })
    }

    fn step(&mut self, batch: &[usize], lr: f64, stage: LossTag) -> Result<Vec<f64>, TrainError> {
        let mut g = Graph::new();
        let mut passes = Vec::with_capacity(self.views.len());
        for index in 0..self.views.len() {
            passes.push(self.forward_view(&mut g, index, batch)?);
        }
        for p in &passes {
            let z = g.value(p.z);
            let width = z.shape()[1];
            for row in z.data().chunks(width) {
                let dev = (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs();
                self.max_unit_deviation = self.max_unit_deviation.max(dev);
            }
        }
        let tau = self.cfg.contrastive.temperature;
        let losses: Vec<Var> = match stage {
            LossTag::Infonce => passes
                .iter()
                .map(|p| {
                    let zh = g.constant(p.z_hat.clone());
                    batch_infonce(&mut g, p.z, zh, p.bank_t, tau)
                })
                .collect::<Result<_, _>>()?,
            LossTag::Crossview => {
                let views: Vec<BatchView> = passes
                    .iter()
                    .map(|p| BatchView {
                        z: p.z,
                        z_hat: g.constant(p.z_hat.clone()),
                        bank_t: p.bank_t,
                    })
                    .collect();
                batch_cross_terms(
                    &mut g,
                    &views,
                    tau,
                    self.cfg.contrastive.top_k,
                    self.cfg.contrastive.guide,
                )?
            }
        };
        let values: Vec<f64> = losses.iter().map(|&l| g.value(l).item()).collect::<Result<_, _>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                epoch: self.epoch,
            });
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let mut grads = g.backward(total)?;

        let norm_momentum = self.encoder.config().norm_momentum;
        let cfg = &self.cfg;
        for (vm, pass) in self.views.iter_mut().zip(passes) {
            let names: Vec<String> = vm.pair.key.learnable().into_iter().map(|(n, _)| n).collect();
            for (var, name) in pass.key.iter().zip(names) {
                if grads.get(*var).is_some() {
                    return Err(TrainError::KeyGradient(format!("{}:{name}", vm.view)));
                }
            }
            self.key_gradient_audits += 1;
            let owned: Vec<Tensor> = pass
                .query
                .iter()
                .zip(vm.pair.query.learnable())
                .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let refs: Vec<&Tensor> = owned.iter().collect();
            sgd_step(
                &mut vm.pair.query.learnable_mut(),
                &refs,
                &mut vm.optimizer,
                lr,
                cfg.sgd_momentum,
                cfg.weight_decay,
            )?;
            vm.pair.query.update_running_stats(&pass.query_stats, norm_momentum);
            vm.pair.key.update_running_stats(&pass.key_stats, norm_momentum);
            vm.pair.momentum_update();
            vm.bank.enqueue(&pass.z_hat, Some(batch))?;
        }
        Ok(values)
    }

    pub fn finish(self) -> PretrainOutput {
        PretrainOutput {
            encoder: self.encoder,
            views: self.views,
            trace: self.trace,
            metrics: self.metrics,
            key_gradient_audits: self.key_gradient_audits,
            max_unit_deviation: self.max_unit_deviation,
        }
    }
}

/// Runs every epoch of `cfg` on `dataset`.
pub fn pretrain(
    dataset: &LabeledDataset,
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
) -> Result<PretrainOutput, TrainError> {
    let mut trainer = Trainer::new(dataset, encoder_cfg, cfg)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

/// Writes `epoch,view,stage,mean_loss,lr` rows.
pub fn write_metrics_csv(metrics: &[EpochMetric], out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "view", "stage", "mean_loss", "lr"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.view.to_string(),
            m.stage.to_string(),
            m.mean_loss.to_string(),
            m.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `iteration,epoch,view,stage,loss,lr` rows, one per view.
pub fn write_trace_csv(trace: &[IterationRecord], views: &[ViewKind], out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "epoch", "view", "stage", "loss", "lr"])?;
    for r in trace {
        for (view, loss) in views.iter().zip(&r.view_losses) {
            w.write_record([
                r.iteration.to_string(),
                r.epoch.to_string(),
                view.to_string(),
                r.stage.to_string(),
                loss.to_string(),
                r.lr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

impl ViewModel {
    pub fn query(&self) -> &EncoderParams {
        &self.pair.query
    }
}
