//! SGD with momentum and weight decay, step learning-rate schedules, and the
//! two-stage multi-view contrastive pretraining loop.

mod pretrain;

use serde::{Deserialize, Serialize};

pub use pretrain::{
    pretrain, write_metrics_csv, write_trace_csv, EpochMetric, IterationRecord, LossTag, PretrainOutput, Trainer,
    ViewModel,
};

use crate::augment::AugmentConfig;
use crate::contrastive::{ContrastiveConfig, ContrastiveError};
use crate::encoder::EncoderError;
use crate::numcore::Tensor;
use crate::skeldata::{DataError, ViewKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch in {what}: {detail}")]
    Shape { what: &'static str, detail: String },
    #[error("non-finite loss at iteration {iteration} (epoch {epoch})")]
    NonFinite { iteration: usize, epoch: usize },
    #[error("gradient reached key parameter {0}")]
    KeyGradient(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
}

impl From<crate::numcore::TensorError> for TrainError {
    fn from(e: crate::numcore::TensorError) -> Self {
        TrainError::Encoder(EncoderError::Tensor(e))
    }
}

/// Piecewise-constant schedule: `base * factor^(milestones <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.05,
            milestones: vec![50],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base > 0.0 && self.base.is_finite()) || !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} and factor {} must be positive",
                self.base, self.factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub views: Vec<ViewKind>,
    pub epochs: usize,
    /// First epoch trained with the cross-view objective; equal to `epochs`
    /// to never switch.
    pub stage_switch_epoch: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            views: vec![ViewKind::Joint, ViewKind::Motion],
            epochs: 60,
            stage_switch_epoch: 30,
            batch_size: 32,
            lr: LrSchedule::default(),
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.views.is_empty() {
            return bad("at least one view is required".into());
        }
        for (i, v) in self.views.iter().enumerate() {
            if self.views[..i].contains(v) {
                return bad(format!("view {v} listed twice"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.stage_switch_epoch == 0 || self.stage_switch_epoch > self.epochs {
            return bad(format!(
                "stage switch epoch {} must lie in [1, {}]",
                self.stage_switch_epoch, self.epochs
            ));
        }
        if self.stage_switch_epoch < self.epochs && self.views.len() < 2 {
            return bad("the cross-view stage needs at least 2 views".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        self.lr.validate()?;
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "need 0 <= sgd momentum < 1 and weight decay >= 0, got {} and {}",
                self.sgd_momentum, self.weight_decay
            ));
        }
        self.contrastive.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    /// Whether `epoch` trains with the cross-view objective.
    pub fn is_cross_stage(&self, epoch: usize) -> bool {
        epoch >= self.stage_switch_epoch
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr.at(epoch)
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocities: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `g' = g + wd * p; v' = mu * v + g'; p' = p - lr * v'` for every tensor.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(TrainError::Shape {
            what: "sgd_step",
            detail: format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                state.velocities.len()
            ),
        });
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut state.velocities).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::Shape {
                what: "sgd_step",
                detail: format!(
                    "tensor {i}: param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ),
            });
        }
        let mut vel = Vec::with_capacity(p.len());
        let mut out = Vec::with_capacity(p.len());
        for ((&pv, &gv), &vv) in p.data().iter().zip(g.data()).zip(v.data()) {
            let nv = momentum * vv + (gv + weight_decay * pv);
            vel.push(nv);
            out.push(pv - lr * nv);
        }
        *v = Tensor::new(v.shape().to_vec(), vel)?;
        **p = Tensor::new(p.shape().to_vec(), out)?;
    }
    Ok(())
}
