//! Directional trends on SynthSkel-12, each a mean over three seeds. Runs are
//! memoized so criteria sharing a configuration train it once.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use crossclr_core::augment::AugmentConfig;
use crossclr_core::evalkit::{linear_eval, ProbeConfig};
use crossclr_core::skeldata::synth_dataset;
use crossclr_core::trainkit::pretrain;
use crossclr_core::{EncoderConfig, LabeledDataset, SynthConfig, TrainConfig, ViewKind};

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 20;
const SWITCH: usize = 10;
const PROBE_EPOCHS: usize = 50;
const TEMPERATURE: f64 = 0.2;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Run {
    SkeletonJoint,
    SkeletonJointNoAug,
    Cross { top_k: usize },
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![16, 32],
        strides: vec![1, 2],
        temporal_kernel: 9,
        hidden_dim: 32,
        projection_dim: 32,
        ..EncoderConfig::default()
    }
}

fn train_config(run: Run, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        views: vec![ViewKind::Joint],
        epochs: EPOCHS,
        stage_switch_epoch: EPOCHS,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    cfg.lr.base = 0.02;
    cfg.lr.milestones.clear();
    cfg.contrastive.bank_capacity = 512;
    cfg.contrastive.momentum = 0.99;
    cfg.contrastive.temperature = TEMPERATURE;
    match run {
        Run::SkeletonJoint => {}
        Run::SkeletonJointNoAug => cfg.augment = AugmentConfig::none(),
        Run::Cross { top_k } => {
            cfg.views = vec![ViewKind::Joint, ViewKind::Motion];
            cfg.stage_switch_epoch = SWITCH;
            cfg.contrastive.top_k = top_k;
        }
    }
    cfg
}

fn data(seed: u64) -> (LabeledDataset, LabeledDataset) {
    synth_dataset(&SynthConfig { seed, ..SynthConfig::default() }).expect("SynthSkel-12")
}

/// Joint-view linear accuracy of one (run, seed), trained on first request.
fn accuracy(run: Run, seed: u64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(Run, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&acc) = cache.lock().unwrap().get(&(run, seed)) {
        return acc;
    }
    let (train, test) = data(seed);
    let out = pretrain(&train, encoder(), train_config(run, seed)).expect("pretrain");
    let joint = out.views.iter().find(|v| v.view == ViewKind::Joint).expect("joint view");
    let probe = ProbeConfig { seed, ..ProbeConfig::with_epochs(PROBE_EPOCHS) };
    let acc = linear_eval(&out.encoder, &joint.pair.query, &train, &test, ViewKind::Joint, &probe)
        .expect("linear_eval")
        .accuracy;
    cache.lock().unwrap().insert((run, seed), acc);
    acc
}

fn mean(run: Run) -> (f64, Vec<f64>) {
    let accs: Vec<f64> = SEEDS.iter().map(|&s| accuracy(run, s)).collect();
    (accs.iter().sum::<f64>() / accs.len() as f64, accs)
}

fn fmt(accs: &[f64]) -> String {
    accs.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>().join("/")
}

fn compare(label_a: &str, a: Run, label_b: &str, b: Run, margin: f64) -> Result<String, String> {
    let (ma, va) = mean(a);
    let (mb, vb) = mean(b);
    let detail = format!(
        "{label_a} {ma:.2} [{}] vs {label_b} {mb:.2} [{}], need gap >= {margin}, got {:.2}",
        fmt(&va),
        fmt(&vb),
        ma - mb
    );
    if ma >= mb + margin {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn cross_view_gain() -> Result<String, String> {
    let start = Instant::now();
    let detail = compare("crossclr(joint,motion)", Run::Cross { top_k: 1 }, "skeletonclr(joint)", Run::SkeletonJoint, 5.0)?;
    let secs = start.elapsed().as_secs_f64();
    if secs > 600.0 {
        return Err(format!("{detail}; took {secs:.0}s, limit 600s"));
    }
    Ok(detail)
}

pub fn augmentation_gain() -> Result<String, String> {
    compare("shear 0.5 crop 6", Run::SkeletonJoint, "no augmentation", Run::SkeletonJointNoAug, 10.0)
}

pub fn top_k_trend() -> Result<String, String> {
    compare("K=1", Run::Cross { top_k: 1 }, "K=10", Run::Cross { top_k: 10 }, 0.0)
}
