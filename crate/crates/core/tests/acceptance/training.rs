use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossclr_core::encoder::save_checkpoint;
use crossclr_core::skeldata::synth_dataset;
use crossclr_core::trainkit::{write_metrics_csv, write_trace_csv};
use crossclr_core::{
    EncoderConfig, EncoderParams, LabeledDataset, MomentumEncoderPair, SynthConfig, TrainConfig, Trainer, ViewKind,
};

use crate::common::ensure;

pub fn small_data() -> (LabeledDataset, LabeledDataset) {
    synth_dataset(&SynthConfig {
        per_class_train: 4,
        per_class_test: 2,
        frames: 20,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn small_config(views: Vec<ViewKind>, batch_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        views,
        epochs: 4,
        stage_switch_epoch: 2,
        batch_size,
        seed: 11,
        ..TrainConfig::default()
    };
    cfg.contrastive.bank_capacity = 32;
    cfg.contrastive.momentum = 0.9;
    cfg.lr.base = 0.1;
    cfg
}

fn flat(p: &EncoderParams) -> Vec<f64> {
    p.learnable().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Checks `key' - query' == alpha (key - query')` elementwise and returns the
/// observed norm ratio.
fn contraction(before_key: &[f64], key: &[f64], query: &[f64], alpha: f64) -> Result<f64, String> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&k0, &k1), &q) in before_key.iter().zip(key).zip(query) {
        let want = alpha * (k0 - q);
        let got = k1 - q;
        ensure((got - want).abs() <= 1e-12 * (1.0 + k0.abs() + q.abs()), || {
            format!("key moved by {got:e}, expected {want:e}")
        })?;
        num += got * got;
        den += (k0 - q) * (k0 - q);
    }
    Ok((num / den).sqrt())
}

pub fn momentum_and_normalization() -> Result<String, String> {
    let (train, _) = small_data();
    let enc_cfg = EncoderConfig::tiny();

    // standalone pair with a key far from its query
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for alpha in [0.0, 0.5, 0.9, 0.999] {
        let mut pair = MomentumEncoderPair::new(EncoderParams::init(&enc_cfg, &mut rng), alpha).unwrap();
        pair.query = EncoderParams::init(&enc_cfg, &mut rng);
        let k0 = flat(&pair.key);
        pair.momentum_update();
        let ratio = contraction(&k0, &flat(&pair.key), &flat(&pair.query), alpha)?;
        ensure((ratio - alpha).abs() < 1e-9, || format!("alpha {alpha}: contraction {ratio}"))?;
    }

    // one update per epoch, so each epoch boundary brackets exactly one update
    let mut cfg = small_config(vec![ViewKind::Joint, ViewKind::Motion], train.len());
    cfg.contrastive.bank_capacity = 2 * train.len();
    let alpha = cfg.contrastive.momentum;
    let mut trainer = Trainer::new(&train, enc_cfg.clone(), cfg).unwrap();
    let mut updates = 0;
    while !trainer.is_done() {
        let keys: Vec<Vec<f64>> = trainer.views().iter().map(|v| flat(&v.pair.key)).collect();
        trainer.run_epoch().map_err(|e| e.to_string())?;
        for (vm, k0) in trainer.views().iter().zip(&keys) {
            let ratio = contraction(k0, &flat(&vm.pair.key), &flat(&vm.pair.query), alpha)
                .map_err(|e| format!("{} epoch {}: {e}", vm.view, trainer.epoch()))?;
            ensure((ratio - alpha).abs() < 1e-9, || format!("{}: contraction {ratio}", vm.view))?;
            updates += 1;
        }
    }

    // a multi-iteration run through both stages
    let cfg = small_config(vec![ViewKind::Joint, ViewKind::Motion, ViewKind::Bone], 8);
    let mut trainer = Trainer::new(&train, enc_cfg, cfg).unwrap();
    while !trainer.is_done() {
        trainer.run_epoch().map_err(|e| e.to_string())?;
    }
    let iterations = trainer.trace().len();
    let out = trainer.finish();
    ensure(out.key_gradient_audits == iterations * 3, || {
        format!("{} audits for {iterations} iterations x 3 views", out.key_gradient_audits)
    })?;
    ensure(out.max_unit_deviation <= 1e-9, || format!("query embedding off the unit sphere by {:e}", out.max_unit_deviation))?;
    let mut worst_bank = 0.0f64;
    for vm in &out.views {
        for row in vm.bank.contents() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_bank = worst_bank.max((n - 1.0).abs());
        }
    }
    ensure(worst_bank <= 1e-9, || format!("bank entry off the unit sphere by {worst_bank:e}"))?;
    Ok(format!(
        "{updates} tracked updates contract by alpha; {} key audits clean; max norm deviation {:.1e}",
        out.key_gradient_audits,
        out.max_unit_deviation.max(worst_bank)
    ))
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

struct RunArtifacts {
    trace_head: Vec<u8>,
    metrics: Vec<u8>,
    checkpoints: Vec<Vec<(String, Vec<u8>)>>,
    iterations: usize,
}

fn run_once(train: &LabeledDataset, dir: &Path) -> RunArtifacts {
    let cfg = small_config(vec![ViewKind::Joint, ViewKind::Motion], 8);
    let views = cfg.views.clone();
    let mut trainer = Trainer::new(train, EncoderConfig::tiny(), cfg).unwrap();
    while !trainer.is_done() {
        trainer.run_epoch().unwrap();
    }
    let mut trace_head = Vec::new();
    write_trace_csv(&trainer.trace()[..10], &views, &mut trace_head).unwrap();
    let mut metrics = Vec::new();
    write_metrics_csv(trainer.metrics(), &mut metrics).unwrap();
    let checkpoints = (0..views.len())
        .map(|i| {
            let d = dir.join(format!("ckpt-{i}"));
            save_checkpoint(&trainer.checkpoint(i), &d).unwrap();
            tree(&d)
        })
        .collect();
    RunArtifacts {
        trace_head,
        metrics,
        checkpoints,
        iterations: trainer.trace().len(),
    }
}

pub fn determinism() -> Result<String, String> {
    let (train, _) = small_data();
    let dir = tempfile::tempdir().unwrap();
    let a = run_once(&train, &dir.path().join("a"));
    let b = run_once(&train, &dir.path().join("b"));
    ensure(a.iterations >= 10, || format!("only {} iterations", a.iterations))?;
    ensure(a.trace_head == b.trace_head, || "per-iteration metrics differ within the first 10 iterations".into())?;
    ensure(a.metrics == b.metrics, || "epoch metrics differ".into())?;
    ensure(a.checkpoints == b.checkpoints, || "final checkpoints differ".into())?;
    let bytes: usize = a.checkpoints.iter().flatten().map(|(_, d)| d.len()).sum();
    Ok(format!(
        "{} iterations; first 10 metric rows and {bytes} checkpoint bytes identical",
        a.iterations
    ))
}
