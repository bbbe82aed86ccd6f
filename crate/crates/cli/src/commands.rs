use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use crossclr_core::encoder::{load_checkpoint, save_checkpoint, Checkpoint};
use crossclr_core::evalkit::{
    config_digest, ensemble_accuracy, export_embeddings, finetune_eval, knn_eval, linear_eval, semi_supervised_eval,
    EvalReport, ProtocolResult, ViewAccuracy,
};
use crossclr_core::skeldata::{load_dataset, save_dataset, LabeledDataset, SynthGenerator, ViewKind};
use crossclr_core::trainkit::{write_metrics_csv, write_trace_csv, Trainer};

use crate::config::{PretrainMode, RunConfig};
use crate::{usage, CliError, EvalArgs, ExportArgs, GenDataArgs, PretrainArgs, Protocol, SplitArg};

type CmdResult = Result<(), CliError>;

fn load_split(data: &Path, split: &str) -> anyhow::Result<LabeledDataset> {
    let dir = data.join(split);
    load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.poses {
        s.poses = v as usize;
    }
    if let Some(v) = a.motions {
        s.motions = v as usize;
    }
    if let Some(v) = a.per_class {
        s.per_class_train = v;
    }
    if let Some(v) = a.per_class_test {
        s.per_class_test = v;
    }
    if let Some(v) = a.joints {
        s.joints = v;
    }
    if let Some(v) = a.frames {
        s.frames = v;
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    let generator = SynthGenerator::new(cfg.synth.clone()).map_err(|e| usage(e.to_string()))?;
    let (train, test) = generator.generate().map_err(anyhow::Error::from)?;
    for (ds, split) in [(&train, "train"), (&test, "test")] {
        let dir = a.out.join(split);
        save_dataset(ds, &dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!(
        "wrote {}: {} train samples, {} test samples, {} classes",
        a.out.display(),
        train.len(),
        test.len(),
        train.class_count()
    );
    Ok(())
}

fn view_list(views: &[ViewKind]) -> String {
    views.iter().map(|v| v.name()).collect::<Vec<_>>().join("-")
}

pub fn pretrain(a: PretrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(v) = a.views {
        cfg.train.views = v;
    }
    cfg.apply_seed(a.seed.unwrap_or(cfg.seed));
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        if a.switch_epoch.is_none() && cfg.train.stage_switch_epoch > e {
            cfg.train.stage_switch_epoch = (e / 2).max(1);
        }
    }
    if let Some(s) = a.switch_epoch {
        cfg.train.stage_switch_epoch = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(k) = a.top_k {
        cfg.train.contrastive.top_k = k;
    }
    if let Some(d) = a.data {
        cfg.data_dir = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    match cfg.mode {
        PretrainMode::Skeletonclr => cfg.train.stage_switch_epoch = cfg.train.epochs,
        PretrainMode::Crossclr => {
            if cfg.train.views.len() < 2 {
                return Err(usage("crossclr mode needs at least 2 views"));
            }
            if cfg.train.stage_switch_epoch >= cfg.train.epochs {
                return Err(usage(format!(
                    "crossclr mode needs a switch epoch below {}, got {}",
                    cfg.train.epochs, cfg.train.stage_switch_epoch
                )));
            }
        }
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    cfg.encoder.validate().map_err(|e| usage(e.to_string()))?;
    let data_dir = cfg.data_dir.clone().ok_or_else(|| usage("--data is required"))?;

    let run_id = a.run_id.unwrap_or_else(|| {
        let mode = match cfg.mode {
            PretrainMode::Skeletonclr => "skeletonclr",
            PretrainMode::Crossclr => "crossclr",
        };
        format!("{mode}-{}-seed{}", view_list(&cfg.train.views), cfg.seed)
    });
    let run_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")).join(run_id);
    let train = load_split(&data_dir, "train")?;
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    cfg.save(&run_dir.join("config.json"))?;

    let mut trainer = Trainer::new(&train, cfg.encoder.clone(), cfg.train.clone()).map_err(anyhow::Error::from)?;
    while !trainer.is_done() {
        for m in trainer.run_epoch().map_err(anyhow::Error::from)? {
            eprintln!(
                "epoch {:>3} {:<6} {:<9} loss {:.4} lr {}",
                m.epoch,
                m.view.name(),
                m.stage.to_string(),
                m.mean_loss,
                m.lr
            );
        }
    }
    for (i, vm) in trainer.views().iter().enumerate() {
        let dir = run_dir.join(format!("ckpt-{}", vm.view));
        save_checkpoint(&trainer.checkpoint(i), &dir).map_err(anyhow::Error::from)?;
    }
    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_csv(trainer.metrics(), BufWriter::new(File::create(&metrics_path).context("creating metrics.csv")?))
        .context("writing metrics.csv")?;
    write_trace_csv(
        trainer.trace(),
        &cfg.train.views,
        BufWriter::new(File::create(run_dir.join("trace.csv")).context("creating trace.csv")?),
    )
    .context("writing trace.csv")?;
    println!("run written to {}", run_dir.display());
    Ok(())
}

fn load_view(ckpt: &Path, view: ViewKind, data: &LabeledDataset) -> anyhow::Result<Checkpoint> {
    let dir = ckpt.join(format!("ckpt-{view}"));
    let c = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if c.view != view {
        return Err(anyhow!("{} holds a {} encoder, not {view}", dir.display(), c.view));
    }
    if c.encoder.graph() != data.graph() {
        return Err(anyhow!("{} was trained on a different skeleton", dir.display()));
    }
    Ok(c)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let config_path = a.config.clone().or_else(|| {
        let p = a.ckpt.join("config.json");
        p.exists().then_some(p)
    });
    let mut cfg = RunConfig::load_or_default(config_path.as_deref())?;
    cfg.apply_seed(a.seed.unwrap_or(cfg.seed));
    if let Some(e) = a.epochs {
        let fresh = crossclr_core::evalkit::ProbeConfig::with_epochs(e);
        cfg.eval.probe.epochs = e;
        cfg.eval.probe.lr.milestones = fresh.lr.milestones;
    }
    if let Some(f) = a.fraction {
        cfg.eval.label_fraction = f;
    }
    if let Some(k) = a.k {
        cfg.eval.knn_k = k;
    }
    if let Some(d) = a.data {
        cfg.data_dir = Some(d);
    }
    if a.views.is_empty() {
        return Err(usage("at least one view is required"));
    }
    if a.ensemble && (a.views.len() < 2 || a.protocol == Protocol::Knn) {
        return Err(usage("--ensemble needs >= 2 views and a classifier protocol"));
    }
    if a.protocol == Protocol::Semi && !(cfg.eval.label_fraction > 0.0 && cfg.eval.label_fraction <= 1.0) {
        return Err(usage(format!("--fraction must lie in (0, 1], got {}", cfg.eval.label_fraction)));
    }
    let data_dir = cfg.data_dir.clone().ok_or_else(|| usage("--data is required"))?;
    let train = load_split(&data_dir, "train")?;
    let test = load_split(&data_dir, "test")?;

    let mut per_view = Vec::new();
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::new();
    for &view in &a.views {
        let c = load_view(&a.ckpt, view, &train)?;
        let (enc, params) = (&c.encoder, &c.pair.query);
        let result: anyhow::Result<ProtocolResult> = match a.protocol {
            Protocol::Linear => linear_eval(enc, params, &train, &test, view, &cfg.eval.probe).map_err(Into::into),
            Protocol::Semi => {
                semi_supervised_eval(enc, params, &train, &test, view, cfg.eval.label_fraction, &cfg.eval.probe)
                    .map_err(Into::into)
            }
            Protocol::Finetune => {
                finetune_eval(enc, params, &train, &test, view, &cfg.eval.probe, &cfg.eval.finetune)
                    .map(|r| r.result)
                    .map_err(Into::into)
            }
            Protocol::Knn => knn_eval(enc, params, &train, &test, view, cfg.eval.knn_k)
                .map(|accuracy| ProtocolResult {
                    accuracy,
                    probabilities: Vec::new(),
                })
                .map_err(Into::into),
        };
        let result = result?;
        eprintln!("{view}: {:.2}%", result.accuracy);
        per_view.push(ViewAccuracy {
            view,
            accuracy: result.accuracy,
        });
        tables.push(result.probabilities);
    }
    let ensemble = if a.ensemble {
        let refs: Vec<&[Vec<f64>]> = tables.iter().map(Vec::as_slice).collect();
        Some(ensemble_accuracy(&refs, &test.labels()).map_err(anyhow::Error::from)?)
    } else {
        None
    };
    let label_fraction = if a.protocol == Protocol::Semi {
        cfg.eval.label_fraction
    } else {
        1.0
    };
    let report = EvalReport {
        protocol: a.protocol.name().to_string(),
        per_view,
        ensemble,
        label_fraction,
        seeds: vec![cfg.seed],
        config_digest: config_digest(&cfg),
    };
    let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    println!("{text}");
    let path = a
        .report
        .unwrap_or_else(|| a.ckpt.join(format!("eval-{}.json", a.protocol.name())));
    fs::write(&path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn export(a: ExportArgs) -> CmdResult {
    let split = match a.split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    };
    let ds = load_split(&a.data, split)?;
    let c = load_view(&a.ckpt, a.view, &ds)?;
    let rows = export_embeddings(&c.encoder, &c.pair.query, &ds, a.view, &a.out).map_err(anyhow::Error::from)?;
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}
