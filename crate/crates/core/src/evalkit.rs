//! Downstream protocols on pretrained encoders: linear probe, kNN, finetune,
//! reduced-label probe, multi-view score fusion and embedding export.

use std::fs;
use std::hash::{DefaultHasher, Hasher};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{batch_tensor, Encoder, EncoderError, EncoderParams, Mode};
use crate::numcore::{Graph, Tensor, TensorError, Var};
use crate::skeldata::{make_view, DataError, LabeledDataset, SkeletonSequence, ViewKind};
use crate::trainkit::{sgd_step, LrSchedule, OptimizerState, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("datasets disagree: {0}")]
    Mismatch(String),
    #[error("i/o error on {path}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Encoder(EncoderError::Tensor(e))
    }
}

/// Classifier training settings shared by the probe and finetune protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::with_epochs(100)
    }
}

impl ProbeConfig {
    /// Base rate 0.5 dropped tenfold at 80% of `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 64,
            lr: LrSchedule {
                base: 0.5,
                milestones: vec![epochs * 4 / 5],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.batch_size == 0 {
            return Err(EvalError::Config("batch size must be positive".into()));
        }
        self.lr.validate()?;
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(EvalError::Config(format!(
                "need 0 <= momentum < 1 and weight decay >= 0, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Affine classifier `logits = h W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[c_h, classes]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Class probabilities for each feature row.
    pub fn probabilities(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (dim, classes) = (self.weight.shape()[0], self.classes());
        features
            .iter()
            .map(|h| {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| self.bias.data()[c] + (0..dim).map(|d| h[d] * self.weight.data()[d * classes + c]).sum::<f64>())
                    .collect();
                softmax(&logits)
            })
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), EvalError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(EvalError::Label { label, classes }),
        None => Ok(()),
    }
}

fn check_compatible(train: &LabeledDataset, test: &LabeledDataset) -> Result<(), EvalError> {
    if train.graph() != test.graph() || train.frames() != test.frames() {
        return Err(EvalError::Mismatch("train and test use different skeletons or lengths".into()));
    }
    if train.class_count() != test.class_count() {
        return Err(EvalError::Mismatch(format!(
            "{} train classes vs {} test classes",
            train.class_count(),
            test.class_count()
        )));
    }
    if train.is_empty() {
        return Err(EvalError::Config("training set is empty".into()));
    }
    Ok(())
}

/// The `view` transform of every sequence in `ds`.
pub fn view_sequences(ds: &LabeledDataset, view: ViewKind) -> Result<Vec<SkeletonSequence>, EvalError> {
    Ok(ds
        .sequences()
        .iter()
        .map(|s| make_view(s, ds.graph(), view))
        .collect::<Result<_, _>>()?)
}

/// Eval-mode hidden vectors of `ds` under `view`.
pub fn embed_view(
    encoder: &Encoder,
    params: &EncoderParams,
    ds: &LabeledDataset,
    view: ViewKind,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let seqs = view_sequences(ds, view)?;
    let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
    Ok(encoder.embed(params, &refs, 128)?)
}

/// Mean cross-entropy of `logits: [B, classes]` against `labels`.
fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let lse = g.logsumexp(logits)?;
    let index: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    let picked = g.gather(logits, &index)?;
    let b = labels.len();
    let picked = g.reshape(picked, &[b])?;
    let per_row = g.sub(lse, picked)?;
    g.mean(per_row)
}

/// Fits a zero-initialized linear classifier on fixed features.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier, EvalError> {
    cfg.validate()?;
    check_labels(labels, classes)?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(EvalError::Config(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    let mut clf = LinearClassifier::zeros(dim, classes);
    let mut state = OptimizerState::zeros_like([&clf.weight, &clf.bias]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let rows: Vec<f64> = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let x = g.constant(Tensor::new(vec![batch.len(), dim], rows)?);
            let w = g.param(clf.weight.clone());
            let b = g.param(clf.bias.clone());
            let logits = g.matmul(x, w)?;
            let logits = g.add(logits, b)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&mut g, logits, &y)?;
            let mut grads = g.backward(loss)?;
            let gw = grads.take(w).expect("weight gradient");
            let gb = grads.take(b).expect("bias gradient");
            sgd_step(
                &mut [&mut clf.weight, &mut clf.bias],
                &[&gw, &gb],
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
    }
    Ok(clf)
}

/// Accuracy and class probabilities on the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolResult {
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    pub probabilities: Vec<Vec<f64>>,
}

fn score(clf: &LinearClassifier, features: &[Vec<f64>], labels: &[usize]) -> ProtocolResult {
    let probabilities = clf.probabilities(features);
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    ProtocolResult {
        accuracy: accuracy(&predictions, labels),
        probabilities,
    }
}

/// Linear classifier on frozen eval-mode hidden vectors of `view`.
pub fn linear_eval(
    encoder: &Encoder,
    params: &EncoderParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    view: ViewKind,
    cfg: &ProbeConfig,
) -> Result<ProtocolResult, EvalError> {
    check_compatible(train, test)?;
    let train_h = embed_view(encoder, params, train, view)?;
    let test_h = embed_view(encoder, params, test, view)?;
    let clf = train_linear_classifier(&train_h, &train.labels(), train.class_count(), cfg)?;
    Ok(score(&clf, &test_h, &test.labels()))
}

/// Cosine k-nearest-neighbor vote over training hidden vectors. Ties in the
/// vote go to the tied label whose nearest member ranks highest.
pub fn knn_predict(train: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> usize {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            vec![0.0; v.len()]
        } else {
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        }
    };
    let q = unit(query);
    let sims: Vec<f64> = train
        .iter()
        .map(|t| unit(t).iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let top = &order[..k];
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; classes];
    for &i in top {
        votes[labels[i]] += 1;
    }
    let best = *votes.iter().max().expect("k >= 1");
    top.iter()
        .map(|&i| labels[i])
        .find(|&l| votes[l] == best)
        .expect("some neighbor has the winning label")
}

pub fn knn_eval(
    encoder: &Encoder,
    params: &EncoderParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    view: ViewKind,
    k: usize,
) -> Result<f64, EvalError> {
    check_compatible(train, test)?;
    if k == 0 || k > train.len() {
        return Err(EvalError::Config(format!(
            "k must lie in [1, {}], got {k}",
            train.len()
        )));
    }
    let train_h = embed_view(encoder, params, train, view)?;
    let test_h = embed_view(encoder, params, test, view)?;
    let labels = train.labels();
    let predictions: Vec<usize> = test_h.iter().map(|q| knn_predict(&train_h, &labels, q, k)).collect();
    Ok(accuracy(&predictions, &test.labels()))
}

/// Outcome of [`finetune_eval`].
#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub result: ProtocolResult,
    pub params: EncoderParams,
}

/// Fits the linear probe, then trains probe and encoder jointly for
/// `finetune.epochs` more epochs. With zero finetune epochs the result is the
/// probe's.
pub fn finetune_eval(
    encoder: &Encoder,
    params: &EncoderParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    view: ViewKind,
    probe: &ProbeConfig,
    finetune: &ProbeConfig,
) -> Result<FinetuneResult, EvalError> {
    check_compatible(train, test)?;
    finetune.validate()?;
    let train_seqs = view_sequences(train, view)?;
    let train_labels = train.labels();
    let refs: Vec<&SkeletonSequence> = train_seqs.iter().collect();
    let train_h = encoder.embed(params, &refs, 128)?;
    let mut clf = train_linear_classifier(&train_h, &train_labels, train.class_count(), probe)?;

    let mut params = params.clone();
    let mut enc_state = OptimizerState::zeros_like(params.learnable().into_iter().map(|(_, t)| t));
    let mut clf_state = OptimizerState::zeros_like([&clf.weight, &clf.bias]);
    let mut rng = ChaCha8Rng::seed_from_u64(finetune.seed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let batch_size = finetune.batch_size.max(2);
    for epoch in 0..finetune.epochs {
        let lr = finetune.lr.at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let mut g = Graph::new();
            let bound = encoder.bind(&mut g, &params, true);
            let seqs: Vec<&SkeletonSequence> = batch.iter().map(|&i| &train_seqs[i]).collect();
            let x = g.constant(batch_tensor(&seqs)?);
            let (h, stats) = encoder.hidden(&mut g, &bound, &params, x, Mode::Train)?;
            let w = g.param(clf.weight.clone());
            let b = g.param(clf.bias.clone());
            let logits = g.matmul(h, w)?;
            let logits = g.add(logits, b)?;
            let y: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let loss = cross_entropy(&mut g, logits, &y)?;
            let mut grads = g.backward(loss)?;
            let enc_grads: Vec<Tensor> = bound
                .learnable()
                .into_iter()
                .zip(params.learnable())
                .map(|(v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let gw = grads.take(w).expect("weight gradient");
            let gb = grads.take(b).expect("bias gradient");
            let refs: Vec<&Tensor> = enc_grads.iter().collect();
            sgd_step(
                &mut params.learnable_mut(),
                &refs,
                &mut enc_state,
                lr,
                finetune.momentum,
                finetune.weight_decay,
            )?;
            sgd_step(
                &mut [&mut clf.weight, &mut clf.bias],
                &[&gw, &gb],
                &mut clf_state,
                lr,
                finetune.momentum,
                finetune.weight_decay,
            )?;
            params.update_running_stats(&stats, encoder.config().norm_momentum);
        }
    }
    let test_h = embed_view(encoder, &params, test, view)?;
    Ok(FinetuneResult {
        result: score(&clf, &test_h, &test.labels()),
        params,
    })
}

/// Indices of a uniform `fraction` of `labels`, topped up with one random
/// sample of every class the draw missed. `fraction == 1` keeps everything
/// in order.
pub fn label_subset(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    if labels.is_empty() {
        return Err(EvalError::Config("no labeled samples to draw from".into()));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = ((fraction * labels.len() as f64).round() as usize).max(1);
    let mut all: Vec<usize> = (0..labels.len()).collect();
    all.shuffle(&mut rng);
    let mut chosen: Vec<usize> = all[..count].to_vec();
    for class in 0..classes {
        if chosen.iter().any(|&i| labels[i] == class) {
            continue;
        }
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if let Some(&pick) = members.choose(&mut rng) {
            chosen.push(pick);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Linear probe trained on a random `fraction` of the training labels.
pub fn semi_supervised_eval(
    encoder: &Encoder,
    params: &EncoderParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    view: ViewKind,
    fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProtocolResult, EvalError> {
    let subset = label_subset(&train.labels(), train.class_count(), fraction, cfg.seed)?;
    linear_eval(encoder, params, &train.subset(&subset), test, view, cfg)
}

/// Sums per-view class probabilities and returns the argmax (lowest index on
/// ties). Each class total is summed in sorted order, so the result does not
/// depend on the order of the views.
pub fn ensemble_fuse(per_view: &[&[f64]]) -> Result<usize, EvalError> {
    let first = per_view
        .first()
        .ok_or_else(|| EvalError::Config("no views to fuse".into()))?;
    if per_view.len() < 2 {
        return Err(EvalError::Config("fusion needs at least 2 views".into()));
    }
    if let Some(v) = per_view.iter().find(|v| v.len() != first.len()) {
        return Err(EvalError::Mismatch(format!(
            "class counts {} and {} differ",
            first.len(),
            v.len()
        )));
    }
    let totals: Vec<f64> = (0..first.len())
        .map(|c| {
            let mut parts: Vec<f64> = per_view.iter().map(|v| v[c]).collect();
            parts.sort_by(f64::total_cmp);
            parts.iter().sum()
        })
        .collect();
    Ok(argmax(&totals))
}

/// Accuracy of fused predictions from per-view probability tables.
pub fn ensemble_accuracy(per_view: &[&[Vec<f64>]], labels: &[usize]) -> Result<f64, EvalError> {
    let mut predictions = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let rows: Vec<&[f64]> = per_view.iter().map(|v| v[i].as_slice()).collect();
        predictions.push(ensemble_fuse(&rows)?);
    }
    Ok(accuracy(&predictions, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAccuracy {
    pub view: ViewKind,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub per_view: Vec<ViewAccuracy>,
    pub ensemble: Option<f64>,
    pub label_fraction: f64,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

/// Short stable hex digest of any serializable config.
pub fn config_digest(cfg: &impl Serialize) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h = DefaultHasher::new();
    h.write(text.as_bytes());
    format!("{:016x}", h.finish())
}

/// Writes `sample_id,label,h_1..h_c` rows for every sample of `ds`.
pub fn export_embeddings(
    encoder: &Encoder,
    params: &EncoderParams,
    ds: &LabeledDataset,
    view: ViewKind,
    path: &Path,
) -> Result<usize, EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let h = embed_view(encoder, params, ds, view)?;
    let mut out = Vec::new();
    let dim = encoder.config().hidden_dim;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((1..=dim).map(|i| format!("h_{i}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, (row, label)) in h.iter().zip(ds.labels()).enumerate() {
        let values: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{i},{label},{}", values.join(",")).map_err(io)?;
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, out).map_err(io)?;
    Ok(h.len())
}
