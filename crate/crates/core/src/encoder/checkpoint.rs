//! Checkpoint layout for one view:
//!
//! ```text
//! <dir>/ckpt.json       config, graph, epoch, view, momentum, manifests
//! <dir>/params.f32      little-endian f32: query tensors, then key tensors
//! <dir>/optimizer.f32   little-endian f32: optimizer state tensors
//! ```
//!
//! Manifest offsets are byte offsets into the matching blob.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, EncoderError, EncoderParams, MomentumEncoderPair};
use crate::numcore::Tensor;
use crate::skeldata::{SkeletonGraph, SkeletonGraphSpec, ViewKind};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: EncoderConfig,
    graph: SkeletonGraphSpec,
    epoch: usize,
    view: ViewKind,
    momentum: f64,
    params: Vec<TensorEntry>,
    optimizer: Vec<TensorEntry>,
}

/// Everything needed to resume or evaluate one view's encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub pair: MomentumEncoderPair,
    pub epoch: usize,
    pub view: ViewKind,
    /// Named optimizer state tensors (e.g. velocities).
    pub optimizer: Vec<(String, Tensor)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn pack<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (entries, blob)
}

fn unpack(path: &Path, entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor)>, EncoderError> {
    let mut out = Vec::with_capacity(entries.len());
    let mut expected_offset = 0;
    for e in entries {
        if e.offset != expected_offset {
            return Err(bad(
                path,
                format!("tensor {} at byte {} but expected {expected_offset}", e.name, e.offset),
            ));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > blob.len() {
            return Err(bad(
                path,
                format!("tensor {} needs {end} bytes, found {}", e.name, blob.len()),
            ));
        }
        let data: Vec<f64> = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(path, format!("tensor {} holds non-finite values", e.name)));
        }
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(bad(
            path,
            format!("expected {expected_offset} bytes, found {}", blob.len()),
        ));
    }
    Ok(out)
}

fn fill(
    path: &Path,
    prefix: &str,
    template: &EncoderParams,
    tensors: &mut impl Iterator<Item = (String, Tensor)>,
) -> Result<EncoderParams, EncoderError> {
    let mut params = template.clone();
    let names: Vec<String> = template.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (slot, name) in params.all_tensors_mut().into_iter().zip(names) {
        let want = format!("{prefix}.{name}");
        let (got, t) = tensors
            .next()
            .ok_or_else(|| bad(path, format!("missing tensor {want}")))?;
        if got != want {
            return Err(bad(path, format!("expected tensor {want}, found {got}")));
        }
        if t.shape() != slot.shape() {
            return Err(bad(
                path,
                format!("tensor {want} has shape {:?}, config implies {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    Ok(params)
}

/// Writes `ckpt` into `dir`, creating it if needed. Values are stored as f32.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<(), EncoderError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let named = |prefix: &str, p: &EncoderParams| -> Vec<(String, Tensor)> {
        p.named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    };
    let mut tensors = named("query", &ckpt.pair.query);
    tensors.extend(named("key", &ckpt.pair.key));
    let (params, param_blob) = pack(tensors.iter().map(|(n, t)| (n.clone(), t)));
    let (optimizer, opt_blob) = pack(ckpt.optimizer.iter().map(|(n, t)| (n.clone(), t)));
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: ckpt.encoder.config().clone(),
        graph: ckpt.encoder.graph().spec(),
        epoch: ckpt.epoch,
        view: ckpt.view,
        momentum: ckpt.pair.momentum,
        params,
        optimizer,
    };
    let json_path = dir.join("ckpt.json");
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    let params_path = dir.join("params.f32");
    fs::write(&params_path, param_blob).map_err(io_err(&params_path))?;
    let opt_path = dir.join("optimizer.f32");
    fs::write(&opt_path, opt_blob).map_err(io_err(&opt_path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, EncoderError> {
    let json_path = dir.join("ckpt.json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| bad(&json_path, format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(
            &json_path,
            format!("unsupported version {} (expected {CHECKPOINT_VERSION})", header.version),
        ));
    }
    let graph = SkeletonGraph::new(header.graph.joint_count, header.graph.edges.clone(), header.graph.root)
        .map_err(|e| bad(&json_path, e.to_string()))?;
    let encoder = Encoder::new(header.config, graph)?;

    let params_path = dir.join("params.f32");
    let blob = fs::read(&params_path).map_err(io_err(&params_path))?;
    let tensors = unpack(&params_path, &header.params, &blob)?;
    // Shapes come from a freshly initialized template; values are overwritten.
    let template = EncoderParams::init(encoder.config(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut iter = tensors.into_iter();
    let query = fill(&params_path, "query", &template, &mut iter)?;
    let key = fill(&params_path, "key", &template, &mut iter)?;
    if let Some((name, _)) = iter.next() {
        return Err(bad(&params_path, format!("unexpected extra tensor {name}")));
    }

    let opt_path = dir.join("optimizer.f32");
    let opt_blob = fs::read(&opt_path).map_err(io_err(&opt_path))?;
    let optimizer = unpack(&opt_path, &header.optimizer, &opt_blob)?;

    let mut pair = MomentumEncoderPair::new(query, header.momentum)
        .map_err(|e| bad(&json_path, e.to_string()))?;
    pair.key = key;
    Ok(Checkpoint {
        encoder,
        pair,
        epoch: header.epoch,
        view: header.view,
        optimizer,
    })
}
