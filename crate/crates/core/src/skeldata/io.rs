//! On-disk dataset layout:
//!
//! ```text
//! <dir>/meta.json    version, C, T, V, class_count, sample_count, edges, root, split
//! <dir>/data.f32     little-endian f32, samples concatenated, each C x T x V row-major
//! <dir>/labels.u32   little-endian u32, one per sample
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, SkeletonGraph, SkeletonSequence, Split, CHANNELS};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "V")]
    pub joints: usize,
    pub class_count: usize,
    pub sample_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    pub split: Split,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `ds` into `dir`, creating it if needed. Coordinates are stored as
/// `f32`; values that are not `f32`-representable are rounded.
pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let graph = ds.graph();
    let meta = DatasetMeta {
        version: FORMAT_VERSION,
        channels: CHANNELS,
        frames: ds.frames().unwrap_or(2),
        joints: graph.joint_count(),
        class_count: ds.class_count(),
        sample_count: ds.len(),
        edges: graph.edges().to_vec(),
        root: graph.root(),
        split: ds.split(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;

    let mut data = Vec::with_capacity(ds.len() * CHANNELS * meta.frames * meta.joints * 4);
    for s in ds.sequences() {
        for &v in s.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let data_path = dir.join("data.f32");
    fs::write(&data_path, data).map_err(io_err(&data_path))?;

    let labels: Vec<u8> = ds
        .labels()
        .into_iter()
        .flat_map(|l| (l as u32).to_le_bytes())
        .collect();
    let labels_path = dir.join("labels.u32");
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| format_err(&meta_path, format!("bad header: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(format_err(
            &meta_path,
            format!("unsupported version {} (expected {FORMAT_VERSION})", meta.version),
        ));
    }
    if meta.channels != CHANNELS {
        return Err(format_err(&meta_path, format!("C must be {CHANNELS}, got {}", meta.channels)));
    }
    if meta.class_count == 0 {
        return Err(format_err(&meta_path, "class_count must be positive"));
    }
    if meta.frames < 2 {
        return Err(format_err(&meta_path, format!("T must be at least 2, got {}", meta.frames)));
    }
    let graph = SkeletonGraph::new(meta.joints, meta.edges.clone(), meta.root)
        .map_err(|e| format_err(&meta_path, e.to_string()))?;

    let per_sample = CHANNELS * meta.frames * meta.joints;
    let data_path = dir.join("data.f32");
    let raw = fs::read(&data_path).map_err(io_err(&data_path))?;
    let expected = meta.sample_count * per_sample * 4;
    if raw.len() != expected {
        return Err(format_err(
            &data_path,
            format!("expected {expected} bytes, found {}", raw.len()),
        ));
    }
    let labels_path = dir.join("labels.u32");
    let raw_labels = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    if raw_labels.len() != meta.sample_count * 4 {
        return Err(format_err(
            &labels_path,
            format!("expected {} bytes, found {}", meta.sample_count * 4, raw_labels.len()),
        ));
    }

    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut sequences = Vec::with_capacity(meta.sample_count);
    for (i, (chunk, lb)) in values.chunks(per_sample).zip(raw_labels.chunks_exact(4)).enumerate() {
        let label = u32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]) as usize;
        let seq = SkeletonSequence::new(chunk.to_vec(), meta.frames, meta.joints, Some(label))
            .map_err(|e| format_err(&data_path, format!("sample {i}: {e}")))?;
        sequences.push(seq);
    }
    LabeledDataset::new(sequences, graph, meta.class_count, meta.split)
        .map_err(|e| format_err(dir, e.to_string()))
}
