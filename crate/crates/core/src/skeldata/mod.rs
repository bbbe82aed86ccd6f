//! Skeleton sequences, data views, preprocessing and datasets.

mod graph;
mod io;
mod sequence;
mod synth;
mod views;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use graph::{SkeletonGraph, SkeletonGraphSpec};
pub use io::{load_dataset, save_dataset, DatasetMeta, FORMAT_VERSION};
pub use sequence::{SkeletonSequence, ViewKind, CHANNELS};
pub use synth::{synth_dataset, Placement, SynthConfig, SynthGenerator};
pub use views::{bone_view, make_view, motion_view, resample};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("sequence {0} has no valid frames")]
    NoValidFrames(String),
    #[error("graph has {graph} joints but sequence has {sequence}")]
    JointMismatch { graph: usize, sequence: usize },
    #[error("invalid skeleton graph: {0}")]
    Graph(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled sequences sharing one skeleton graph and one `T x V` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    sequences: Vec<SkeletonSequence>,
    graph: SkeletonGraph,
    class_count: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        sequences: Vec<SkeletonSequence>,
        graph: SkeletonGraph,
        class_count: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if class_count == 0 {
            return Err(DataError::Dataset("class count must be positive".into()));
        }
        if let Some(first) = sequences.first() {
            let (t, v) = (first.frames(), first.joints());
            if v != graph.joint_count() {
                return Err(DataError::JointMismatch {
                    graph: graph.joint_count(),
                    sequence: v,
                });
            }
            for (i, s) in sequences.iter().enumerate() {
                if s.frames() != t || s.joints() != v {
                    return Err(DataError::Dataset(format!(
                        "sequence {i} is T={} V={}, expected T={t} V={v}",
                        s.frames(),
                        s.joints()
                    )));
                }
                match s.label {
                    Some(l) if l < class_count => {}
                    Some(l) => {
                        return Err(DataError::Dataset(format!(
                            "sequence {i} has label {l} outside [0, {class_count})"
                        )))
                    }
                    None => return Err(DataError::Dataset(format!("sequence {i} is unlabeled"))),
                }
            }
        }
        Ok(Self {
            sequences,
            graph,
            class_count,
            split,
        })
    }

    pub fn sequences(&self) -> &[SkeletonSequence] {
        &self.sequences
    }

    pub fn get(&self, i: usize) -> &SkeletonSequence {
        &self.sequences[i]
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn frames(&self) -> Option<usize> {
        self.sequences.first().map(SkeletonSequence::frames)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .map(|s| s.label.expect("validated on construction"))
            .collect()
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            graph: self.graph.clone(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}
