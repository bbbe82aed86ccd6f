use serde::{Deserialize, Serialize};

use super::DataError;

/// Coordinate channels per joint.
pub const CHANNELS: usize = 3;

/// A single-body skeleton clip stored as a dense `C x T x V` array.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    data: Vec<f64>,
    frames: usize,
    joints: usize,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(
        data: Vec<f64>,
        frames: usize,
        joints: usize,
        label: Option<usize>,
    ) -> Result<Self, DataError> {
        if frames < 2 || joints < 2 {
            return Err(DataError::InvalidSequence(format!(
                "need at least 2 frames and 2 joints, got T={frames} V={joints}"
            )));
        }
        Self::new_unchecked_len(data, frames, joints, label)
    }

    /// Like [`SkeletonSequence::new`] but allows a single frame. Used for raw
    /// clips before resampling.
    pub fn raw(
        data: Vec<f64>,
        frames: usize,
        joints: usize,
        label: Option<usize>,
    ) -> Result<Self, DataError> {
        if frames == 0 || joints < 2 {
            return Err(DataError::InvalidSequence(format!(
                "raw clip needs frames and at least 2 joints, got T={frames} V={joints}"
            )));
        }
        Self::new_unchecked_len(data, frames, joints, label)
    }

    fn new_unchecked_len(
        data: Vec<f64>,
        frames: usize,
        joints: usize,
        label: Option<usize>,
    ) -> Result<Self, DataError> {
        if data.len() != CHANNELS * frames * joints {
            return Err(DataError::InvalidSequence(format!(
                "expected {} values for C={CHANNELS} T={frames} V={joints}, got {}",
                CHANNELS * frames * joints,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidSequence(format!(
                "non-finite coordinate at flat index {i}"
            )));
        }
        Ok(Self {
            data,
            frames,
            joints,
            label,
        })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            data: vec![0.0; CHANNELS * frames * joints],
            frames,
            joints,
            label: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, v: usize) -> usize {
        (c * self.frames + t) * self.joints + v
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, v: usize) -> f64 {
        self.data[self.index(c, t, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: usize, value: f64) {
        let i = self.index(c, t, v);
        self.data[i] = value;
    }

    pub fn point(&self, t: usize, v: usize) -> [f64; 3] {
        [self.at(0, t, v), self.at(1, t, v), self.at(2, t, v)]
    }

    pub fn set_point(&mut self, t: usize, v: usize, p: [f64; 3]) {
        for (c, value) in p.into_iter().enumerate() {
            self.set(c, t, v, value);
        }
    }

    /// Returns a copy with every coordinate transformed by `f(c, t, v, value)`.
    pub fn map_indexed(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for t in 0..self.frames {
                for v in 0..self.joints {
                    let i = self.index(c, t, v);
                    out.data[i] = f(c, t, v, self.data[i]);
                }
            }
        }
        out
    }

    /// A frame is invalid when every joint sits exactly at the origin.
    pub fn is_frame_valid(&self, t: usize) -> bool {
        (0..CHANNELS).any(|c| (0..self.joints).any(|v| self.at(c, t, v) != 0.0))
    }
}

/// Data view of a skeleton sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Joint,
    Motion,
    Bone,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Joint, ViewKind::Motion, ViewKind::Bone];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Joint => "joint",
            ViewKind::Motion => "motion",
            ViewKind::Bone => "bone",
        }
    }
}

impl std::fmt::Display for ViewKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ViewKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "joint" => Ok(ViewKind::Joint),
            "motion" => Ok(ViewKind::Motion),
            "bone" => Ok(ViewKind::Bone),
            other => Err(DataError::Config(format!(
                "unknown view '{other}' (expected joint, motion or bone)"
            ))),
        }
    }
}
