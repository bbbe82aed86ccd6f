//! Positive-pair augmentation: random shear on the coordinate axes and a
//! random temporal crop from a reflection-padded clip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::skeldata::{DataError, SkeletonSequence, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shear amplitude: off-diagonal factors are drawn from `[-shear, shear]`.
    pub shear: f64,
    /// Padding ratio: `floor(T / crop_ratio)` frames are reflected onto each
    /// end. Zero disables cropping.
    pub crop_ratio: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shear: 0.5,
            crop_ratio: 6,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            shear: 0.0,
            crop_ratio: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.shear >= 0.0 && self.shear.is_finite()) {
            return Err(DataError::Config(format!(
                "shear amplitude must be finite and >= 0, got {}",
                self.shear
            )));
        }
        Ok(())
    }
}

/// `3 x 3` matrix with unit diagonal, row-major.
pub type ShearMatrix = [[f64; 3]; 3];

pub fn draw_shear(amplitude: f64, rng: &mut impl Rng) -> ShearMatrix {
    let mut a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if amplitude > 0.0 {
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = rng.random_range(-amplitude..=amplitude);
                }
            }
        }
    }
    a
}

/// Replaces every joint coordinate `p` with `a * p`.
pub fn apply_shear(x: &SkeletonSequence, a: &ShearMatrix) -> SkeletonSequence {
    let mut out = x.clone();
    for t in 0..x.frames() {
        for v in 0..x.joints() {
            let p = x.point(t, v);
            let q = [0, 1, 2].map(|i| a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2]);
            out.set_point(t, v, q);
        }
    }
    out
}

pub fn shear(x: &SkeletonSequence, amplitude: f64, rng: &mut impl Rng) -> SkeletonSequence {
    if amplitude == 0.0 {
        return x.clone();
    }
    let a = draw_shear(amplitude, rng);
    apply_shear(x, &a)
}

/// Padding length for a clip of `frames` frames; `None` when cropping is off.
pub fn crop_padding(frames: usize, ratio: usize) -> Option<usize> {
    (ratio > 0).then(|| frames / ratio)
}

/// Source frame index in the original clip for padded position `i`
/// (`0 <= i < T + 2 * pad`), using reflection without repeating the edge.
fn reflected_index(i: usize, frames: usize, pad: usize) -> usize {
    let pos = i as isize - pad as isize;
    let last = frames as isize - 1;
    let r = if pos < 0 {
        -pos
    } else if pos > last {
        2 * last - pos
    } else {
        pos
    };
    r as usize
}

/// Takes the window of `T` frames starting at `start` from the padded clip.
pub fn crop_window(x: &SkeletonSequence, pad: usize, start: usize) -> Result<SkeletonSequence, DataError> {
    let t_len = x.frames();
    if pad >= t_len {
        return Err(DataError::Config(format!(
            "crop padding {pad} must be shorter than the clip ({t_len} frames)"
        )));
    }
    if start > 2 * pad {
        return Err(DataError::Config(format!(
            "crop start {start} exceeds the last valid offset {}",
            2 * pad
        )));
    }
    let mut out = x.clone();
    for t in 0..t_len {
        let src = reflected_index(start + t, t_len, pad);
        for c in 0..CHANNELS {
            for v in 0..x.joints() {
                out.set(c, t, v, x.at(c, src, v));
            }
        }
    }
    Ok(out)
}

pub fn crop(x: &SkeletonSequence, ratio: usize, rng: &mut impl Rng) -> Result<SkeletonSequence, DataError> {
    let Some(pad) = crop_padding(x.frames(), ratio) else {
        return Ok(x.clone());
    };
    if pad >= x.frames() {
        return Err(DataError::Config(format!(
            "crop padding {pad} must be shorter than the clip ({} frames)",
            x.frames()
        )));
    }
    let start = rng.random_range(0..=2 * pad);
    crop_window(x, pad, start)
}

/// One augmented draw: shear followed by crop.
pub fn augment(x: &SkeletonSequence, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SkeletonSequence, DataError> {
    let sheared = shear(x, cfg.shear, rng);
    crop(&sheared, cfg.crop_ratio, rng)
}

/// Two independent augmented copies of `x`.
pub fn augment_pair(
    x: &SkeletonSequence,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(SkeletonSequence, SkeletonSequence), DataError> {
    let a = augment(x, cfg, rng)?;
    let b = augment(x, cfg, rng)?;
    Ok((a, b))
}
