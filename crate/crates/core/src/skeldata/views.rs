use super::{DataError, SkeletonGraph, SkeletonSequence, ViewKind, CHANNELS};

/// Drops invalid (all-zero) frames and linearly resamples the remaining ones
/// to `target_len` frames spread uniformly over the valid span.
pub fn resample(seq: &SkeletonSequence, target_len: usize, id: &str) -> Result<SkeletonSequence, DataError> {
    if target_len < 2 {
        return Err(DataError::InvalidSequence(format!(
            "{id}: target length must be at least 2, got {target_len}"
        )));
    }
    let valid: Vec<usize> = (0..seq.frames()).filter(|&t| seq.is_frame_valid(t)).collect();
    if valid.is_empty() {
        return Err(DataError::NoValidFrames(id.to_string()));
    }
    let v = seq.joints();
    let mut out = SkeletonSequence::zeros(target_len, v);
    out.label = seq.label;
    let span = (valid.len() - 1) as f64;
    for i in 0..target_len {
        let pos = if valid.len() == 1 {
            0.0
        } else {
            i as f64 * span / (target_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(valid.len() - 1);
        let hi = (lo + 1).min(valid.len() - 1);
        let frac = pos - lo as f64;
        for c in 0..CHANNELS {
            for j in 0..v {
                let a = seq.at(c, valid[lo], j);
                let value = if frac == 0.0 {
                    a
                } else {
                    a + frac * (seq.at(c, valid[hi], j) - a)
                };
                out.set(c, i, j, value);
            }
        }
    }
    Ok(out)
}

/// Frame-to-frame displacement; the last frame is zero so the shape is kept.
pub fn motion_view(seq: &SkeletonSequence) -> Result<SkeletonSequence, DataError> {
    let t_len = seq.frames();
    if t_len < 2 {
        return Err(DataError::InvalidSequence(format!(
            "motion view needs at least 2 frames, got {t_len}"
        )));
    }
    Ok(seq.map_indexed(|c, t, v, _| {
        if t + 1 < t_len {
            seq.at(c, t + 1, v) - seq.at(c, t, v)
        } else {
            0.0
        }
    }))
}

/// Joint position minus its parent's position; the root bone is zero.
pub fn bone_view(seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<SkeletonSequence, DataError> {
    if graph.joint_count() != seq.joints() {
        return Err(DataError::JointMismatch {
            graph: graph.joint_count(),
            sequence: seq.joints(),
        });
    }
    Ok(seq.map_indexed(|c, t, v, value| match graph.parent(v) {
        Some(p) => value - seq.at(c, t, p),
        None => 0.0,
    }))
}

pub fn make_view(
    seq: &SkeletonSequence,
    graph: &SkeletonGraph,
    kind: ViewKind,
) -> Result<SkeletonSequence, DataError> {
    match kind {
        ViewKind::Joint => Ok(seq.clone()),
        ViewKind::Motion => motion_view(seq),
        ViewKind::Bone => bone_view(seq, graph),
    }
}
