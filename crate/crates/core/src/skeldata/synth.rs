//! Synthetic skeleton action dataset.
//!
//! Each class is a (pose, motion) pair, `class = pose_id * motions + motion_id`.
//! A sample is the pose prototype plus an additive per-joint trajectory, placed
//! in the scene with a random yaw and translation, plus Gaussian noise. Since
//! the trajectory is additive, two classes sharing a motion look the same in
//! the motion view and differ only through the static pose.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, SkeletonGraph, SkeletonSequence, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub poses: usize,
    pub motions: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub joints: usize,
    pub frames: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Peak per-joint trajectory displacement.
    pub motion_amplitude: f64,
    /// Standard deviation of the per-sample placement translation.
    pub translation_std: f64,
    /// Yaw is drawn uniformly from `[-max_yaw, max_yaw]` (radians).
    pub max_yaw: f64,
    /// Per-sample multiplicative jitter of the trajectory amplitude.
    pub amplitude_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            poses: 4,
            motions: 3,
            per_class_train: 100,
            per_class_test: 50,
            joints: 8,
            frames: 50,
            noise_std: 0.02,
            seed: 0,
            motion_amplitude: 0.5,
            translation_std: 0.3,
            max_yaw: 0.6,
            amplitude_jitter: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn class_count(&self) -> usize {
        self.poses * self.motions
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.poses == 0 || self.motions == 0 || self.poses * self.motions < 2 {
            return bad(format!(
                "need poses*motions >= 2 with both positive, got {}x{}",
                self.poses, self.motions
            ));
        }
        if self.per_class_train < 2 {
            return bad(format!("per-class train count must be >= 2, got {}", self.per_class_train));
        }
        if self.joints < 2 || self.frames < 2 {
            return bad(format!(
                "need at least 2 joints and 2 frames, got V={} T={}",
                self.joints, self.frames
            ));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("motion_amplitude", self.motion_amplitude),
            ("translation_std", self.translation_std),
            ("max_yaw", self.max_yaw),
            ("amplitude_jitter", self.amplitude_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-sample nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub yaw: f64,
    pub translation: [f64; 3],
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MotionFamily {
    Oscillation,
    Circular,
    Drift,
}

#[derive(Clone, Debug)]
struct MotionPattern {
    family: MotionFamily,
    /// Angular frequency in radians per frame.
    omega: f64,
    a: Vec<[f64; 3]>,
    b: Vec<[f64; 3]>,
}

impl MotionPattern {
    fn displacement(&self, joint: usize, t: usize, frames: usize, phase: f64) -> [f64; 3] {
        let angle = self.omega * t as f64 + phase;
        let (a, b) = (self.a[joint], self.b[joint]);
        match self.family {
            MotionFamily::Oscillation => a.map(|x| x * angle.sin()),
            MotionFamily::Circular => {
                let (s, c) = angle.sin_cos();
                [0, 1, 2].map(|i| a[i] * c + b[i] * s)
            }
            MotionFamily::Drift => {
                let ramp = 2.0 * t as f64 / (frames - 1) as f64 - 1.0;
                [0, 1, 2].map(|i| a[i] * ramp + 0.3 * b[i] * angle.sin())
            }
        }
    }
}

pub struct SynthGenerator {
    cfg: SynthConfig,
    graph: SkeletonGraph,
    poses: Vec<Vec<[f64; 3]>>,
    motions: Vec<MotionPattern>,
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let graph = SkeletonGraph::binary_tree(cfg.joints)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);

        let mut poses = Vec::with_capacity(cfg.poses);
        for _ in 0..cfg.poses {
            let mut joints = vec![[0.0; 3]; cfg.joints];
            // binary_tree parents precede children, so one forward pass suffices
            for j in 1..cfg.joints {
                let p = graph.parent(j).expect("non-root joint");
                let dir = random_direction(&mut rng);
                let len = rng.random_range(0.3..0.6);
                joints[j] = [0, 1, 2].map(|i| joints[p][i] + len * dir[i]);
            }
            poses.push(joints);
        }

        let families = [MotionFamily::Oscillation, MotionFamily::Circular, MotionFamily::Drift];
        let mut motions = Vec::with_capacity(cfg.motions);
        for m in 0..cfg.motions {
            let family = families[m % 3];
            let cycles = 1.0 + (m / 3) as f64 + if family == MotionFamily::Oscillation { 1.0 } else { 0.0 };
            let omega = 2.0 * PI * cycles / (cfg.frames - 1) as f64;
            let mut a = Vec::with_capacity(cfg.joints);
            let mut b = Vec::with_capacity(cfg.joints);
            for _ in 0..cfg.joints {
                let scale = cfg.motion_amplitude * rng.random_range(0.3..1.0);
                let da = random_direction(&mut rng);
                let db = random_direction(&mut rng);
                a.push(da.map(|x| x * scale));
                b.push(db.map(|x| x * scale));
            }
            motions.push(MotionPattern { family, omega, a, b });
        }
        Ok(Self {
            cfg,
            graph,
            poses,
            motions,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn draw_placement(&self, rng: &mut impl Rng) -> Placement {
        let normal = Normal::new(0.0, self.cfg.translation_std.max(f64::MIN_POSITIVE))
            .expect("finite std");
        let yaw = if self.cfg.max_yaw > 0.0 {
            rng.random_range(-self.cfg.max_yaw..=self.cfg.max_yaw)
        } else {
            0.0
        };
        let translation = if self.cfg.translation_std > 0.0 {
            [0; 3].map(|_| normal.sample(rng))
        } else {
            [0.0; 3]
        };
        let phase = rng.random_range(0.0..2.0 * PI);
        let amplitude = if self.cfg.amplitude_jitter > 0.0 {
            1.0 + rng.random_range(-self.cfg.amplitude_jitter..=self.cfg.amplitude_jitter)
        } else {
            1.0
        };
        Placement {
            yaw,
            translation,
            phase,
            amplitude,
        }
    }

    /// Renders pose `pose_id` animated by `motion_id` under `placement`.
    /// Coordinates are rounded to `f32` precision so the sequence survives the
    /// on-disk format unchanged.
    pub fn render(
        &self,
        pose_id: usize,
        motion_id: usize,
        placement: &Placement,
        noise_std: f64,
        rng: &mut impl Rng,
    ) -> SkeletonSequence {
        let (t_len, v_len) = (self.cfg.frames, self.cfg.joints);
        let pose = &self.poses[pose_id];
        let motion = &self.motions[motion_id];
        let (sy, cy) = placement.yaw.sin_cos();
        let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
        let mut seq = SkeletonSequence::zeros(t_len, v_len);
        seq.label = Some(pose_id * self.cfg.motions + motion_id);
        for t in 0..t_len {
            for v in 0..v_len {
                let d = motion.displacement(v, t, t_len, placement.phase);
                let local = [0, 1, 2].map(|i| pose[v][i] + placement.amplitude * d[i]);
                // yaw about the vertical (y) axis
                let rotated = [
                    cy * local[0] + sy * local[2],
                    local[1],
                    -sy * local[0] + cy * local[2],
                ];
                let mut p = [0, 1, 2].map(|i| rotated[i] + placement.translation[i]);
                if let Some(n) = &noise {
                    p.iter_mut().for_each(|x| *x += n.sample(rng));
                }
                seq.set_point(t, v, p.map(|x| x as f32 as f64));
            }
        }
        seq
    }

    fn split(&self, split: Split, per_class: usize) -> Result<LabeledDataset, DataError> {
        let classes = self.cfg.class_count();
        let mut sequences = Vec::with_capacity(classes * per_class);
        let split_stream = match split {
            Split::Train => 1u64,
            Split::Test => 2u64,
        } << 40;
        for class in 0..classes {
            let (pose_id, motion_id) = (class / self.cfg.motions, class % self.cfg.motions);
            for i in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(split_stream + (class * per_class + i) as u64);
                let placement = self.draw_placement(&mut rng);
                sequences.push(self.render(pose_id, motion_id, &placement, self.cfg.noise_std, &mut rng));
            }
        }
        LabeledDataset::new(sequences, self.graph.clone(), classes, split)
    }

    /// Generates disjoint train and test splits.
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset), DataError> {
        Ok((
            self.split(Split::Train, self.cfg.per_class_train)?,
            self.split(Split::Test, self.cfg.per_class_test)?,
        ))
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    SynthGenerator::new(cfg.clone())?.generate()
}
