use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crossclr_core::encoder::EncoderConfig;
use crossclr_core::evalkit::ProbeConfig;
use crossclr_core::skeldata::SynthConfig;
use crossclr_core::trainkit::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    /// Independent single-view contrastive runs.
    Skeletonclr,
    /// Single-view stage, then the cross-view objective.
    #[default]
    Crossclr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub finetune: ProbeConfig,
    pub knn_k: usize,
    pub label_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut finetune = ProbeConfig::with_epochs(10);
        finetune.lr.base = 0.01;
        Self {
            probe: ProbeConfig::default(),
            finetune,
            knn_k: 5,
            label_fraction: 0.1,
        }
    }
}

/// Everything a run needs. Unknown keys are rejected; missing ones default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: PretrainMode,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Pushes the top-level seed into every component that draws randomness.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.probe.seed = seed;
        self.eval.finetune.seed = seed;
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
