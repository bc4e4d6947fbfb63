//! Run configuration: a TOML file with one section per pipeline stage.

use std::path::{Path, PathBuf};

use artic::features::{FeatureKind, PhonemeInventory};
use artic::models::ModelKind;
use artic::synth::SynthConfig;
use artic::training::{Architecture, Regime, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw corpus: written by `synth`, read by `prep`.
    pub corpus: PathBuf,
    /// Preprocessed corpus and feature cache.
    pub prepared: PathBuf,
    /// Checkpoints, logs, reports and figures.
    pub output: PathBuf,
    /// Checkpoint read by `finetune`, `eval`, `infer` and `plot`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            prepared: "prepared".into(),
            output: "runs".into(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Data {
    pub features: FeatureKind,
    /// Defaults to the estimator paired with `features`.
    pub model: Option<ModelKind>,
    pub regime: Regime,
    pub subject: Option<String>,
    pub cutoff_hz: f64,
}

impl Default for Data {
    fn default() -> Self {
        Self {
            features: FeatureKind::Tphn,
            model: None,
            regime: Regime::Generic,
            subject: None,
            cutoff_hz: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Eval {
    /// Upper bound on generated frames for the attention model.
    pub max_frames: usize,
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            max_frames: artic::features::MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Plot {
    pub channels: Vec<String>,
}

impl Default for Plot {
    fn default() -> Self {
        Self {
            channels: vec!["LL_y".into(), "TT_y".into()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; when set it overrides `synth.seed` and `training.seed`.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub data: Data,
    pub training: TrainingConfig,
    pub architecture: Architecture,
    pub synth: SynthConfig,
    pub eval: Eval,
    pub plot: Plot,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        cfg.validate().map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Applies the master seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn resolve_seed(self) -> Self {
        match self.seed {
            Some(s) => self.with_seed(s),
            None => self,
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        self.data.model.unwrap_or_else(|| ModelKind::for_features(self.data.features))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |key: &str, e: artic::Error| CliError::Usage(format!("{key}: {e}"));
        for (i, p) in self.synth.phonemes.iter().enumerate() {
            if !PhonemeInventory.contains(p) {
                return Err(CliError::Usage(format!("synth.phonemes[{i}]: unknown phoneme {p:?}")));
            }
        }
        self.synth.validate().map_err(|e| usage("synth", e))?;
        self.training.validate().map_err(|e| usage("training", e))?;
        self.architecture.attention.validate().map_err(|e| usage("architecture.attention", e))?;
        self.model_kind().check_pairing(self.data.features).map_err(|e| usage("data.model", e))?;
        if !(self.data.cutoff_hz > 0.0 && self.data.cutoff_hz.is_finite()) {
            return Err(CliError::Usage("data.cutoff_hz: must be positive".into()));
        }
        if self.eval.max_frames == 0 {
            return Err(CliError::Usage("eval.max_frames: must be at least 1".into()));
        }
        for (i, c) in self.plot.channels.iter().enumerate() {
            if artic::corpus::channel_index(c).is_none() {
                return Err(CliError::Usage(format!("plot.channels[{i}]: unknown channel {c:?}")));
            }
        }
        Ok(())
    }
}
