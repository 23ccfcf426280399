//! Single TOML configuration tree for every stage of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::CorpusConfig;
use crate::diffusion::{DiffusionConfig, SampleOptions, SamplerKind};
use crate::error::{Error, Result};
use crate::evaluation::CepstrumMode;
use crate::model::{LossWeights, VcConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UnitsConfig {
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    /// Frames drawn from the training set to fit the codebook.
    pub sample_frames: usize,
}

impl Default for UnitsConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iters: 100,
            restarts: 4,
            sample_frames: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VcTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
}

impl Default for VcTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 2e-3,
            clip_norm: 1.0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight averaging decay; the averaged weights are evaluated and saved.
    pub ema_decay: f64,
    /// Held-out loss is logged this often.
    pub eval_every: usize,
    /// Precomputed prompt embeddings keyed by prompt text; the built-in
    /// embedder is trained when unset.
    pub prompt_embeddings: Option<PathBuf>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            lr: 3e-3,
            ema_decay: 0.999,
            eval_every: 250,
            prompt_embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub eta: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
        }
    }
}

impl SamplingConfig {
    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            sampler: self.sampler,
            steps: self.steps,
            eta: self.eta,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cepstrum: CepstrumMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub units: UnitsConfig,
    pub model: VcConfig,
    pub loss: LossWeights,
    pub train_vc: VcTrainConfig,
    pub diffusion: DiffusionConfig,
    pub train_diffusion: DiffusionTrainConfig,
    pub sampling: SamplingConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/desk"),
            corpus: CorpusConfig::default(),
            units: UnitsConfig::default(),
            model: VcConfig::default(),
            loss: LossWeights::default(),
            train_vc: VcTrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            train_diffusion: DiffusionTrainConfig::default(),
            sampling: SamplingConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn positive_real(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be a positive number")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.diffusion.validate()?;
        if self.units.k < 2 {
            return Err(Error::Config("units.k must be at least 2".into()));
        }
        positive("units.max_iters", self.units.max_iters)?;
        positive("units.restarts", self.units.restarts)?;
        positive("units.sample_frames", self.units.sample_frames)?;
        positive("train_vc.steps", self.train_vc.steps)?;
        positive("train_vc.batch_size", self.train_vc.batch_size)?;
        positive("train_vc.checkpoint_every", self.train_vc.checkpoint_every)?;
        positive_real("train_vc.lr", self.train_vc.lr)?;
        positive_real("train_vc.clip_norm", self.train_vc.clip_norm)?;
        positive("train_diffusion.steps", self.train_diffusion.steps)?;
        positive("train_diffusion.batch_size", self.train_diffusion.batch_size)?;
        positive("train_diffusion.eval_every", self.train_diffusion.eval_every)?;
        positive_real("train_diffusion.lr", self.train_diffusion.lr)?;
        if !(0.0..1.0).contains(&self.train_diffusion.ema_decay) {
            return Err(Error::Config("train_diffusion.ema_decay must lie in [0, 1)".into()));
        }
        positive("sampling.steps", self.sampling.steps)?;
        if !(0.0..=1.0).contains(&self.sampling.eta) {
            return Err(Error::Config("sampling.eta must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Corpus settings with the run seed applied.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        crate::datagen::Manifest::path_in(&self.data_root)
    }
}
