//! Run configuration, loaded from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected. The resolved configuration is echoed as `config.toml` into
//! every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use oopk_core::adapter::{OrthReduction, PlacementSpec};
use oopk_core::engine::{EngineConfig, PseudoMode, ScaleFusion};
use oopk_core::masking::{Fill, MaskSpec};
use oopk_core::nn::AdamConfig;
use oopk_core::segnet::PretrainConfig;
use oopk_core::synth::{default_domains, DomainSpec};
use oopk_core::toy::ToyConfig;
use oopk_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Named learning-rate presets for the adaptation optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// lr = 1e-4, batch 1.
    #[default]
    MainText,
    /// lr = 6e-4. The accompanying batch size of 8 is not supported and is
    /// ignored; adaptation always runs on single samples.
    SuppTta,
}

impl Preset {
    pub fn lr(self) -> f64 {
        match self {
            Preset::MainText => 1e-4,
            Preset::SuppTta => 6e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Clean scenes used for supervised source training.
    pub source_samples: usize,
    /// Clean scenes held out to score the source model.
    pub heldout_samples: usize,
    pub samples_per_domain: usize,
    pub rounds: usize,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 48,
            width: 64,
            classes: 5,
            source_samples: 48,
            heldout_samples: 16,
            samples_per_domain: 40,
            rounds: 3,
            domains: default_domains(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of the segmentation network.
    pub width: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 8,
            pretrain_epochs: 30,
            pretrain_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// When false, `adapt` degenerates to frozen evaluation.
    pub adapters: bool,
    pub rank: usize,
    pub sigma: f64,
    pub placement: Vec<String>,
    pub grid: usize,
    pub ratio: f64,
    pub fill: Fill,
    pub lambda: f64,
    pub orth_reduction: OrthReduction,
    /// Overrides the preset learning rate when set.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema: f64,
    pub scales: Vec<f64>,
    pub pseudo: PseudoMode,
    pub fusion: ScaleFusion,
    pub eps_log: f64,
    pub batch: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            adapters: true,
            rank: 32,
            sigma: 0.02,
            placement: vec!["*".into()],
            grid: 32,
            ratio: 0.75,
            fill: Fill::Zero,
            lambda: 1.0,
            orth_reduction: OrthReduction::Mean,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema: 0.999,
            scales: vec![0.5, 1.0, 1.5, 2.0],
            pseudo: PseudoMode::Soft,
            fusion: ScaleFusion::Probs,
            eps_log: 1e-12,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub widths: [usize; 3],
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub size: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    /// Number of triptych images written.
    pub triptychs: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        let t = ToyConfig::default();
        ToySection {
            widths: t.widths,
            kernel: t.kernel,
            epochs: t.epochs,
            lr: t.lr,
            size: 32,
            train_images: 8,
            heldout_images: 8,
            triptychs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub grids: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ranks: vec![4, 8, 16, 32, 64],
            grids: vec![8, 16, 32, 64],
            lambdas: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory written by `gen-data`.
    pub data: PathBuf,
    /// Checkpoint read by `adapt`, `eval`, `merge` and `sweep`.
    pub checkpoint: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "runs/data".into(),
            checkpoint: "runs/source/source.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
    pub toy: ToySection,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("`{name}` must be ≥ 1")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        let mut resolved = self.clone();
        resolved.adapt.lr = Some(self.lr());
        fs::write(&path, resolved.to_toml()).map_err(|e| Error::io(&path, e))
    }

    /// Effective adaptation learning rate.
    pub fn lr(&self) -> f64 {
        self.adapt.lr.unwrap_or(self.preset.lr())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height % 2 != 0 || d.width % 2 != 0 || d.height < 16 || d.width < 16 {
            return Err(Error::Config(format!(
                "image size {}×{} must be even and at least 16×16",
                d.height, d.width
            )));
        }
        positive("data.source_samples", d.source_samples)?;
        positive("data.heldout_samples", d.heldout_samples)?;
        positive("data.samples_per_domain", d.samples_per_domain)?;
        positive("data.rounds", d.rounds)?;
        if d.domains.is_empty() {
            return Err(Error::Config("`data.domains` is empty".into()));
        }
        positive("model.width", self.model.width)?;
        if self.adapt.batch != 1 {
            return Err(Error::Config(format!(
                "adapt.batch = {}: only single-sample online adaptation is supported",
                self.adapt.batch
            )));
        }
        positive("toy.train_images", self.toy.train_images)?;
        positive("toy.heldout_images", self.toy.heldout_images)?;
        if self.toy.size % 8 != 0 || self.toy.size == 0 {
            return Err(Error::Config(format!("toy.size {} must be a positive multiple of 8", self.toy.size)));
        }
        self.engine()?.validate()
    }

    pub fn engine(&self) -> Result<EngineConfig> {
        let a = &self.adapt;
        Ok(EngineConfig {
            adam: AdamConfig {
                lr: self.lr(),
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.adam_eps,
            },
            ema: a.ema,
            lambda: a.lambda,
            mask: MaskSpec::new(a.grid, a.ratio, a.fill)?,
            scales: a.scales.clone(),
            pseudo: a.pseudo,
            fusion: a.fusion,
            orth_reduction: a.orth_reduction,
            eps_log: a.eps_log,
            rank: a.rank,
            sigma: a.sigma,
            placement: PlacementSpec::new(a.placement.iter().cloned()),
            seed: self.seed,
        })
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.model.pretrain_epochs,
            lr: self.model.pretrain_lr,
            seed: self.seed,
        }
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            widths: self.toy.widths,
            kernel: self.toy.kernel,
            epochs: self.toy.epochs,
            lr: self.toy.lr,
            seed: self.seed,
        }
    }
}
