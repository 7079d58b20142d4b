use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AblationPlan;
use crate::ar::ArConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, DEFAULT_ROPE_BASE};
use crate::optim::AdamConfig;
use crate::sampler::SamplingConfig;
use crate::tokenizer::{TokConfig, TrainOptions};

pub const CONFIG_VERSION: u32 = 1;

/// Generator settings that do not follow from the tokenizer layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSettings {
    pub blocks: Vec<BlockConfig>,
    #[serde(default = "default_drop")]
    pub drop_prob: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_drop() -> f64 {
    0.1
}
fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Held-out images per class for reconstruction and attention statistics.
    pub images_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Default artifact directory when `--out` is not given.
    pub run_dir: PathBuf,
}

/// Everything a pipeline run needs, loaded from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: SyntheticSpec,
    pub tokenizer: TokConfig,
    pub stage1: TrainOptions,
    pub stage2: TrainOptions,
    pub generator: GeneratorSettings,
    pub generator_train: TrainOptions,
    pub sampling: SamplingConfig,
    pub eval: EvalSettings,
    pub ablation: AblationPlan,
    pub paths: Paths,
}

pub const PRESETS: [&str; 4] = ["desk", "imagenet-b", "imagenet-l", "imagenet-xl"];

impl RunConfig {
    pub fn desk() -> Self {
        let plan = AblationPlan::desk();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: SyntheticSpec::desk(),
            tokenizer: TokConfig::desk(),
            stage1: plan.tokenizer.clone(),
            stage2: plan.stage2.clone(),
            generator: GeneratorSettings { blocks: ArConfig::desk_blocks(), drop_prob: default_drop(), rope_base: default_rope_base() },
            generator_train: plan.generator.clone(),
            sampling: SamplingConfig::unguided(),
            eval: EvalSettings { images_per_class: plan.eval_per_class },
            ablation: plan,
            paths: Paths { run_dir: "runs/desk".into() },
        }
    }

    /// Full-size layouts: 256x256 images, 16x16 patches, 4096 codes of dimension 32,
    /// a width-768 encoder and width-1024 decoders, and generators B, L or XL.
    pub fn imagenet(size: &str) -> Result<Self> {
        let (depth, width, power, scale) = match size {
            "b" | "B" => (24, 768, 1.3, 11.0),
            "l" | "L" => (24, 1024, 0.6, 5.0),
            "xl" | "XL" => (32, 1280, 1.4, 8.0),
            _ => return Err(Error::Config(format!("unknown model size {size:?}"))),
        };
        let dec = BlockConfig::new(1024, 16);
        let tokenizer = TokConfig {
            image_h: 256,
            image_w: 256,
            patch: 16,
            codebook_size: 4096,
            code_dim: 32,
            encoder: vec![BlockConfig::new(768, 12); 12],
            decoder: vec![dec.clone(); 24],
            stage2_decoder: vec![dec; 24],
            buffer_count: 64,
            lambda_adv: 0.1,
            ..TokConfig::desk()
        };
        let opt = AdamConfig::new(1e-4);
        let steps = |epochs: usize| epochs * 1_281_167 / 256;
        let mut cfg = Self::desk();
        cfg.data = SyntheticSpec { classes: 1000, images_per_class: 1300, image_h: 256, image_w: 256, ..SyntheticSpec::desk() };
        cfg.tokenizer = tokenizer;
        cfg.stage1 = TrainOptions { steps: steps(120), batch: 256, optimizer: opt.clone() };
        cfg.stage2 = TrainOptions { steps: steps(60), batch: 256, optimizer: opt.clone() };
        cfg.generator.blocks = vec![BlockConfig::new(width, 16).with_qk_norm(true); depth];
        cfg.generator_train = TrainOptions { steps: steps(400), batch: 256, optimizer: opt };
        cfg.sampling = SamplingConfig::guided(scale, power);
        cfg.eval.images_per_class = 50;
        cfg.ablation.tokenizer = cfg.stage1.clone();
        cfg.ablation.stage2 = cfg.stage2.clone();
        cfg.ablation.generator = cfg.generator_train.clone();
        cfg.ablation.seeds = vec![0];
        cfg.ablation.eval_per_class = 50;
        cfg.paths.run_dir = format!("runs/imagenet-{}", size.to_ascii_lowercase()).into();
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            _ => match name.strip_prefix("imagenet-") {
                Some(size) => Self::imagenet(size),
                None => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
            },
        }
    }

    /// Generator layout over this config's tokenizer.
    pub fn ar_config(&self) -> ArConfig {
        ArConfig {
            drop_prob: self.generator.drop_prob,
            rope_base: self.generator.rope_base,
            ..ArConfig::for_tokenizer(&self.tokenizer, self.data.classes, self.generator.blocks.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.data.validate()?;
        self.tokenizer.validate()?;
        if (self.data.image_h, self.data.image_w) != (self.tokenizer.image_h, self.tokenizer.image_w) {
            return Err(Error::Config(format!(
                "data images are {}x{} but the tokenizer expects {}x{}",
                self.data.image_h, self.data.image_w, self.tokenizer.image_h, self.tokenizer.image_w
            )));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.generator_train.validate()?;
        self.ar_config().validate()?;
        self.sampling.validate()?;
        self.ablation.validate()?;
        if self.eval.images_per_class == 0 {
            return Err(Error::Config("eval.images_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Thread cap from `ALITOK_THREADS`; 1 when unset.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("ALITOK_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("ALITOK_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(e) => Err(Error::Config(format!("ALITOK_THREADS: {e}"))),
    }
}
