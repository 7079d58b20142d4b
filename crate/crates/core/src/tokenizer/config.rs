use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionMaskKind, BlockConfig};
use crate::vq::{DEFAULT_BETA, DEFAULT_THRESHOLD_SCALE, DEFAULT_USAGE_DECAY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    /// Prepend one prefix token per grid column (`K = W`); without it `K = 0`.
    #[serde(default = "yes")]
    pub prefix: bool,
    /// First-row auxiliary losses on the prefix outputs. Requires `prefix`.
    #[serde(default = "yes")]
    pub aux_loss: bool,
    /// Stage-1 decoder mask. `Bidirectional` gives the unaligned baseline.
    #[serde(default = "causal")]
    pub decoder_mask: AttentionMaskKind,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub encoder: Vec<BlockConfig>,
    pub decoder: Vec<BlockConfig>,
    pub stage2_decoder: Vec<BlockConfig>,
    pub buffer_count: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of an adversarial term; no adversarial loss is trained, so it has no effect.
    #[serde(default)]
    pub lambda_adv: f64,
    #[serde(default = "default_decay")]
    pub usage_decay: f64,
    /// Codes whose usage average drops below `dead_code_scale / codebook_size` are reinitialised.
    #[serde(default = "default_dead")]
    pub dead_code_scale: f64,
    #[serde(default)]
    pub feature_seed: u64,
}

fn yes() -> bool {
    true
}
fn causal() -> AttentionMaskKind {
    AttentionMaskKind::Causal
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_decay() -> f64 {
    DEFAULT_USAGE_DECAY
}
fn default_dead() -> f64 {
    DEFAULT_THRESHOLD_SCALE
}

impl TokConfig {
    /// 32x32 images, 4x4 patches, an 8x8 grid with 8 prefix tokens and a 64-entry codebook.
    pub fn desk() -> Self {
        let block = BlockConfig::new(32, 2);
        Self {
            image_h: 32,
            image_w: 32,
            patch: 4,
            prefix: true,
            aux_loss: true,
            decoder_mask: AttentionMaskKind::Causal,
            codebook_size: 64,
            code_dim: 8,
            encoder: vec![block.clone(); 2],
            decoder: vec![block.clone(); 2],
            stage2_decoder: vec![block; 2],
            buffer_count: 16,
            beta: DEFAULT_BETA,
            lambda_adv: 0.0,
            usage_decay: DEFAULT_USAGE_DECAY,
            dead_code_scale: DEFAULT_THRESHOLD_SCALE,
            feature_seed: 0,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn grid_len(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn prefix_len(&self) -> usize {
        if self.prefix {
            self.grid_w()
        } else {
            0
        }
    }

    /// Tokens per image: `K + H * W`.
    pub fn seq_len(&self) -> usize {
        self.prefix_len() + self.grid_len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn dead_code_threshold(&self) -> f64 {
        self.dead_code_scale / self.codebook_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return fail(format!("image {}x{} is not divisible by patch {}", self.image_h, self.image_w, self.patch));
        }
        if self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return fail("image sides must be multiples of 4 for the feature loss".into());
        }
        if self.aux_loss && !self.prefix {
            return fail("aux_loss requires prefix tokens".into());
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return fail("codebook needs at least 2 codes of positive dimension".into());
        }
        if !(self.beta >= 0.0) || !(self.usage_decay > 0.0 && self.usage_decay < 1.0) || !(self.dead_code_scale >= 0.0) {
            return fail("beta, usage_decay or dead_code_scale out of range".into());
        }
        for (name, stack) in [("encoder", &self.encoder), ("decoder", &self.decoder), ("stage2_decoder", &self.stage2_decoder)] {
            if stack.is_empty() {
                return fail(format!("{name} needs at least one block"));
            }
            for b in stack {
                b.validate()?;
            }
            if stack.iter().any(|b| b.width != stack[0].width) {
                return fail(format!("{name} blocks must share one width"));
            }
        }
        Ok(())
    }
}
