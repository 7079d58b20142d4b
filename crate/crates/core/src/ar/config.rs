use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, RopeConfig, RopePos, DEFAULT_ROPE_BASE};
use crate::tokenizer::TokConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub vocab: usize,
    pub classes: usize,
    pub prefix_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub blocks: Vec<BlockConfig>,
    /// Probability of replacing a training class label by the null class.
    #[serde(default = "default_drop")]
    pub drop_prob: f64,
    #[serde(default = "default_base")]
    pub rope_base: f64,
}

fn default_drop() -> f64 {
    0.1
}
fn default_base() -> f64 {
    DEFAULT_ROPE_BASE
}

impl ArConfig {
    /// Model over the token layout of `tok`.
    pub fn for_tokenizer(tok: &TokConfig, classes: usize, blocks: Vec<BlockConfig>) -> Self {
        Self {
            vocab: tok.codebook_size,
            classes,
            prefix_len: tok.prefix_len(),
            grid_h: tok.grid_h(),
            grid_w: tok.grid_w(),
            blocks,
            drop_prob: default_drop(),
            rope_base: default_base(),
        }
    }

    pub fn desk_blocks() -> Vec<BlockConfig> {
        vec![BlockConfig::new(32, 2).with_qk_norm(true); 2]
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.grid_h * self.grid_w
    }

    /// Class id used for unconditional (dropped) inputs.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width
    }

    /// Rotary coordinate of token `t`: prefix token `k` at 1D position `k`,
    /// grid token `(r, c)` at 2D position `(r + K, c + K)`.
    pub fn token_position(&self, t: usize) -> RopePos {
        let k = self.prefix_len;
        if t < k {
            RopePos::OneD(t)
        } else {
            let j = t - k;
            RopePos::TwoD { row: j / self.grid_w + k, col: j % self.grid_w + k }
        }
    }

    /// Rotary map of the `seq_len` input slots: the class token, then tokens `0..seq_len-1`.
    pub fn rope(&self) -> Result<RopeConfig> {
        let positions = std::iter::once(RopePos::None).chain((0..self.seq_len() - 1).map(|t| self.token_position(t))).collect();
        let cfg = RopeConfig { head_dim: self.blocks[0].head_dim(), base: self.rope_base, positions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return fail(format!("vocab {} must lie in [2, 65536]", self.vocab));
        }
        if self.classes == 0 || self.classes >= u16::MAX as usize {
            return fail(format!("classes {} out of range", self.classes));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("token grid must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return fail(format!("drop_prob {} outside [0, 1]", self.drop_prob));
        }
        if self.blocks.is_empty() {
            return fail("generator needs at least one block".into());
        }
        for b in &self.blocks {
            b.validate()?;
        }
        if self.blocks.iter().any(|b| b.width != self.blocks[0].width || b.heads != self.blocks[0].heads) {
            return fail("generator blocks must share width and head count".into());
        }
        self.rope()?;
        Ok(())
    }
}
