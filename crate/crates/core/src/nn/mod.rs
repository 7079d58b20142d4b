//! Transformer building blocks shared by the tokenizer and the generator.

mod attention;
mod block;
mod layers;
mod rope;

pub use attention::{Attention, AttentionMaskKind, AttentionOutput, LayerKv};
pub use block::{Block, BlockOutput, Stack, StackOutput};
pub use layers::{rmsnorm, BlockConfig, Linear, Mlp, RmsNorm};
pub use rope::{apply_rope, RopeConfig, RopePos, RopeTable, DEFAULT_ROPE_BASE};
