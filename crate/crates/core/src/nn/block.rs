use atok_autodiff::{Float, Graph, Var};

use super::attention::{Attention, AttentionMaskKind, LayerKv};
use super::layers::{BlockConfig, Mlp, RmsNorm};
use super::rope::RopeTable;
use crate::error::Result;
use crate::params::{Bound, ParamBuilder};

/// Pre-norm transformer block: `x + attn(norm(x))`, then `h + mlp(norm(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: RmsNorm,
    pub attn: Attention,
    pub norm2: RmsNorm,
    pub mlp: Mlp,
}

pub struct BlockOutput {
    pub out: Var,
    pub attn_weights: Var,
}

impl Block {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Self {
        pb.scoped(name, |pb| Self {
            norm1: RmsNorm::new(pb, "norm1", cfg.width, cfg.eps),
            attn: Attention::new(pb, "attn", cfg),
            norm2: RmsNorm::new(pb, "norm2", cfg.width, cfg.eps),
            mlp: Mlp::new(pb, "mlp", cfg.width, cfg.hidden()),
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: AttentionMaskKind,
        rope: Option<&RopeTable<T>>,
        cache: Option<&mut LayerKv<T>>,
    ) -> Result<BlockOutput> {
        let n = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n, mask, rope, cache)?;
        let h = g.add(x, a.out)?;
        let n = self.norm2.forward(g, p, h)?;
        let m = self.mlp.forward(g, p, n)?;
        let out = g.add(h, m)?;
        Ok(BlockOutput { out, attn_weights: a.weights })
    }
}

/// A stack of blocks sharing one mask and one rotary map.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

pub struct StackOutput {
    pub out: Var,
    pub attn_weights: Vec<Var>,
}

impl Stack {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, cfgs: &[BlockConfig]) -> Self {
        pb.scoped(name, |pb| Self { blocks: cfgs.iter().enumerate().map(|(i, c)| Block::new(pb, &i.to_string(), c)).collect() })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: AttentionMaskKind,
        rope: Option<&RopeTable<T>>,
        mut caches: Option<&mut [LayerKv<T>]>,
    ) -> Result<StackOutput> {
        let mut h = x;
        let mut attn_weights = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            let o = block.forward(g, p, h, mask, rope, cache)?;
            h = o.out;
            attn_weights.push(o.attn_weights);
        }
        Ok(StackOutput { out: h, attn_weights })
    }
}
