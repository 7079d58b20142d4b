use atok_autodiff::{AttnMask, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{BlockConfig, Linear};
use super::rope::{apply_rope, RopeTable};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMaskKind {
    Bidirectional,
    Causal,
}

/// Keys and values of one attention layer for every position processed so far.
///
/// Stored per `(batch, head)` row so appending a position never moves earlier entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    batch: usize,
    heads: usize,
    head_dim: usize,
    len: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> LayerKv<T> {
    pub fn new(batch: usize, heads: usize, head_dim: usize) -> Self {
        Self { batch, heads, head_dim, len: 0, k: vec![Vec::new(); batch * heads], v: vec![Vec::new(); batch * heads] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, batch: usize, head: usize) -> &[T] {
        &self.k[batch * self.heads + head]
    }

    pub fn values(&self, batch: usize, head: usize) -> &[T] {
        &self.v[batch * self.heads + head]
    }

    /// Append `[batch, heads, new, head_dim]` keys and values.
    fn append(&mut self, k: &[T], v: &[T], new: usize) {
        let run = new * self.head_dim;
        for (i, (kc, vc)) in k.chunks(run).zip(v.chunks(run)).enumerate() {
            self.k[i].extend_from_slice(kc);
            self.v[i].extend_from_slice(vc);
        }
        self.len += new;
    }

    fn assemble(&self, rows: &[Vec<T>]) -> Result<Tensor<T>> {
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::new(vec![self.batch, self.heads, self.len, self.head_dim], data)?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub q_gain: Option<ParamId>,
    pub k_gain: Option<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
    pub eps: f64,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[batch, heads, queries, keys]`.
    pub weights: Var,
}

impl Attention {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Self {
        let w = cfg.width;
        pb.scoped(name, |pb| Self {
            wq: Linear::new(pb, "wq", w, w, false),
            wk: Linear::new(pb, "wk", w, w, false),
            wv: Linear::new(pb, "wv", w, w, false),
            wo: Linear::new(pb, "wo", w, w, false),
            q_gain: cfg.qk_norm.then(|| pb.ones("q_norm.gain", &[cfg.head_dim()])),
            k_gain: cfg.qk_norm.then(|| pb.ones("k_norm.gain", &[cfg.head_dim()])),
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            eps: cfg.eps,
        })
    }

    /// `[b, s, width] -> [b, heads, s, head_dim]`, with optional per-head RMS norm and rotation.
    fn heads_of<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        proj: &Linear,
        gain: Option<ParamId>,
        rope: Option<&RopeTable<T>>,
    ) -> Result<Var> {
        let (b, s) = (g.shape(x)[0], g.shape(x)[1]);
        let y = proj.forward(g, p, x)?;
        let y = g.reshape(y, &[b, s, self.heads, self.head_dim])?;
        let y = match gain {
            Some(gn) => g.rmsnorm(y, p[gn], self.eps)?,
            None => y,
        };
        let y = g.permute(y, &[0, 2, 1, 3])?;
        match rope {
            Some(t) => apply_rope(g, y, t),
            None => Ok(y),
        }
    }

    /// Scaled dot-product attention over `x: [batch, seq, width]`.
    ///
    /// With a cache, `x` holds only the new positions; their keys and values are
    /// appended and the queries attend over everything cached. `rope` must cover
    /// exactly the positions in `x`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: AttentionMaskKind,
        rope: Option<&RopeTable<T>>,
        cache: Option<&mut LayerKv<T>>,
    ) -> Result<AttentionOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!("attention expects [batch, seq, width], got {shape:?}")));
        }
        let (b, s, w) = (shape[0], shape[1], shape[2]);
        let q = self.heads_of(g, p, x, &self.wq, self.q_gain, rope)?;
        let k = self.heads_of(g, p, x, &self.wk, self.k_gain, rope)?;
        let v = self.heads_of(g, p, x, &self.wv, None, None)?;

        let (k, v, past) = match cache {
            Some(kv) => {
                let past = kv.len();
                kv.append(g.value(k).data(), g.value(v).data(), s);
                let kt = kv.assemble(&kv.k)?;
                let vt = kv.assemble(&kv.v)?;
                (g.constant(kt)?, g.constant(vt)?, past)
            }
            None => (k, v, 0),
        };

        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt())?;
        let mask = match mask {
            AttentionMaskKind::Bidirectional => AttnMask::None,
            // position i always sees itself, so no row is ever fully masked
            AttentionMaskKind::Causal => AttnMask::Causal { offset: past },
        };
        let weights = g.masked_softmax(scores, mask)?;
        let o = g.matmul(weights, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, s, w])?;
        let out = self.wo.forward(g, p, o)?;
        Ok(AttentionOutput { out, weights })
    }
}
