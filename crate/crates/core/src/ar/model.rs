use atok_autodiff::{Float, Graph, Tensor, Var};

use super::config::ArConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionMaskKind, LayerKv, Linear, RmsNorm, RopeConfig, Stack};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::rng::{seeded, stream};

const INIT_STD: f64 = 0.02;

/// A class label and the tokens of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub class_id: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    cls_emb: ParamId,
    stack: Stack,
    norm: RmsNorm,
    head: Linear,
}

/// Class-conditioned decoder-only transformer over tokenizer indices.
#[derive(Clone, Debug)]
pub struct ArModel<T: Float> {
    pub cfg: ArConfig,
    pub params: ParamStore<T>,
    rope: RopeConfig,
    layout: Layout,
}

impl<T: Float> ArModel<T> {
    pub fn new(cfg: ArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded(seed, stream::INIT);
        let mut pb = ParamBuilder::new(&mut params, &mut rng, INIT_STD);
        let w = cfg.width();
        let layout = Layout {
            tok_emb: pb.normal("tok_emb", &[cfg.vocab, w]),
            cls_emb: pb.normal("cls_emb", &[cfg.classes + 1, w]),
            stack: Stack::new(&mut pb, "blocks", &cfg.blocks),
            norm: RmsNorm::new(&mut pb, "norm", w, cfg.blocks[0].eps),
            head: Linear::new(&mut pb, "head", w, cfg.vocab, false),
        };
        let rope = cfg.rope()?;
        Ok(Self { cfg, params, rope, layout })
    }

    pub fn from_parts(cfg: ArConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::ShapeMismatch { name: "generator".into(), found: vec![tensors.len()], expected: vec![model.params.len()] });
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(tensors) {
            let slot = model.params.get(id);
            if model.params.name(id) != name || slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch { name, found: t.shape().to_vec(), expected: slot.shape().to_vec() });
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn class_embedding_id(&self) -> ParamId {
        self.layout.cls_emb
    }

    /// Fresh per-layer caches for `batch` rows.
    pub fn new_caches(&self, batch: usize) -> Vec<LayerKv<T>> {
        self.cfg.blocks.iter().map(|b| LayerKv::new(batch, b.heads, b.head_dim())).collect()
    }

    fn check_ids(&self, classes: &[usize], tokens: &[usize]) -> Result<()> {
        if let Some(&c) = classes.iter().find(|&&c| c > self.cfg.classes) {
            return Err(Error::InvalidArgument(format!("class id {c} out of range (null class is {})", self.cfg.classes)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!("token id {t} out of range for vocab {}", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Logits `[b, n, vocab]` for input slots `start..start + n`.
    ///
    /// Slot 0 holds the class token and slot `s > 0` token `s - 1`. `tokens` holds, per row,
    /// the tokens of the requested slots other than the class slot, so `n = len + 1` when
    /// `start == 0` and `n = len` otherwise. With `caches`, earlier slots come from the cache.
    pub fn forward_slots(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        classes: &[usize],
        tokens: &[usize],
        start: usize,
        caches: Option<&mut [LayerKv<T>]>,
    ) -> Result<Var> {
        let b = classes.len();
        if b == 0 || tokens.len() % b != 0 {
            return Err(Error::InvalidArgument(format!("{} tokens do not split over {b} rows", tokens.len())));
        }
        self.check_ids(classes, tokens)?;
        let per_row = tokens.len() / b;
        let n = per_row + usize::from(start == 0);
        if n == 0 || start + n > self.cfg.seq_len() {
            return Err(Error::InvalidArgument(format!("slots {start}..{} exceed sequence length {}", start + n, self.cfg.seq_len())));
        }
        if let Some(c) = caches.as_deref() {
            if c.iter().any(|kv| kv.len() != start) {
                return Err(Error::CacheDesync { cached: c[0].len(), expected: start });
            }
        }
        let w = self.cfg.width();
        let l = &self.layout;
        let x = if start == 0 {
            let cls = g.gather(p[l.cls_emb], classes)?;
            let cls = g.reshape(cls, &[b, 1, w])?;
            if per_row == 0 {
                cls
            } else {
                let t = g.gather(p[l.tok_emb], tokens)?;
                let t = g.reshape(t, &[b, per_row, w])?;
                g.concat(&[cls, t], 1)?
            }
        } else {
            let t = g.gather(p[l.tok_emb], tokens)?;
            g.reshape(t, &[b, per_row, w])?
        };
        let table = self.rope.slice(start, n).table::<T>();
        let h = l.stack.forward(g, p, x, AttentionMaskKind::Causal, Some(&table), caches)?.out;
        let h = l.norm.forward(g, p, h)?;
        l.head.forward(g, p, h)
    }

    /// Teacher-forced logits `[b, seq_len, vocab]`: row `i` predicts token `i`.
    pub fn forward_train(&self, g: &mut Graph<T>, p: &Bound, batch: &[TokenSequence]) -> Result<Var> {
        let s = self.cfg.seq_len();
        let mut classes = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len() * (s - 1));
        for seq in batch {
            if seq.tokens.len() != s {
                return Err(Error::InvalidArgument(format!("sequence has {} tokens, expected {s}", seq.tokens.len())));
            }
            self.check_ids(&[], &seq.tokens)?;
            classes.push(seq.class_id);
            inputs.extend_from_slice(&seq.tokens[..s - 1]);
        }
        self.forward_slots(g, p, &classes, &inputs, 0, None)
    }

    /// `[seq_len, vocab]` logits for one sequence.
    pub fn ar_forward(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let l = self.forward_train(&mut g, &p, std::slice::from_ref(seq))?;
        let s = self.cfg.seq_len();
        Ok(g.value(l).clone().reshaped(&[s, self.cfg.vocab])?)
    }

    /// `sum_i log softmax(logits_i)[token_i]`.
    pub fn log_prob(&self, seq: &TokenSequence) -> Result<f64> {
        let logits = self.ar_forward(seq)?;
        let v = self.cfg.vocab;
        Ok(logits
            .data()
            .chunks(v)
            .zip(&seq.tokens)
            .map(|(row, &t)| {
                let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
                row[t].as_f64() - lse
            })
            .sum())
    }
}

/// Fraction of rows of `logits: [n, vocab]` whose argmax (lowest index on ties) equals the target.
pub fn accuracy<T: Float>(logits: &[T], vocab: usize, targets: &[usize]) -> f64 {
    let hits = logits.chunks(vocab).zip(targets).filter(|(row, &t)| argmax(row) == t).count();
    hits as f64 / targets.len().max(1) as f64
}

pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
