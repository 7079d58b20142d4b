use atok_autodiff::{Float, Graph, Tensor, Var};

use super::config::TokConfig;
use super::features::FeatureNet;
use super::patch::{patchify_var, unpatchify_var};
use crate::error::{Error, Result};
use crate::nn::{AttentionMaskKind, BlockConfig, Linear, RmsNorm, Stack};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::rng::{seeded, stream};
use crate::vq::{quant_loss, quantize};

const INIT_STD: f64 = 0.02;

/// Token indices and pre-quantization encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence<T> {
    pub indices: Vec<usize>,
    /// `[K + H*W, code_dim]`.
    pub continuous: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionOutput<T> {
    /// `[K, f, f, 3]`; empty (`K = 0`) for decoders without prefix outputs.
    pub prefix_patches: Option<Tensor<T>>,
    /// `[H*W, f, f, 3]`.
    pub grid_patches: Tensor<T>,
    /// `[image_h, image_w, 3]`.
    pub image: Tensor<T>,
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub perc: f64,
    pub quant: f64,
    pub aux_mse: f64,
    pub aux_perc: f64,
}

impl LossParts {
    /// `(mse + perc + quant) + (aux_mse + aux_perc)`, the adversarial term being absent.
    pub fn total(&self) -> f64 {
        (self.mse + self.perc + self.quant) + (self.aux_mse + self.aux_perc)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Linear,
    pos: ParamId,
    stack: Stack,
    norm: RmsNorm,
    out: Linear,
}

impl Decoder {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &TokConfig, blocks: &[BlockConfig], slots: usize) -> Self {
        let w = blocks[0].width;
        pb.scoped(name, |pb| Self {
            input: Linear::new(pb, "input", cfg.code_dim, w, true),
            pos: pb.normal("pos", &[slots, w]),
            stack: Stack::new(pb, "blocks", blocks),
            norm: RmsNorm::new(pb, "norm", w, blocks[0].eps),
            out: Linear::new(pb, "out", w, cfg.patch_dim(), true),
        })
    }
}

#[derive(Clone, Debug)]
struct Layout {
    patch_in: Linear,
    prefix: Option<ParamId>,
    latent: ParamId,
    enc_pos: ParamId,
    encoder: Stack,
    enc_norm: RmsNorm,
    to_code: Linear,
    codebook: ParamId,
    dec1: Decoder,
    buffer: Option<ParamId>,
    dec2: Decoder,
}

impl Layout {
    fn build<T: Float>(cfg: &TokConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = seeded(seed, stream::INIT);
        let mut pb = ParamBuilder::new(store, &mut rng, INIT_STD).with_fan_in();
        let we = cfg.encoder[0].width;
        let (k, hw, seq) = (cfg.prefix_len(), cfg.grid_len(), cfg.seq_len());
        let (patch_in, prefix, latent, enc_pos, encoder, enc_norm, to_code) = pb.scoped("enc", |pb| {
            (
                Linear::new(pb, "patch_in", cfg.patch_dim(), we, true),
                (k > 0).then(|| pb.normal("prefix", &[k, we])),
                pb.normal("latent", &[hw, we]),
                pb.normal("pos", &[seq + hw, we]),
                Stack::new(pb, "blocks", &cfg.encoder),
                RmsNorm::new(pb, "norm", we, cfg.encoder[0].eps),
                Linear::new(pb, "to_code", we, cfg.code_dim, true),
            )
        });
        let codebook = pb.normal("codebook", &[cfg.codebook_size, cfg.code_dim]);
        let dec1 = Decoder::new(&mut pb, "dec1", cfg, &cfg.decoder, seq);
        let w2 = cfg.stage2_decoder[0].width;
        let buffer = (cfg.buffer_count > 0).then(|| pb.normal("dec2.buffer", &[cfg.buffer_count, w2]));
        let dec2 = Decoder::new(&mut pb, "dec2", cfg, &cfg.stage2_decoder, cfg.buffer_count + seq);
        Self { patch_in, prefix, latent, enc_pos, encoder, enc_norm, to_code, codebook, dec1, buffer, dec2 }
    }
}

/// Graph handles produced by one encoder pass.
pub struct EncodeVars {
    /// `[b, K + H*W, code_dim]` continuous encoder outputs.
    pub z: Var,
    pub quantized: Var,
    pub ste: Var,
    /// Flat `b * (K + H*W)` code indices.
    pub indices: Vec<usize>,
}

/// Graph handles produced by one decoder pass.
pub struct DecodeVars {
    /// `[b, K, patch_dim]` when the decoder has prefix outputs.
    pub prefix: Option<Var>,
    /// `[b, H*W, patch_dim]`.
    pub grid: Var,
    /// Per layer `[b, heads, slots, slots]`.
    pub attn: Vec<Var>,
    /// Slot index of grid token 0 in the attention maps.
    pub grid_offset: usize,
}

pub struct Stage1Vars {
    pub total: Var,
    pub mse: Var,
    pub perc: Var,
    pub quant: Var,
    pub aux_mse: Option<Var>,
    pub aux_perc: Option<Var>,
    pub encoded: EncodeVars,
    pub decoded: DecodeVars,
}

pub struct Stage2Vars {
    pub total: Var,
    pub mse: Var,
    pub perc: Var,
    pub decoded: DecodeVars,
}

/// Encoder, codebook and both decoders of the image tokenizer.
#[derive(Clone, Debug)]
pub struct Tokenizer<T: Float> {
    pub cfg: TokConfig,
    pub params: ParamStore<T>,
    pub usage_ema: Vec<f64>,
    /// Highest training stage completed; stage 2 switches reconstruction to the second decoder.
    pub stage: u32,
    layout: Layout,
    features: FeatureNet<T>,
}

/// Prefix of parameters trained only in stage 2.
pub const STAGE2_PREFIX: &str = "dec2.";

impl<T: Float> Tokenizer<T> {
    pub fn new(cfg: TokConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&cfg, &mut params, seed);
        let usage_ema = vec![1.0 / cfg.codebook_size as f64; cfg.codebook_size];
        let features = FeatureNet::new(cfg.feature_seed);
        Ok(Self { cfg, params, usage_ema, stage: 0, layout, features })
    }

    /// Rebuild from stored tensors, checking names and shapes against `cfg`.
    pub fn from_parts(cfg: TokConfig, tensors: Vec<(String, Tensor<T>)>, usage_ema: Vec<f64>, stage: u32) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::ShapeMismatch {
                name: "tokenizer".into(),
                found: vec![tensors.len()],
                expected: vec![model.params.len()],
            });
        }
        if usage_ema.len() != model.cfg.codebook_size || stage > 2 {
            return Err(Error::ShapeMismatch {
                name: "codebook usage".into(),
                found: vec![usage_ema.len()],
                expected: vec![model.cfg.codebook_size],
            });
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(tensors) {
            let slot = model.params.get(id);
            if model.params.name(id) != name || slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch { name, found: t.shape().to_vec(), expected: slot.shape().to_vec() });
            }
            *model.params.get_mut(id) = t;
        }
        model.usage_ema = usage_ema;
        model.stage = stage;
        Ok(model)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layout.codebook
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.params.get(self.layout.codebook)
    }

    pub fn feature_net(&self) -> &FeatureNet<T> {
        &self.features
    }

    /// Stack `[h, w, 3]` images into one `[b, h, w, 3]` tensor.
    pub fn batch_images(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shape = [self.cfg.image_h, self.cfg.image_w, 3];
        let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
        for im in images {
            if im.shape() != shape {
                return Err(Error::ShapeMismatch { name: "image".into(), found: im.shape().to_vec(), expected: shape.to_vec() });
            }
            data.extend_from_slice(im.data());
        }
        Ok(Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)?)
    }

    fn tile(&self, g: &mut Graph<T>, x: Var, b: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let zeros = g.constant(Tensor::zeros(&[b, s[0], s[1]]))?;
        Ok(g.add(zeros, x)?)
    }

    /// Encoder over `images: [b, h, w, 3]`, followed by quantization.
    pub fn encode_vars(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<EncodeVars> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [self.cfg.image_h, self.cfg.image_w, 3] {
            return Err(Error::ShapeMismatch {
                name: "images".into(),
                found: s,
                expected: vec![0, self.cfg.image_h, self.cfg.image_w, 3],
            });
        }
        let b = s[0];
        let l = &self.layout;
        let patches = patchify_var(g, images, self.cfg.patch)?;
        let patches = l.patch_in.forward(g, p, patches)?;
        let mut parts = Vec::with_capacity(3);
        if let Some(prefix) = l.prefix {
            parts.push(self.tile(g, p[prefix], b)?);
        }
        parts.push(self.tile(g, p[l.latent], b)?);
        parts.push(patches);
        let x = g.concat(&parts, 1)?;
        let x = g.add(x, p[l.enc_pos])?;
        let h = l.encoder.forward(g, p, x, AttentionMaskKind::Bidirectional, None, None)?.out;
        let h = l.enc_norm.forward(g, p, h)?;
        let h = g.slice(h, 1, 0, self.cfg.seq_len())?;
        let z = l.to_code.forward(g, p, h)?;
        let q = quantize(g, z, p[l.codebook])?;
        Ok(EncodeVars { z, quantized: q.quantized, ste: q.ste_output, indices: q.indices })
    }

    /// Code vectors `[b, K + H*W, code_dim]` for flat per-image index lists.
    pub fn lookup(&self, g: &mut Graph<T>, p: &Bound, indices: &[usize]) -> Result<Var> {
        let n = self.cfg.seq_len();
        if indices.is_empty() || indices.len() % n != 0 {
            return Err(Error::InvalidArgument(format!("{} indices are not a whole number of {n}-token images", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.cfg.codebook_size) {
            return Err(Error::InvalidArgument(format!("code index {bad} out of range")));
        }
        let q = g.gather(p[self.layout.codebook], indices)?;
        Ok(g.reshape(q, &[indices.len() / n, n, self.cfg.code_dim])?)
    }

    fn run_decoder(&self, g: &mut Graph<T>, p: &Bound, dec: &Decoder, codes: Var, buffer: Option<ParamId>, mask: AttentionMaskKind) -> Result<(Var, Vec<Var>, usize)> {
        let b = g.shape(codes)[0];
        let mut x = dec.input.forward(g, p, codes)?;
        let mut lead = 0;
        if let Some(buf) = buffer {
            let t = self.tile(g, p[buf], b)?;
            lead = self.cfg.buffer_count;
            x = g.concat(&[t, x], 1)?;
        }
        let x = g.add(x, p[dec.pos])?;
        let o = dec.stack.forward(g, p, x, mask, None, None)?;
        let h = dec.norm.forward(g, p, o.out)?;
        Ok((h, o.attn_weights, lead))
    }

    /// Stage-1 decoder: slot `k < K` reconstructs first-row patch `k`, slot `K + i` grid patch `i`.
    pub fn decode_stage1_vars(&self, g: &mut Graph<T>, p: &Bound, codes: Var) -> Result<DecodeVars> {
        let l = &self.layout;
        let (h, attn, _) = self.run_decoder(g, p, &l.dec1, codes, None, self.cfg.decoder_mask)?;
        let out = l.dec1.out.forward(g, p, h)?;
        let k = self.cfg.prefix_len();
        let prefix = if k > 0 { Some(g.slice(out, 1, 0, k)?) } else { None };
        let grid = g.slice(out, 1, k, self.cfg.grid_len())?;
        Ok(DecodeVars { prefix, grid, attn, grid_offset: k })
    }

    /// Stage-2 decoder: bidirectional over `[buffer || codes]`; only grid slots are decoded.
    pub fn decode_stage2_vars(&self, g: &mut Graph<T>, p: &Bound, codes: Var) -> Result<DecodeVars> {
        let l = &self.layout;
        let (h, attn, lead) = self.run_decoder(g, p, &l.dec2, codes, l.buffer, AttentionMaskKind::Bidirectional)?;
        let offset = lead + self.cfg.prefix_len();
        let h = g.slice(h, 1, offset, self.cfg.grid_len())?;
        let grid = l.dec2.out.forward(g, p, h)?;
        Ok(DecodeVars { prefix: None, grid, attn, grid_offset: offset })
    }

    fn to_image(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        unpatchify_var(g, patches, self.cfg.image_h, self.cfg.image_w, self.cfg.patch)
    }

    /// Full stage-1 objective on `images: [b, h, w, 3]`.
    pub fn stage1_loss_vars(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Stage1Vars> {
        let encoded = self.encode_vars(g, p, images)?;
        let decoded = self.decode_stage1_vars(g, p, encoded.ste)?;
        let rec = self.to_image(g, decoded.grid)?;
        let mse = g.mse(rec, images)?;
        let perc = self.features.loss(g, rec, images)?;
        let quant = quant_loss(g, encoded.z, encoded.quantized, self.cfg.beta)?;
        let main = g.add(mse, perc)?;
        let main = g.add(main, quant)?;
        let (aux_mse, aux_perc, total) = match (self.cfg.aux_loss, decoded.prefix) {
            (true, Some(prefix)) => {
                let w = self.cfg.grid_w();
                let target = patchify_var(g, images, self.cfg.patch)?;
                let first_row = g.slice(target, 1, 0, w)?;
                let aux_mse = g.mse(prefix, first_row)?;
                let rest = g.slice(decoded.grid, 1, w, self.cfg.grid_len() - w)?;
                let rest = g.detach(rest)?;
                let composed = g.concat(&[prefix, rest], 1)?;
                let composed = self.to_image(g, composed)?;
                let aux_perc = self.features.loss(g, composed, images)?;
                let aux = g.add(aux_mse, aux_perc)?;
                (Some(aux_mse), Some(aux_perc), g.add(main, aux)?)
            }
            _ => (None, None, main),
        };
        Ok(Stage1Vars { total, mse, perc, quant, aux_mse, aux_perc, encoded, decoded })
    }

    /// Stage-2 objective (`mse + perc`) from precomputed code indices.
    pub fn stage2_loss_vars(&self, g: &mut Graph<T>, p: &Bound, indices: &[usize], images: Var) -> Result<Stage2Vars> {
        let codes = self.lookup(g, p, indices)?;
        let codes = g.detach(codes)?;
        let decoded = self.decode_stage2_vars(g, p, codes)?;
        let rec = self.to_image(g, decoded.grid)?;
        let mse = g.mse(rec, images)?;
        let perc = self.features.loss(g, rec, images)?;
        let total = g.add(mse, perc)?;
        Ok(Stage2Vars { total, mse, perc, decoded })
    }

    pub fn read_parts(g: &Graph<T>, v: &Stage1Vars) -> LossParts {
        let get = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().as_f64());
        LossParts {
            mse: get(Some(v.mse)),
            perc: get(Some(v.perc)),
            quant: get(Some(v.quant)),
            aux_mse: get(v.aux_mse),
            aux_perc: get(v.aux_perc),
        }
    }

    /// Encode a batch of images (inference, no gradients).
    pub fn encode_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<EncodedSequence<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let x = g.constant(self.batch_images(images)?)?;
        let e = self.encode_vars(&mut g, &p, x)?;
        let (n, d) = (self.cfg.seq_len(), self.cfg.code_dim);
        let z = g.value(e.z).data();
        (0..images.len())
            .map(|i| {
                Ok(EncodedSequence {
                    indices: e.indices[i * n..(i + 1) * n].to_vec(),
                    continuous: Tensor::new(vec![n, d], z[i * n * d..(i + 1) * n * d].to_vec())?,
                })
            })
            .collect()
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<EncodedSequence<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    fn unpack(&self, g: &Graph<T>, d: &DecodeVars, b: usize) -> Result<Vec<ReconstructionOutput<T>>> {
        let (f, hw, k) = (self.cfg.patch, self.cfg.grid_len(), self.cfg.prefix_len());
        let pd = self.cfg.patch_dim();
        let grid = g.value(d.grid).data();
        let prefix = d.prefix.map(|v| g.value(v).data());
        (0..b)
            .map(|i| {
                let gp = Tensor::new(vec![hw, pd], grid[i * hw * pd..(i + 1) * hw * pd].to_vec())?;
                let image = super::patch::unpatchify(&gp, self.cfg.image_h, self.cfg.image_w, f)?;
                let prefix_patches = match prefix {
                    Some(pre) => Some(Tensor::new(vec![k, f, f, 3], pre[i * k * pd..(i + 1) * k * pd].to_vec())?),
                    None => None,
                };
                Ok(ReconstructionOutput { prefix_patches, grid_patches: gp.reshaped(&[hw, f, f, 3])?, image })
            })
            .collect()
    }

    fn decode_with(&self, seqs: &[&[usize]], stage: u32) -> Result<Vec<ReconstructionOutput<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let flat: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let codes = self.lookup(&mut g, &p, &flat)?;
        let d = if stage >= 2 {
            self.decode_stage2_vars(&mut g, &p, codes)?
        } else {
            self.decode_stage1_vars(&mut g, &p, codes)?
        };
        self.unpack(&g, &d, seqs.len())
    }

    pub fn decode_stage1(&self, seq: &EncodedSequence<T>) -> Result<ReconstructionOutput<T>> {
        Ok(self.decode_with(&[&seq.indices], 1)?.remove(0))
    }

    pub fn decode_stage2(&self, seq: &EncodedSequence<T>) -> Result<ReconstructionOutput<T>> {
        Ok(self.decode_with(&[&seq.indices], 2)?.remove(0))
    }

    /// Decode token lists with the decoder of the highest completed stage.
    pub fn decode_indices(&self, seqs: &[&[usize]]) -> Result<Vec<ReconstructionOutput<T>>> {
        self.decode_with(seqs, self.stage)
    }

    /// Encode then decode with the current decoder.
    pub fn reconstruct(&self, images: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let enc = self.encode_batch(images)?;
        let seqs: Vec<&[usize]> = enc.iter().map(|e| e.indices.as_slice()).collect();
        Ok(self.decode_indices(&seqs)?.into_iter().map(|r| r.image).collect())
    }

    /// Attention maps of the current decoder on `images`, with the slot offset of grid token 0.
    pub fn decoder_attention(&self, images: &[&Tensor<T>]) -> Result<(Vec<Tensor<T>>, usize)> {
        let enc = self.encode_batch(images)?;
        let flat: Vec<usize> = enc.iter().flat_map(|e| e.indices.iter().copied()).collect();
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let codes = self.lookup(&mut g, &p, &flat)?;
        let d = if self.stage >= 2 {
            self.decode_stage2_vars(&mut g, &p, codes)?
        } else {
            self.decode_stage1_vars(&mut g, &p, codes)?
        };
        Ok((d.attn.iter().map(|&a| g.value(a).clone()).collect(), d.grid_offset))
    }

    /// Stage-1 loss parts on one batch without updating anything.
    pub fn loss_stage1(&self, images: &[&Tensor<T>]) -> Result<(f64, LossParts)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let x = g.constant(self.batch_images(images)?)?;
        let v = self.stage1_loss_vars(&mut g, &p, x)?;
        Ok((g.value(v.total).item().as_f64(), Self::read_parts(&g, &v)))
    }
}
