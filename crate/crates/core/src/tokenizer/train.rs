use atok_autodiff::{Float, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossParts, Tokenizer, STAGE2_PREFIX};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{seeded, stream, StreamRng};
use crate::vq::{update_usage_and_reinit, utilization};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One row of the tokenizer metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokStepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub parts: LossParts,
    /// Fraction of codes used by this step's batch.
    pub utilization: f64,
}

pub const TOK_METRICS_HEADER: &str = "step,loss_total,mse,perc,quant,aux_mse,aux_perc,utilization";

impl TokStepMetrics {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.loss_total, p.mse, p.perc, p.quant, p.aux_mse, p.aux_perc, self.utilization
        )
    }
}

fn draw_batch(rng: &mut StreamRng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn check_finite(step: usize, total: f64, parts: &LossParts) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, detail: format!("{parts:?}") })
    }
}

/// Stage 1: encoder, prefix and latent embeddings, codebook and first decoder.
pub fn train_stage1<T: Float>(
    model: &mut Tokenizer<T>,
    images: &[Tensor<T>],
    opts: &TrainOptions,
    seed: u64,
    mut log: impl FnMut(&TokStepMetrics),
) -> Result<Vec<TokStepMetrics>> {
    opts.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let trainable = |n: &str| !n.starts_with(STAGE2_PREFIX);
    let mut opt = Adam::new(opts.optimizer.clone(), &model.params, trainable)?;
    let mut batch_rng = seeded(seed, stream::BATCH);
    let mut reinit_rng = seeded(seed, stream::REINIT);
    let (v, d) = (model.cfg.codebook_size, model.cfg.code_dim);
    let threshold = model.cfg.dead_code_threshold();
    let cb = model.codebook_id();
    if model.stage == 0 {
        init_codebook_from_data(model, images, opts.batch, &mut reinit_rng)?;
    }
    let mut out = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let pick = draw_batch(&mut batch_rng, images.len(), opts.batch);
        let refs: Vec<&Tensor<T>> = pick.iter().map(|&i| &images[i]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, trainable)?;
        let x = g.constant(model.batch_images(&refs)?)?;
        let vars = model.stage1_loss_vars(&mut g, &p, x)?;
        let parts = Tokenizer::<T>::read_parts(&g, &vars);
        let total = g.value(vars.total).item().as_f64();
        check_finite(step, total, &parts)?;
        g.backward(vars.total)?;
        opt.step(&mut model.params, &g, &p, opts.optimizer.lr_at(step, opts.steps))?;

        let indices = vars.encoded.indices;
        let z = g.value(vars.encoded.z).data().to_vec();
        drop(g);
        let vectors = model.params.get_mut(cb).data_mut();
        let reset = update_usage_and_reinit(&mut model.usage_ema, vectors, d, &indices, &z, model.cfg.usage_decay, threshold, &mut reinit_rng)?;
        opt.reset_rows(cb, &reset, d);

        let m = TokStepMetrics { step, loss_total: total, parts, utilization: utilization(v, &indices) };
        log(&m);
        out.push(m);
    }
    model.stage = model.stage.max(1);
    Ok(out)
}

/// Overwrite every code with a distinct encoder output from a random batch of images.
pub fn init_codebook_from_data<T: Float>(model: &mut Tokenizer<T>, images: &[Tensor<T>], batch: usize, rng: &mut StreamRng) -> Result<()> {
    let pick = draw_batch(rng, images.len(), batch.max(1));
    let refs: Vec<&Tensor<T>> = pick.iter().map(|&i| &images[i]).collect();
    let z: Vec<T> = model.encode_batch(&refs)?.into_iter().flat_map(|e| e.continuous.into_data()).collect();
    let d = model.cfg.code_dim;
    let rows = z.len() / d;
    let v = model.cfg.codebook_size;
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    let cb = model.codebook_id();
    let vectors = model.params.get_mut(cb).data_mut();
    for code in 0..v {
        let r = order[code % rows];
        vectors[code * d..(code + 1) * d].copy_from_slice(&z[r * d..(r + 1) * d]);
    }
    model.usage_ema = vec![1.0 / v as f64; v];
    Ok(())
}

/// Code indices of every image, encoded in fixed-size chunks.
pub fn encode_all<T: Float>(model: &Tokenizer<T>, images: &[Tensor<T>]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        out.extend(model.encode_batch(&refs)?.into_iter().map(|e| e.indices));
    }
    Ok(out)
}

/// Stage 2: a new bidirectional decoder with buffer tokens on top of the frozen encoder and codebook.
pub fn train_stage2<T: Float>(
    model: &mut Tokenizer<T>,
    images: &[Tensor<T>],
    opts: &TrainOptions,
    seed: u64,
    mut log: impl FnMut(&TokStepMetrics),
) -> Result<Vec<TokStepMetrics>> {
    opts.validate()?;
    if model.stage < 1 {
        return Err(Error::MissingCheckpoint("stage 2 needs a tokenizer trained in stage 1".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let codes = encode_all(model, images)?;
    let trainable = |n: &str| n.starts_with(STAGE2_PREFIX);
    let mut opt = Adam::new(opts.optimizer.clone(), &model.params, trainable)?;
    let mut batch_rng = seeded(seed, stream::BATCH);
    let v = model.cfg.codebook_size;
    let mut out = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let pick = draw_batch(&mut batch_rng, images.len(), opts.batch);
        let refs: Vec<&Tensor<T>> = pick.iter().map(|&i| &images[i]).collect();
        let flat: Vec<usize> = pick.iter().flat_map(|&i| codes[i].iter().copied()).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, trainable)?;
        let x = g.constant(model.batch_images(&refs)?)?;
        let vars = model.stage2_loss_vars(&mut g, &p, &flat, x)?;
        let parts = LossParts {
            mse: g.value(vars.mse).item().as_f64(),
            perc: g.value(vars.perc).item().as_f64(),
            ..LossParts::default()
        };
        let total = g.value(vars.total).item().as_f64();
        check_finite(step, total, &parts)?;
        g.backward(vars.total)?;
        opt.step(&mut model.params, &g, &p, opts.optimizer.lr_at(step, opts.steps))?;
        let m = TokStepMetrics { step, loss_total: total, parts, utilization: utilization(v, &flat) };
        log(&m);
        out.push(m);
    }
    model.stage = 2;
    Ok(out)
}
