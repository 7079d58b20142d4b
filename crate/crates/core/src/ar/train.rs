use atok_autodiff::{Float, Graph};
use rand::Rng;

use super::dataset::TokenDataset;
use super::model::{accuracy, ArModel, TokenSequence};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{seeded, stream, unit, StreamRng};
use crate::tokenizer::TrainOptions;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub const AR_METRICS_HEADER: &str = "step,loss,accuracy,lr";

impl ArStepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.accuracy, self.lr)
    }
}

/// Replace each class label by the null class with probability `drop_prob`.
pub fn drop_classes(batch: &[TokenSequence], null_class: usize, drop_prob: f64, rng: &mut StreamRng) -> Vec<TokenSequence> {
    batch
        .iter()
        .map(|s| {
            let u = unit(rng);
            let class_id = if u < drop_prob { null_class } else { s.class_id };
            TokenSequence { class_id, tokens: s.tokens.clone() }
        })
        .collect()
}

/// Mean cross-entropy and accuracy of `model` on `batch`, plus the loss node for training.
fn batch_loss<T: Float>(model: &ArModel<T>, g: &mut Graph<T>, p: &crate::params::Bound, batch: &[TokenSequence]) -> Result<(atok_autodiff::Var, f64, f64)> {
    let logits = model.forward_train(g, p, batch)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    let acc = accuracy(g.value(logits).data(), model.cfg.vocab, &targets);
    Ok((loss, g.value(loss).item().as_f64(), acc))
}

/// One optimisation step with class dropout; returns `(loss, accuracy)`.
pub fn ar_train_step<T: Float>(
    model: &mut ArModel<T>,
    opt: &mut Adam<T>,
    batch: &[TokenSequence],
    lr: f64,
    rng: &mut StreamRng,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = drop_classes(batch, model.cfg.null_class(), model.cfg.drop_prob, rng);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| true)?;
    let (loss, value, acc) = batch_loss(model, &mut g, &p, &batch)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, detail: format!("cross-entropy {value}") });
    }
    g.backward(loss)?;
    opt.step(&mut model.params, &g, &p, lr)?;
    Ok((value, acc))
}

pub fn train_ar<T: Float>(
    model: &mut ArModel<T>,
    data: &TokenDataset,
    opts: &TrainOptions,
    seed: u64,
    mut log: impl FnMut(&ArStepMetrics),
) -> Result<Vec<ArStepMetrics>> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty token dataset".into()));
    }
    if data.seq_len != model.cfg.seq_len() || data.vocab != model.cfg.vocab || data.classes != model.cfg.classes {
        return Err(Error::Config(format!(
            "token dataset (seq_len {}, vocab {}, classes {}) does not match the generator",
            data.seq_len, data.vocab, data.classes
        )));
    }
    let mut opt = Adam::new(opts.optimizer.clone(), &model.params, |_| true)?;
    let mut batch_rng = seeded(seed, stream::BATCH);
    let mut drop_rng = seeded(seed, stream::CLASS_DROP);
    let mut out = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<TokenSequence> = (0..opts.batch).map(|_| data.records[batch_rng.random_range(0..data.len())].clone()).collect();
        let lr = opts.optimizer.lr_at(step, opts.steps);
        let (loss, acc) = ar_train_step(model, &mut opt, &batch, lr, &mut drop_rng).map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            e => e,
        })?;
        let m = ArStepMetrics { step, loss, accuracy: acc, lr };
        log(&m);
        out.push(m);
    }
    Ok(out)
}

/// Loss and accuracy over the whole dataset with true labels.
pub fn evaluate<T: Float>(model: &ArModel<T>, data: &TokenDataset) -> Result<(f64, f64)> {
    let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
    for chunk in data.records.chunks(32) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g)?;
        let (_, l, a) = batch_loss(model, &mut g, &p, chunk)?;
        loss += l * chunk.len() as f64;
        acc += a * chunk.len() as f64;
        n += chunk.len();
    }
    Ok((loss / n.max(1) as f64, acc / n.max(1) as f64))
}
