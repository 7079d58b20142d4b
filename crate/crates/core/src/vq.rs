//! Nearest-neighbour vector quantization with a straight-through estimator,
//! the codebook/commitment loss, and usage-driven dead-code reinitialisation.

use atok_autodiff::{Float, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_USAGE_DECAY: f64 = 0.99;
/// Dead-code threshold is this value divided by the codebook size.
pub const DEFAULT_THRESHOLD_SCALE: f64 = 0.03;

/// Code vectors plus an exponential moving average of how often each is chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub vectors: Tensor<T>,
    pub usage_ema: Vec<f64>,
}

impl<T: Float> Codebook<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        let shape = vectors.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::InvalidArgument(format!("codebook must be [V >= 2, dim], got {shape:?}")));
        }
        if vectors.first_non_finite().is_some() {
            return Err(Error::InvalidArgument("codebook contains non-finite values".into()));
        }
        let v = shape[0];
        Ok(Self { vectors, usage_ema: vec![1.0 / v as f64; v] })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn nearest(&self, z: &[T]) -> Result<Vec<usize>> {
        nearest_codes(z, self.vectors.data(), self.dim())
    }

    pub fn update_usage_and_reinit(
        &mut self,
        batch_indices: &[usize],
        batch_z: &[T],
        decay: f64,
        threshold: f64,
        rng: &mut StreamRng,
    ) -> Result<usize> {
        let dim = self.dim();
        let vectors = self.vectors.data_mut();
        Ok(update_usage_and_reinit(&mut self.usage_ema, vectors, dim, batch_indices, batch_z, decay, threshold, rng)?.len())
    }
}

/// Index of the closest code (squared Euclidean distance, ties to the lowest index)
/// for every `dim`-sized row of `z`.
pub fn nearest_codes<T: Float>(z: &[T], codes: &[T], dim: usize) -> Result<Vec<usize>> {
    if dim == 0 || z.len() % dim != 0 || codes.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "quantize: {} inputs / {} code values are not multiples of dim {dim}",
            z.len(),
            codes.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("quantize: non-finite encoder output".into()));
    }
    Ok(z.chunks(dim)
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for (j, code) in codes.chunks(dim).enumerate() {
                let d: f64 = row.iter().zip(code).map(|(&a, &b)| {
                    let e = a.as_f64() - b.as_f64();
                    e * e
                }).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// Exact code vectors, differentiable with respect to the codebook.
    pub quantized: Var,
    /// Forward value equal to `quantized`; gradient passes straight to `z`.
    pub ste_output: Var,
}

/// Quantize `z: [..., dim]` against `codebook: [V, dim]` on the graph.
pub fn quantize<T: Float>(g: &mut Graph<T>, z: Var, codebook: Var) -> Result<QuantizeResult> {
    let zs = g.shape(z).to_vec();
    let cs = g.shape(codebook).to_vec();
    if cs.len() != 2 || zs.last() != Some(&cs[1]) {
        return Err(Error::InvalidArgument(format!("quantize: z {zs:?} does not match codebook {cs:?}")));
    }
    let dim = cs[1];
    let indices = nearest_codes(g.value(z).data(), g.value(codebook).data(), dim)?;
    let q = g.gather(codebook, &indices)?;
    let quantized = g.reshape(q, &zs)?;
    let diff = g.sub(quantized, z)?;
    let diff = g.detach(diff)?;
    let ste_output = g.add(z, diff)?;
    Ok(QuantizeResult { indices, quantized, ste_output })
}

/// Mean over rows of `|sg(z) - q|^2 + beta |z - sg(q)|^2`.
pub fn quant_loss<T: Float>(g: &mut Graph<T>, z: Var, quantized: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let rows = g.value(z).len() / g.shape(z).last().copied().unwrap_or(1);
    let zd = g.detach(z)?;
    let qd = g.detach(quantized)?;
    let codebook_term = sq_norm_sum(g, zd, quantized)?;
    let commit = sq_norm_sum(g, z, qd)?;
    let commit = g.scale(commit, beta)?;
    let total = g.add(codebook_term, commit)?;
    Ok(g.scale(total, 1.0 / rows as f64)?)
}

fn sq_norm_sum<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq)?)
}

/// EMA usage update followed by reinitialisation of every code whose usage fell
/// below `threshold`; a dead code is overwritten by a uniformly drawn row of `batch_z`
/// and its usage reset to uniform. Returns the reinitialised code indices.
#[allow(clippy::too_many_arguments)]
pub fn update_usage_and_reinit<T: Float>(
    usage_ema: &mut [f64],
    vectors: &mut [T],
    dim: usize,
    batch_indices: &[usize],
    batch_z: &[T],
    decay: f64,
    threshold: f64,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if batch_indices.is_empty() || batch_z.is_empty() {
        return Err(Error::InvalidArgument("usage update on an empty batch".into()));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidArgument(format!("usage decay must lie in (0, 1), got {decay}")));
    }
    let v = usage_ema.len();
    let mut counts = vec![0usize; v];
    for &i in batch_indices {
        counts[i] += 1;
    }
    let n = batch_indices.len() as f64;
    for (u, &c) in usage_ema.iter_mut().zip(&counts) {
        *u = decay * *u + (1.0 - decay) * (c as f64 / n);
    }
    let rows = batch_z.len() / dim;
    let mut reset = Vec::new();
    for code in 0..v {
        if usage_ema[code] < threshold {
            let pick = rng.random_range(0..rows);
            vectors[code * dim..(code + 1) * dim].copy_from_slice(&batch_z[pick * dim..(pick + 1) * dim]);
            usage_ema[code] = 1.0 / v as f64;
            reset.push(code);
        }
    }
    Ok(reset)
}

/// Fraction of the `size` codes that appear at least once in `corpus`.
pub fn utilization(size: usize, corpus: &[usize]) -> f64 {
    if size == 0 {
        return 0.0;
    }
    let mut seen = vec![false; size];
    for &i in corpus {
        if i < size {
            seen[i] = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / size as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn nearest_prefers_closer_code() {
        let cb = Codebook::new(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        assert_eq!(cb.nearest(&[1.0, 1.0]).unwrap(), vec![0]);
    }

    #[test]
    fn exact_code_is_returned_bit_exact() {
        let mut g = Graph::<f64>::new();
        let cb = g.constant(t(&[3, 2], &[0.5, -1.25, 2.0, 7.0, -3.0, 0.1])).unwrap();
        let z = g.param(t(&[1, 2], &[2.0, 7.0])).unwrap();
        let r = quantize(&mut g, z, cb).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert_eq!(g.value(r.quantized).data(), g.value(z).data());
    }

    #[test]
    fn duplicate_codes_resolve_to_lowest_index() {
        let codes = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(nearest_codes(&[0.9, 0.9], &codes, 2).unwrap(), vec![0]);
    }

    #[test]
    fn quant_loss_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.param(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let q = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let l = quant_loss(&mut g, z, q, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 1.25);

        let mut g = Graph::<f64>::new();
        let cb = g.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let z = g.param(t(&[1, 2], &[3.0, 4.0])).unwrap();
        let r = quantize(&mut g, z, cb).unwrap();
        let l = quant_loss(&mut g, z, r.quantized, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn straight_through_jacobian_is_identity() {
        let mut g = Graph::<f64>::new();
        let cb = g.param(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, -1.0, 2.0])).unwrap();
        let z = g.param(t(&[4, 2], &[0.1, 0.2, 0.9, 1.3, -2.0, 1.0, 5.0, 5.0])).unwrap();
        let r = quantize(&mut g, z, cb).unwrap();
        let s = g.sum(r.ste_output).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(z).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(cb).is_none(), "codebook is only reached through the loss");
    }

    #[test]
    fn loss_terms_route_gradients_separately() {
        // codebook term only: no encoder gradient
        let mut g = Graph::<f64>::new();
        let cb = g.param(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let z = g.param(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let r = quantize(&mut g, z, cb).unwrap();
        let l = quant_loss(&mut g, z, r.quantized, 0.0).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(z).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.grad(cb).unwrap().data().iter().any(|&v| v != 0.0));

        // commitment term alone: compare gradient split against beta
        let mut g = Graph::<f64>::new();
        let cb = g.param(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let z = g.param(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let r = quantize(&mut g, z, cb).unwrap();
        let l = quant_loss(&mut g, z, r.quantized, 0.25).unwrap();
        g.backward(l).unwrap();
        // d/dz 0.25 |z - q|^2 = 0.5 (z - q), q = [0, 0]
        assert_eq!(g.grad(z).unwrap().data(), &[0.5, 1.0]);
        // d/dq |z - q|^2 = -2 (z - q) lands on code 0 only
        assert_eq!(g.grad(cb).unwrap().data(), &[-2.0, -4.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_usage_keeps_every_code() {
        let mut cb = Codebook::new(t(&[4, 1], &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let mut rng = seeded(0, 0);
        for _ in 0..50 {
            let n = cb.update_usage_and_reinit(&[0, 1, 2, 3], &[0.0, 1.0, 2.0, 3.0], 0.99, 0.03 / 4.0, &mut rng).unwrap();
            assert_eq!(n, 0);
        }
    }

    #[test]
    fn unused_code_decays_geometrically() {
        let mut usage = vec![0.5, 0.5];
        let mut vectors = vec![0.0f64, 1.0];
        let mut rng = seeded(0, 0);
        for _ in 0..30 {
            update_usage_and_reinit(&mut usage, &mut vectors, 1, &[0], &[0.0], 0.99, 0.0, &mut rng).unwrap();
        }
        assert!((usage[1] - 0.5 * 0.99f64.powi(30)).abs() < 1e-9);
    }

    #[test]
    fn never_used_code_is_reset_to_a_batch_vector() {
        let mut cb = Codebook::new(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 100.0, 100.0])).unwrap();
        let mut rng = seeded(3, 0);
        let mut total = 0;
        let mut last_batch = Vec::new();
        for step in 0..100 {
            let s = step as f64 * 0.01;
            let batch_z = vec![s, 0.0, 1.0, 1.0 + s, 0.02, 0.01, 0.9, 1.1];
            let idx = cb.nearest(&batch_z).unwrap();
            total += cb.update_usage_and_reinit(&idx, &batch_z, 0.9, 0.03 / 3.0, &mut rng).unwrap();
            if total > 0 {
                last_batch = batch_z;
                break;
            }
        }
        assert_eq!(total, 1);
        let code = &cb.vectors.data()[4..6];
        assert!(last_batch.chunks(2).any(|row| row == code), "{code:?} not drawn from the batch");
    }

    #[test]
    fn utilization_counts_distinct_codes() {
        assert_eq!(utilization(4, &[0, 1, 2, 3, 3]), 1.0);
        assert_eq!(utilization(64, &[7; 100]), 1.0 / 64.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut cb = Codebook::new(t(&[2, 1], &[0.0, 1.0])).unwrap();
        let mut rng = seeded(0, 0);
        assert!(cb.update_usage_and_reinit(&[], &[], 0.99, 0.01, &mut rng).is_err());
    }
}
