//! Frozen random convolutional features used as a perceptual loss.

use atok_autodiff::{Float, Graph, Tensor, Var};
use rand_distr::{Distribution, Normal};

use super::patch::patchify_var;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

const C1: usize = 16;
const C2: usize = 32;

/// Two stride-2, 2x2 convolutions with a SiLU between them; weights drawn once from a seed.
#[derive(Clone, Debug)]
pub struct FeatureNet<T> {
    w1: Tensor<T>,
    w2: Tensor<T>,
}

impl<T: Float> FeatureNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed, stream::FEATURES);
        let mut draw = |fan_in: usize, fan_out: usize| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64(n.sample(&mut rng)))
        };
        let w1 = draw(2 * 2 * 3, C1);
        let w2 = draw(2 * 2 * C1, C2);
        Self { w1, w2 }
    }

    /// `[b, h, w, 3] -> [b, (h/4) * (w/4), 32]`.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[3] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::InvalidArgument(format!("feature net expects [b, 4m, 4n, 3], got {s:?}")));
        }
        let w1 = g.constant(self.w1.clone())?;
        let w2 = g.constant(self.w2.clone())?;
        let p = patchify_var(g, x, 2)?;
        let h = g.matmul(p, w1)?;
        let h = g.silu(h)?;
        let h = g.reshape(h, &[s[0], s[1] / 2, s[2] / 2, C1])?;
        let p = patchify_var(g, h, 2)?;
        Ok(g.matmul(p, w2)?)
    }

    /// Mean squared difference between the feature maps of `a` and `b`.
    pub fn loss(&self, g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::InvalidArgument(format!("feature loss shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        Ok(g.mse(fa, fb)?)
    }
}

/// Feature loss between two `[h, w, 3]` images with a freshly seeded network.
pub fn fixed_feature_loss<T: Float>(a: &Tensor<T>, b: &Tensor<T>, seed: u64) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::InvalidArgument(format!("feature loss shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let net = FeatureNet::<T>::new(seed);
    let mut g = Graph::new();
    let shape: Vec<usize> = std::iter::once(1).chain(a.shape().iter().copied()).collect();
    let va = g.constant(a.clone().reshaped(&shape)?)?;
    let vb = g.constant(b.clone().reshaped(&shape)?)?;
    let l = net.loss(&mut g, va, vb)?;
    Ok(g.value(l).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(phase: f64) -> Tensor<f64> {
        Tensor::from_fn(&[8, 8, 3], |i| 0.5 + 0.4 * (i as f64 * 0.3 + phase).sin())
    }

    #[test]
    fn identical_images_have_zero_loss() {
        assert_eq!(fixed_feature_loss(&img(0.0), &img(0.0), 1).unwrap(), 0.0);
    }

    #[test]
    fn loss_is_symmetric_and_deterministic() {
        let (a, b) = (img(0.0), img(1.0));
        let ab = fixed_feature_loss(&a, &b, 4).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab.to_bits(), fixed_feature_loss(&b, &a, 4).unwrap().to_bits());
        assert_eq!(ab.to_bits(), fixed_feature_loss(&a, &b, 4).unwrap().to_bits());
        assert_ne!(ab, fixed_feature_loss(&a, &b, 5).unwrap());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let small = Tensor::<f64>::zeros(&[4, 4, 3]);
        assert!(fixed_feature_loss(&img(0.0), &small, 0).is_err());
    }
}
