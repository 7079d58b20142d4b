//! Deterministic synthetic image classes: oriented colour stripes plus uniform noise.

use std::f64::consts::PI;

use atok_autodiff::{Float, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_h: usize,
    pub image_w: usize,
    #[serde(default = "default_noise")]
    pub noise_amplitude: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn desk() -> Self {
        Self { classes: 8, images_per_class: 64, image_h: 32, image_w: 32, noise_amplitude: 0.1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.images_per_class == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("synthetic dataset sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!("noise_amplitude {} outside [0, 1]", self.noise_amplitude)));
        }
        Ok(())
    }

    /// Training images: indices `0..images_per_class` of every class, class-major.
    pub fn train_set<T: Float>(&self) -> Result<Vec<(usize, Tensor<T>)>> {
        self.range(0, self.images_per_class)
    }

    /// Held-out images: `count` indices past the training range for every class.
    pub fn eval_set<T: Float>(&self, count: usize) -> Result<Vec<(usize, Tensor<T>)>> {
        self.range(self.images_per_class, count)
    }

    fn range<T: Float>(&self, start: usize, count: usize) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut out = Vec::with_capacity(self.classes * count);
        for c in 0..self.classes {
            for i in start..start + count {
                out.push((c, gen_image(self, c, i)?));
            }
        }
        Ok(out)
    }
}

/// Stripe angle `c * pi / C`, `2 + c` cycles across the image, RGB phases a third of a turn apart,
/// plus per-pixel uniform noise in `[-a, a]`, clamped to `[0, 1]`.
pub fn gen_image<T: Float>(spec: &SyntheticSpec, class_id: usize, index: usize) -> Result<Tensor<T>> {
    spec.validate()?;
    if class_id >= spec.classes {
        return Err(Error::InvalidArgument(format!("class {class_id} out of range for {} classes", spec.classes)));
    }
    let (h, w) = (spec.image_h, spec.image_w);
    let theta = class_id as f64 * PI / spec.classes as f64;
    let freq = 2.0 + class_id as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let scale = h.max(w) as f64;
    let mut rng = seeded(spec.seed ^ ((class_id as u64) << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9), stream::DATA);
    let a = spec.noise_amplitude;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 * dx + y as f64 * dy) / scale;
            for ch in 0..3 {
                let base = 0.5 + 0.4 * (2.0 * PI * freq * u + ch as f64 * 2.0 * PI / 3.0).sin();
                let noise = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
                data.push(T::from_f64((base + noise).clamp(0.0, 1.0)));
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 3], data)?)
}
