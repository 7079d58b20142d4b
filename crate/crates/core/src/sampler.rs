//! Token-by-token sampling with per-session key/value caches and classifier-free guidance.

use std::time::Instant;

use atok_autodiff::{Float, Graph};
use serde::{Deserialize, Serialize};

use crate::ar::{argmax, ArModel, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::LayerKv;
use crate::rng::{seeded, stream, unit, StreamRng};

/// Below this temperature sampling is replaced by an exact argmax.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    #[serde(default)]
    pub use_cfg: bool,
    #[serde(default = "one")]
    pub guidance_scale: f64,
    #[serde(default = "one")]
    pub scaler_power: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SamplingConfig {
    /// Plain temperature sampling at 0.95.
    pub fn unguided() -> Self {
        Self { temperature: 0.95, use_cfg: false, guidance_scale: 1.0, scaler_power: 1.0, seed: 0 }
    }

    pub fn guided(guidance_scale: f64, scaler_power: f64) -> Self {
        Self { temperature: 1.0, use_cfg: true, guidance_scale, scaler_power, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.use_cfg && (!(self.guidance_scale >= 1.0) || !(self.scaler_power > 0.0)) {
            return Err(Error::Config(format!(
                "guidance needs scale >= 1 and power > 0, got {} and {}",
                self.guidance_scale, self.scaler_power
            )));
        }
        Ok(())
    }
}

/// Pow-cosine guidance ramp from 1 at `t = 0` to `g_max` at `t = total - 1`.
pub fn cfg_schedule(t: usize, total: usize, g_max: f64, power: f64) -> f64 {
    if total <= 1 {
        return g_max;
    }
    let x = (t as f64 / (total - 1) as f64).powf(power);
    1.0 + (g_max - 1.0) * (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
}

/// `uncond + g * (cond - uncond)`, evaluated as `g * cond + (1 - g) * uncond`.
pub fn cfg_combine<T: Float>(cond: &[T], uncond: &[T], g: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::InvalidArgument(format!("guidance logits differ in length: {} vs {}", cond.len(), uncond.len())));
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| g * c.as_f64() + (1.0 - g) * u.as_f64()).collect())
}

/// Draw an index from `softmax(logits / temperature)` by inverse CDF with one uniform from `rng`.
pub fn sample_logits(logits: &[f64], temperature: f64, rng: &mut StreamRng) -> usize {
    let u = unit(rng);
    if temperature < TEMPERATURE_FLOOR {
        return argmax(logits);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            last = i;
        }
        acc += wi;
        if target < acc {
            return i;
        }
    }
    last
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
pub fn entropy(logits: &[f64], temperature: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    -w.iter().map(|&x| x / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Generation state for a batch of images: caches (doubled when guided), fed tokens and step count.
pub struct Session<'m, T: Float> {
    model: &'m ArModel<T>,
    classes: Vec<usize>,
    rows: Vec<usize>,
    caches: Option<Vec<LayerKv<T>>>,
    tokens: Vec<Vec<usize>>,
    use_cfg: bool,
    last_cond: Vec<Vec<T>>,
}

impl<'m, T: Float> Session<'m, T> {
    pub fn new(model: &'m ArModel<T>, classes: &[usize], use_cfg: bool, use_cache: bool) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("no classes to sample".into()));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > model.cfg.classes) {
            return Err(Error::InvalidArgument(format!("class {c} out of range")));
        }
        let mut rows = classes.to_vec();
        if use_cfg {
            rows.extend(std::iter::repeat_n(model.cfg.null_class(), classes.len()));
        }
        let caches = use_cache.then(|| model.new_caches(rows.len()));
        Ok(Self {
            model,
            classes: classes.to_vec(),
            rows,
            caches,
            tokens: vec![Vec::new(); classes.len()],
            use_cfg,
            last_cond: Vec::new(),
        })
    }

    /// Number of tokens sampled so far.
    pub fn steps(&self) -> usize {
        self.tokens[0].len()
    }

    /// Cached positions per layer, if caching.
    pub fn cache_len(&self) -> Option<usize> {
        self.caches.as_ref().map(|c| c[0].len())
    }

    pub fn caches(&self) -> Option<&[LayerKv<T>]> {
        self.caches.as_deref()
    }

    /// Conditional logits of the most recent step, one row per sample.
    pub fn last_logits(&self) -> &[Vec<T>] {
        &self.last_cond
    }

    /// Logits `[rows, vocab]` for the next position of every row.
    fn next_logits(&mut self) -> Result<Vec<Vec<T>>> {
        let t = self.steps();
        let v = self.model.cfg.vocab;
        let mut g = Graph::new();
        let p = self.model.params.bind_frozen(&mut g)?;
        let row_tokens = |r: usize| &self.tokens[r % self.classes.len()];
        let logits = match self.caches.as_mut() {
            Some(caches) => {
                if caches.iter().any(|c| c.len() != t) {
                    return Err(Error::CacheDesync { cached: caches[0].len(), expected: t });
                }
                let fed: Vec<usize> = if t == 0 {
                    Vec::new()
                } else {
                    (0..self.rows.len()).map(|r| self.tokens[r % self.classes.len()][t - 1]).collect()
                };
                self.model.forward_slots(&mut g, &p, &self.rows, &fed, t, Some(caches))?
            }
            None => {
                let fed: Vec<usize> = (0..self.rows.len()).flat_map(|r| row_tokens(r).iter().copied()).collect();
                self.model.forward_slots(&mut g, &p, &self.rows, &fed, 0, None)?
            }
        };
        let data = g.value(logits).data();
        let n = data.len() / (self.rows.len() * v);
        Ok((0..self.rows.len()).map(|r| data[(r * n + n - 1) * v..(r * n + n) * v].to_vec()).collect())
    }

    /// Sample the next token of every image; returns them in class order.
    pub fn step(&mut self, cfg: &SamplingConfig, rng: &mut StreamRng) -> Result<Vec<usize>> {
        let total = self.model.cfg.seq_len();
        let t = self.steps();
        if t >= total {
            return Err(Error::InvalidArgument(format!("all {total} tokens already sampled")));
        }
        let logits = self.next_logits()?;
        let n = self.classes.len();
        let g = if self.use_cfg { cfg_schedule(t, total, cfg.guidance_scale, cfg.scaler_power) } else { 1.0 };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let guided = if self.use_cfg {
                cfg_combine(&logits[i], &logits[n + i], g)?
            } else {
                logits[i].iter().map(|x| x.as_f64()).collect()
            };
            let tok = sample_logits(&guided, cfg.temperature, rng);
            self.tokens[i].push(tok);
            out.push(tok);
        }
        self.last_cond = logits.into_iter().take(n).collect();
        Ok(out)
    }

    pub fn finish(self) -> Vec<TokenSequence> {
        self.classes.into_iter().zip(self.tokens).map(|(class_id, tokens)| TokenSequence { class_id, tokens }).collect()
    }
}

/// Sample one full sequence per class id.
pub fn generate<T: Float>(model: &ArModel<T>, classes: &[usize], cfg: &SamplingConfig, seed: u64, use_cache: bool) -> Result<Vec<TokenSequence>> {
    cfg.validate()?;
    let mut rng = seeded(seed, stream::SAMPLE);
    let mut session = Session::new(model, classes, cfg.use_cfg, use_cache)?;
    for _ in 0..model.cfg.seq_len() {
        session.step(cfg, &mut rng)?;
    }
    Ok(session.finish())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchResult {
    pub seq_len: usize,
    pub batch: usize,
    pub cached_s: f64,
    pub uncached_s: f64,
    pub speedup: f64,
    /// Both paths produced the same tokens.
    pub identical: bool,
}

pub const BENCH_HEADER: &str = "seq_len,batch,cached_s,uncached_s,speedup";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.seq_len, self.batch, self.cached_s, self.uncached_s, self.speedup)
    }
}

/// Wall-clock time of generating `batch` sequences with and without the cache.
pub fn bench_cache<T: Float>(model: &ArModel<T>, batch: usize, cfg: &SamplingConfig, seed: u64) -> Result<BenchResult> {
    let classes: Vec<usize> = (0..batch).map(|i| i % model.cfg.classes).collect();
    let t0 = Instant::now();
    let cached = generate(model, &classes, cfg, seed, true)?;
    let cached_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let uncached = generate(model, &classes, cfg, seed, false)?;
    let uncached_s = t1.elapsed().as_secs_f64();
    Ok(BenchResult {
        seq_len: model.cfg.seq_len(),
        batch,
        cached_s,
        uncached_s,
        speedup: uncached_s / cached_s.max(f64::MIN_POSITIVE),
        identical: cached == uncached,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cfg_schedule(0, 10, 8.0, 1.4), 1.0);
        assert!((cfg_schedule(9, 10, 8.0, 1.4) - 8.0).abs() < 1e-9);
        assert!((cfg_schedule(5, 11, 5.0, 1.0) - 3.0).abs() < 1e-9);
        assert_eq!(cfg_schedule(0, 1, 4.0, 0.6), 4.0);
    }

    #[test]
    fn combine_identities() {
        let c = [0.1f32, -3.7, 2.25];
        let u = [1.5f32, 0.3, -0.9];
        let g1 = cfg_combine(&c, &u, 1.0).unwrap();
        assert!(g1.iter().zip(&c).all(|(a, &b)| *a == b as f64));
        let g0 = cfg_combine(&c, &u, 0.0).unwrap();
        assert!(g0.iter().zip(&u).all(|(a, &b)| *a == b as f64));
        assert_eq!(cfg_combine(&[1.0f64, 2.0], &[0.0, 0.0], 2.0).unwrap(), vec![2.0, 4.0]);
        assert!(cfg_combine(&[1.0f64], &[0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let mut rng = seeded(1, 0);
        for _ in 0..50 {
            assert_eq!(sample_logits(&[0.1, 2.0, 1.9], 1e-9, &mut rng), 1);
        }
    }

    #[test]
    fn inverse_cdf_frequencies_follow_softmax() {
        let logits = [0.0, 1.0, 2.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let mut rng = seeded(5, 0);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_logits(&logits, 1.0, &mut rng)] += 1;
        }
        for i in 0..3 {
            let p = logits[i].exp() / z;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[i] as f64 / n as f64 - p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let mut rng = seeded(9, 0);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..16).map(|_| unit(&mut rng) * 6.0 - 3.0).collect();
            let e: Vec<f64> = [0.5, 0.95, 1.0, 2.0].iter().map(|&t| entropy(&logits, t)).collect();
            assert!(e.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{e:?}");
        }
    }

    #[test]
    fn invalid_sampling_configs_are_rejected() {
        assert!(SamplingConfig { temperature: 0.0, ..SamplingConfig::unguided() }.validate().is_err());
        assert!(SamplingConfig::guided(0.5, 1.0).validate().is_err());
        SamplingConfig::guided(8.0, 1.4).validate().unwrap();
    }
}
