use atok_autodiff::{Float, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_eps() -> f64 {
    1e-6
}

impl BlockConfig {
    pub fn new(width: usize, heads: usize) -> Self {
        Self { width, heads, mlp_ratio: default_mlp_ratio(), qk_norm: false, eps: default_eps() }
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("block width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// `x @ w (+ b)` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.matrix(&format!("{name}.w"), d_in, d_out);
        let b = bias.then(|| pb.zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => g.add(y, p[b])?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize, eps: f64) -> Self {
        Self { gain: pb.ones(&format!("{name}.gain"), &[width]), eps }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        rmsnorm(g, x, p[self.gain], self.eps)
    }
}

/// `gain * x / sqrt(mean(x^2) + eps)` along the last axis.
pub fn rmsnorm<T: Float>(g: &mut Graph<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    if g.shape(x).last() == Some(&0) {
        return Err(Error::InvalidArgument("rmsnorm over zero-width input".into()));
    }
    Ok(g.rmsnorm(x, gain, eps)?)
}

/// `width -> hidden -> width` with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| Self { fc1: Linear::new(pb, "fc1", width, hidden, false), fc2: Linear::new(pb, "fc2", hidden, width, false) })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, p, h)
    }
}
