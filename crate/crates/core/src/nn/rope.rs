//! Rotary position embeddings with per-slot 1D or 2D coordinates.

use std::sync::Arc;

use atok_autodiff::{Float, Graph, Var};

use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Coordinate of one sequence slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopePos {
    /// Left unrotated.
    None,
    /// Every rotary pair keyed to one coordinate.
    OneD(usize),
    /// First half of the pairs keyed to the row, second half to the column.
    TwoD { row: usize, col: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub positions: Vec<RopePos>,
}

impl RopeConfig {
    pub fn new(head_dim: usize, positions: Vec<RopePos>) -> Result<Self> {
        let cfg = Self { head_dim, base: DEFAULT_ROPE_BASE, positions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn one_d(head_dim: usize, coords: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(head_dim, coords.into_iter().map(RopePos::OneD).collect())
    }

    pub fn two_d(head_dim: usize, coords: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(head_dim, coords.into_iter().map(|(row, col)| RopePos::TwoD { row, col }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary head_dim must be even and positive, got {}", self.head_dim)));
        }
        let two_d = self.positions.iter().any(|p| matches!(p, RopePos::TwoD { .. }));
        if two_d && self.head_dim % 4 != 0 {
            return Err(Error::Config(format!("2D rotary embedding needs head_dim divisible by 4, got {}", self.head_dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self { head_dim: self.head_dim, base: self.base, positions: self.positions[start..start + len].to_vec() }
    }

    /// Rotation angle for every `(slot, pair)`, row-major.
    pub fn angles(&self) -> Vec<f64> {
        let half = self.head_dim / 2;
        let quarter = half / 2;
        let freq = |j: usize, d_rot: usize| self.base.powf(-2.0 * j as f64 / d_rot as f64);
        let mut out = Vec::with_capacity(self.positions.len() * half);
        for pos in &self.positions {
            for j in 0..half {
                let a = match *pos {
                    RopePos::None => 0.0,
                    RopePos::OneD(p) => p as f64 * freq(j, self.head_dim),
                    RopePos::TwoD { row, .. } if j < quarter => row as f64 * freq(j, half),
                    RopePos::TwoD { col, .. } => col as f64 * freq(j - quarter, half),
                };
                out.push(a);
            }
        }
        out
    }

    pub fn table<T: Float>(&self) -> RopeTable<T> {
        let angles = self.angles();
        RopeTable {
            len: self.positions.len(),
            cos: angles.iter().map(|a| T::from_f64(a.cos())).collect(),
            sin: angles.iter().map(|a| T::from_f64(a.sin())).collect(),
        }
    }
}

/// Precomputed cosines and sines for one position map.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub len: usize,
    pub cos: Arc<[T]>,
    pub sin: Arc<[T]>,
}

/// Rotate `x: [..., seq, head_dim]` by the table's angles.
pub fn apply_rope<T: Float>(g: &mut Graph<T>, x: Var, table: &RopeTable<T>) -> Result<Var> {
    let shape = g.shape(x);
    let seq = shape[shape.len().saturating_sub(2)];
    if shape.len() < 2 || seq != table.len {
        return Err(Error::InvalidArgument(format!(
            "rotary table covers {} positions but input has shape {:?}",
            table.len, shape
        )));
    }
    Ok(g.rope(x, table.cos.clone(), table.sin.clone())?)
}
