use atok_autodiff::{Float, Tensor};

use crate::error::{Error, Result};

/// Neighbour offsets `(dr, dc)` that precede a token in raster order, and their mirror images.
const CAUSAL: [(isize, isize); 4] = [(-1, -1), (-1, 0), (-1, 1), (0, -1)];
const ANTI: [(isize, isize); 4] = [(1, 1), (1, 0), (1, -1), (0, 1)];

pub type Grid3 = [[f64; 3]; 3];

/// Mean 3x3 local attention pattern around grid tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetryReport {
    /// `grid[dr + 1][dc + 1]`: mean share of a token's local-window attention going to offset `(dr, dc)`.
    pub mean: Grid3,
    pub per_head: Vec<Grid3>,
    /// Mass on up-left, up, up-right and left divided by mass on all eight neighbours.
    pub causal_share: f64,
}

/// Which attention layers to average over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelect {
    Last,
    All,
    Indices(Vec<usize>),
}

fn cell(sums: &mut [Vec<f64>], dr: isize, dc: isize) -> &mut Vec<f64> {
    &mut sums[((dr + 1) * 3 + dc + 1) as usize]
}

/// Sum of a multiset in sorted order, so equal multisets give bit-equal sums.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn finish(sums: Vec<Vec<f64>>) -> Grid3 {
    let mut g = [[0.0; 3]; 3];
    for (i, c) in sums.into_iter().enumerate() {
        let n = c.len().max(1) as f64;
        g[i / 3][i % 3] = sorted_sum(c) / n;
    }
    g
}

pub fn causal_share(grid: &Grid3) -> f64 {
    let at = |(dr, dc): (isize, isize)| grid[(dr + 1) as usize][(dc + 1) as usize];
    let c = CAUSAL.iter().fold(0.0, |s, &o| s + at(o));
    let a = ANTI.iter().fold(0.0, |s, &o| s + at(o));
    if c + a > 0.0 {
        c / (c + a)
    } else {
        0.5
    }
}

/// Local attention statistics of grid tokens.
///
/// `layers` are `[batch, heads, slots, slots]` maps; grid token `(r, c)` sits at slot
/// `offset + r * grid_w + c`. Each token's weights to its in-bounds 3x3 window (itself included)
/// are renormalised to sum to one before averaging over tokens, images, layers and heads.
pub fn attention_asymmetry<T: Float>(
    layers: &[Tensor<T>],
    offset: usize,
    grid_h: usize,
    grid_w: usize,
    select: &LayerSelect,
) -> Result<AsymmetryReport> {
    if grid_h < 3 || grid_w < 3 {
        return Err(Error::InvalidArgument(format!("grid {grid_h}x{grid_w} is smaller than 3x3")));
    }
    let chosen: Vec<&Tensor<T>> = match select {
        LayerSelect::Last => layers.last().into_iter().collect(),
        LayerSelect::All => layers.iter().collect(),
        LayerSelect::Indices(ix) => ix
            .iter()
            .map(|&i| layers.get(i).ok_or_else(|| Error::InvalidArgument(format!("layer {i} out of range"))))
            .collect::<Result<_>>()?,
    };
    if chosen.is_empty() {
        return Err(Error::InvalidArgument("no attention layers selected".into()));
    }
    let s0 = chosen[0].shape().to_vec();
    if s0.len() != 4 || s0[2] != s0[3] || offset + grid_h * grid_w > s0[2] {
        return Err(Error::InvalidArgument(format!("attention maps {s0:?} do not hold a {grid_h}x{grid_w} grid at {offset}")));
    }
    let (batch, heads, slots) = (s0[0], s0[1], s0[2]);
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); 9];
    let mut per: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); 9]; heads];
    for t in &chosen {
        if t.shape() != s0.as_slice() {
            return Err(Error::InvalidArgument("attention layers differ in shape".into()));
        }
        let d = t.data();
        for b in 0..batch {
            for h in 0..heads {
                for r in 0..grid_h {
                    for c in 0..grid_w {
                        let q = offset + r * grid_w + c;
                        let row = &d[((b * heads + h) * slots + q) * slots..][..slots];
                        let mut window = [[None; 3]; 3];
                        let mut norm = 0.0;
                        for dr in -1isize..=1 {
                            for dc in -1isize..=1 {
                                let (rr, cc) = (r as isize + dr, c as isize + dc);
                                if rr < 0 || cc < 0 || rr >= grid_h as isize || cc >= grid_w as isize {
                                    continue;
                                }
                                let w = row[offset + rr as usize * grid_w + cc as usize].as_f64();
                                norm += w;
                                window[(dr + 1) as usize][(dc + 1) as usize] = Some(w);
                            }
                        }
                        for dr in -1isize..=1 {
                            for dc in -1isize..=1 {
                                let v = match window[(dr + 1) as usize][(dc + 1) as usize] {
                                    Some(w) if norm > 0.0 => w / norm,
                                    _ => 0.0,
                                };
                                cell(&mut all, dr, dc).push(v);
                                cell(&mut per[h], dr, dc).push(v);
                            }
                        }
                    }
                }
            }
        }
    }
    let mean = finish(all);
    Ok(AsymmetryReport { causal_share: causal_share(&mean), mean, per_head: per.into_iter().map(finish).collect() })
}
