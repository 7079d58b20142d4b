//! Raw buffer kernels shared by forward and backward rules.

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::tensor::numel;

/// Trailing-axis broadcast of two shapes (size-1 axes expand).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `input` viewed at `out` shape; broadcast axes get stride 0.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                base[i - off]
            }
        })
        .collect()
}

/// Visit every output coordinate with the matching flat offsets in two strided inputs.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    let n = numel(shape);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Elementwise binary map with broadcasting into `out_shape`.
pub fn binary<T: Float>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = numel(out_shape);
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape && is_suffix(b_shape, out_shape) {
        let nb = b.len();
        return a.iter().enumerate().map(|(i, &x)| f(x, b[i % nb])).collect();
    }
    if b_shape == out_shape && is_suffix(a_shape, out_shape) {
        let na = a.len();
        return b.iter().enumerate().map(|(i, &y)| f(a[i % na], y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![T::zero(); n];
    walk2(out_shape, &sa, &sb, |i, ia, ib| out[i] = f(a[ia], b[ib]));
    out
}

/// Sum a gradient of `out_shape` back down to a broadcast input of `in_shape`.
pub fn reduce_to<T: Float>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let n_in = numel(in_shape);
    let mut acc = vec![T::zero(); n_in];
    if is_suffix(in_shape, out_shape) {
        for chunk in grad.chunks(n_in) {
            for (a, &g) in acc.iter_mut().zip(chunk) {
                *a += g;
            }
        }
        return acc;
    }
    let sa = broadcast_strides(in_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    walk2(out_shape, &sa, &zeros, |i, ia, _| acc[ia] += grad[i]);
    acc
}

/// Materialise `x` (contiguous, `in_shape`) permuted by `axes`.
/// When `inverse` is set, scatters `x` (laid out in permuted order) back to `in_shape` order.
pub fn permute<T: Float>(x: &[T], in_shape: &[usize], axes: &[usize], inverse: bool) -> Vec<T> {
    let rank = in_shape.len();
    let in_strides = contiguous_strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); x.len()];
    if rank > 0 && axes[rank - 1] == rank - 1 {
        // innermost axis preserved: move contiguous runs
        let run = in_shape[rank - 1];
        let outer_shape = &out_shape[..rank - 1];
        let outer_src = &src_strides[..rank - 1];
        let zeros = vec![0; rank - 1];
        walk2(outer_shape, outer_src, &zeros, |i, src, _| {
            let dst = i * run;
            if inverse {
                out[src..src + run].copy_from_slice(&x[dst..dst + run]);
            } else {
                out[dst..dst + run].copy_from_slice(&x[src..src + run]);
            }
        });
        return out;
    }
    let zeros = vec![0; rank];
    walk2(&out_shape, &src_strides, &zeros, |i, src, _| {
        if inverse {
            out[src] = x[i];
        } else {
            out[i] = x[src];
        }
    });
    out
}

/// Layout of one batched matmul operand: logical `rows x cols` matrix with strides.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatLayout {
    /// Logical view of a stored row-major `[r, c]` block, optionally transposed.
    pub fn stored(r: usize, c: usize, transposed: bool) -> Self {
        if transposed {
            MatLayout { rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            MatLayout { rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        MatLayout { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c (+)= a * b` for one matrix triple described by layouts.
///
/// # Safety
/// Offsets plus layouts must stay in bounds of the slices.
pub fn gemm_into<T: Float>(
    a: &[T],
    a_off: usize,
    la: MatLayout,
    b: &[T],
    b_off: usize,
    lb: MatLayout,
    c: &mut [T],
    c_off: usize,
    lc: MatLayout,
    accumulate: bool,
) {
    debug_assert_eq!(la.cols, lb.rows);
    debug_assert_eq!(la.rows, lc.rows);
    debug_assert_eq!(lb.cols, lc.cols);
    let span = |l: MatLayout| {
        if l.rows == 0 || l.cols == 0 {
            0
        } else {
            (l.rows - 1) * l.rs as usize + (l.cols - 1) * l.cs as usize + 1
        }
    };
    assert!(a_off + span(la) <= a.len());
    assert!(b_off + span(lb) <= b.len());
    assert!(c_off + span(lc) <= c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            la.rows,
            la.cols,
            lb.cols,
            T::one(),
            a.as_ptr().add(a_off),
            la.rs,
            la.cs,
            b.as_ptr().add(b_off),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr().add(c_off),
            lc.rs,
            lc.cs,
        );
    }
}

pub fn softmax_rows<T: Float>(
    x: &[T],
    row_len: usize,
    rows_per_block: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (src, dst)) in x.chunks(row_len).zip(out.chunks_mut(row_len)).enumerate() {
        let qi = r % rows_per_block;
        let mut mx = T::neg_infinity();
        for (j, &v) in src.iter().enumerate() {
            if visible(qi, j) && v > mx {
                mx = v;
            }
        }
        let mut total = T::zero();
        for (j, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
            if visible(qi, j) {
                let e = (v - mx).exp();
                *d = e;
                total += e;
            }
        }
        let inv = T::one() / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}
