//! Raster-order patch extraction on plain tensors and on the graph.

use atok_autodiff::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

fn check(h: usize, w: usize, f: usize) -> Result<(usize, usize)> {
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} is not divisible into {f}x{f} patches")));
    }
    Ok((h / f, w / f))
}

/// `[h, w, c] -> [(h/f) * (w/f), f * f * c]`, patches in raster order, each flattened channel-last.
pub fn patchify<T: Float>(image: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("patchify expects [h, w, c], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = check(h, w, f)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..f {
                let row = ((pr * f + y) * w + pc * f) * c;
                out.extend_from_slice(&src[row..row + f * c]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, f * f * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(patches: &Tensor<T>, h: usize, w: usize, f: usize) -> Result<Tensor<T>> {
    let (gh, gw) = check(h, w, f)?;
    let s = patches.shape();
    if s.len() != 2 || s[0] != gh * gw || s[1] % (f * f) != 0 {
        return Err(Error::InvalidArgument(format!("{s:?} patches do not tile a {h}x{w} image with patch {f}")));
    }
    let c = s[1] / (f * f);
    let src = patches.data();
    let mut out = vec![T::zero(); h * w * c];
    for pr in 0..gh {
        for pc in 0..gw {
            let p = &src[(pr * gw + pc) * f * f * c..][..f * f * c];
            for y in 0..f {
                let row = ((pr * f + y) * w + pc * f) * c;
                out[row..row + f * c].copy_from_slice(&p[y * f * c..(y + 1) * f * c]);
            }
        }
    }
    Ok(Tensor::new(vec![h, w, c], out)?)
}

/// Graph version of [`patchify`] over a batch: `[b, h, w, c] -> [b, H*W, f*f*c]`.
pub fn patchify_var<T: Float>(g: &mut Graph<T>, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!("batched patchify expects [b, h, w, c], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = check(h, w, f)?;
    let y = g.reshape(x, &[b, gh, f, gw, f, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(y, &[b, gh * gw, f * f * c])?)
}

/// Graph version of [`unpatchify`] over a batch: `[b, H*W, f*f*c] -> [b, h, w, c]`.
pub fn unpatchify_var<T: Float>(g: &mut Graph<T>, x: Var, h: usize, w: usize, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (gh, gw) = check(h, w, f)?;
    if s.len() != 3 || s[1] != gh * gw || s[2] % (f * f) != 0 {
        return Err(Error::InvalidArgument(format!("{s:?} patches do not tile a {h}x{w} image with patch {f}")));
    }
    let (b, c) = (s[0], s[2] / (f * f));
    let y = g.reshape(x, &[b, gh, gw, f, f, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(y, &[b, h, w, c])?)
}
