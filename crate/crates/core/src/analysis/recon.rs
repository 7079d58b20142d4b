use atok_autodiff::{Float, Tensor};

use crate::error::{Error, Result};

/// Pixel MSE over the first `patch` pixel rows and over the remaining rows, pooled over images.
pub fn first_row_error<T: Float>(recs: &[Tensor<T>], targets: &[Tensor<T>], patch: usize) -> Result<(f64, f64)> {
    if recs.len() != targets.len() || recs.is_empty() {
        return Err(Error::InvalidArgument("reconstructions and targets must pair up".into()));
    }
    let (mut first, mut nf, mut rest, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for (a, b) in recs.iter().zip(targets) {
        let s = b.shape();
        if a.shape() != s || s.len() != 3 || patch == 0 || patch > s[0] {
            return Err(Error::InvalidArgument(format!("shape {:?} vs {:?} with patch {patch}", a.shape(), s)));
        }
        let split = patch * s[1] * s[2];
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let e = x.as_f64() - y.as_f64();
            if i < split {
                first += e * e;
                nf += 1;
            } else {
                rest += e * e;
                nr += 1;
            }
        }
    }
    Ok((first / nf as f64, if nr > 0 { rest / nr as f64 } else { 0.0 }))
}

/// Mean pixel MSE over image pairs.
pub fn recon_mse<T: Float>(recs: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<f64> {
    if recs.len() != targets.len() || recs.is_empty() {
        return Err(Error::InvalidArgument("reconstructions and targets must pair up".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in recs.iter().zip(targets) {
        if a.shape() != b.shape() {
            return Err(Error::InvalidArgument(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            let e = x.as_f64() - y.as_f64();
            sum += e * e;
        }
        n += a.len();
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_reconstruction_has_no_error() {
        let x = Tensor::from_fn(&[8, 8, 3], |i| i as f64 / 192.0);
        assert_eq!(first_row_error(&[x.clone()], &[x.clone()], 4).unwrap(), (0.0, 0.0));
        assert_eq!(recon_mse(&[x.clone()], &[x]).unwrap(), 0.0);
    }

    #[test]
    fn errors_land_in_the_right_band() {
        let t = Tensor::<f64>::zeros(&[8, 8, 3]);
        let r = Tensor::from_fn(&[8, 8, 3], |i| if i < 4 * 8 * 3 { 1.0 } else { 0.5 });
        let (a, b) = first_row_error(&[r.clone()], &[t.clone()], 4).unwrap();
        assert_eq!((a, b), (1.0, 0.25));
        assert_eq!(recon_mse(&[r], &[t]).unwrap(), 0.625);
    }
}
