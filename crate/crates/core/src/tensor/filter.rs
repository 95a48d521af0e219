//! Fixed (non-learned) spatial filtering used by the degradation pipeline and
//! the sharpening target. Boundaries are mirrored, so constant images are
//! exact fixed points of any normalised kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Shape, Tensor};

/// Discrete isotropic Gaussian on the integer grid centred at 0, normalised
/// after sampling so the entries sum to one.
pub fn gaussian_kernel<T: Scalar>(size: usize, sigma: f64) -> Result<Tensor<T>> {
    const OP: &str = "gaussian_kernel";
    if size % 2 == 0 {
        return Err(Error::arg(OP, format!("size must be odd, got {size}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(OP, format!("sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as i64;
    let denom = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (-r..=r)
        .flat_map(|u| (-r..=r).map(move |v| (-((u * u + v * v) as f64) / denom).exp()))
        .collect();
    let total: f64 = raw.iter().sum();
    Tensor::from_vec(
        Shape::new(1, 1, size, size),
        raw.into_iter().map(|v| T::of(v / total)).collect(),
    )
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Correlates every channel of `x` with the single-plane kernel `g`
/// (`[1,1,k,k]`), mirroring at the borders (`a b c | b a`).
pub fn filter2d_reflect<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "filter2d";
    let gs = g.shape();
    if gs.n != 1 || gs.c != 1 {
        return Err(Error::arg(OP, format!("kernel must be single-plane, got {gs:?}")));
    }
    if gs.h != gs.w || gs.h % 2 == 0 {
        return Err(Error::arg(OP, format!("kernel must be square and odd, got {gs:?}")));
    }
    let s = x.shape();
    let r = (gs.h / 2) as isize;
    let k = gs.h;
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    let xs = x.data();
    let gd = g.data();
    for (pi, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        let src = &xs[pi * plane..(pi + 1) * plane];
        for i in 0..s.h {
            for j in 0..s.w {
                let mut acc = T::zero();
                for u in 0..k {
                    let yy = reflect(i as isize + u as isize - r, s.h);
                    let row = &src[yy * s.w..(yy + 1) * s.w];
                    for v in 0..k {
                        let xx = reflect(j as isize + v as isize - r, s.w);
                        acc += gd[u * k + v] * row[xx];
                    }
                }
                dst[i * s.w + j] = acc;
            }
        }
    }
    Ok(out)
}

/// `x − g⊛x` with mirrored borders.
pub fn high_pass<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    x.sub(&filter2d_reflect(x, g)?)
}
