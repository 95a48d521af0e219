//! 2-D convolution (cross-correlation, as in every DL framework) with zero
//! padding. `conv2d_direct` is the loop reference; the default path lowers
//! each batch item to a column matrix and runs one GEMM.

use crate::error::{Error, Result};
use crate::exec;
use crate::scalar::{gemm, Layout, Scalar};

use super::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeom { stride, padding }
    }

    /// Stride 1 with the padding that preserves spatial size for kernel `k`.
    pub const fn same(k: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: k / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

#[derive(Clone, Copy, Debug)]
struct Plan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.d, self.ho, self.wo)
    }
}

fn plan<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, geom: ConvGeom) -> Result<Plan> {
    const OP: &str = "conv2d";
    let xs = x.shape();
    let ks = kernel.shape();
    if ks.h != ks.w {
        return Err(Error::dim(OP, "kernel w", ks.h, ks.w));
    }
    if ks.h % 2 == 0 {
        return Err(Error::arg(OP, format!("kernel size must be odd, got {}", ks.h)));
    }
    if ks.c != xs.c {
        return Err(Error::dim(OP, "c", ks.c, xs.c));
    }
    if bias.len() != ks.n {
        return Err(Error::dim(OP, "bias", ks.n, bias.len()));
    }
    if geom.stride == 0 {
        return Err(Error::arg(OP, "stride must be positive"));
    }
    let k = ks.h;
    let out = |len: usize, axis: &'static str| -> Result<usize> {
        let span = len + 2 * geom.padding;
        if span < k {
            return Err(Error::dim(OP, axis, k, span));
        }
        if (span - k) % geom.stride != 0 {
            return Err(Error::arg(
                OP,
                format!("{axis}: (extent {len} + 2*{} - {k}) not divisible by stride {}", geom.padding, geom.stride),
            ));
        }
        Ok((span - k) / geom.stride + 1)
    };
    Ok(Plan {
        n: xs.n,
        c: xs.c,
        h: xs.h,
        w: xs.w,
        d: ks.n,
        k,
        ho: out(xs.h, "h")?,
        wo: out(xs.w, "w")?,
        stride: geom.stride,
        pad: geom.padding,
    })
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, geom: ConvGeom) -> Result<Tensor<T>> {
    conv2d_with(ConvAlgo::default(), x, kernel, bias, geom)
}

pub fn conv2d_with<T: Scalar>(
    algo: ConvAlgo,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    match algo {
        ConvAlgo::Direct => conv2d_direct(x, kernel, bias, geom),
        ConvAlgo::Im2col => {
            let p = plan(x, kernel, bias, geom)?;
            Ok(im2col_forward(&p, x.data(), kernel.data(), bias.data()))
        }
    }
}

/// Reference implementation: one multiply-add per (output, input channel, tap).
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let p = plan(x, kernel, bias, geom)?;
    let mut out = Tensor::zeros(p.out_shape());
    for b in 0..p.n {
        for o in 0..p.d {
            for i in 0..p.ho {
                for j in 0..p.wo {
                    let mut acc = bias.data()[o];
                    for ci in 0..p.c {
                        for u in 0..p.k {
                            let yy = (i * p.stride + u) as isize - p.pad as isize;
                            if yy < 0 || yy >= p.h as isize {
                                continue;
                            }
                            for v in 0..p.k {
                                let xx = (j * p.stride + v) as isize - p.pad as isize;
                                if xx < 0 || xx >= p.w as isize {
                                    continue;
                                }
                                acc += x.at(b, ci, yy as usize, xx as usize) * kernel.at(o, ci, u, v);
                            }
                        }
                    }
                    let idx = out.index(b, o, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Output columns `j` whose input column `j·stride + v − pad` lies inside
/// `0..w`, as a half-open range.
fn valid_cols(p: &Plan, v: usize) -> (usize, usize) {
    let s = p.stride;
    let lo = p.pad.saturating_sub(v).div_ceil(s);
    let hi = (p.w + p.pad).saturating_sub(v).div_ceil(s).min(p.wo);
    (lo.min(hi), hi)
}

/// Lowers one `[c,h,w]` item into a `[c·k·k, ho·wo]` column matrix.
fn im2col<T: Scalar>(p: &Plan, x: &[T], cols: &mut [T]) {
    let plane = p.out_plane();
    for ci in 0..p.c {
        let src = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for u in 0..p.k {
            for v in 0..p.k {
                let row = (ci * p.k + u) * p.k + v;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (j0, j1) = valid_cols(p, v);
                for i in 0..p.ho {
                    let yy = (i * p.stride + u) as isize - p.pad as isize;
                    let line = &mut dst[i * p.wo..(i + 1) * p.wo];
                    if yy < 0 || yy >= p.h as isize || j0 >= j1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[yy as usize * p.w..(yy as usize + 1) * p.w];
                    line[..j0].fill(T::zero());
                    line[j1..].fill(T::zero());
                    let x0 = j0 * p.stride + v - p.pad;
                    if p.stride == 1 {
                        line[j0..j1].copy_from_slice(&srow[x0..x0 + (j1 - j0)]);
                    } else {
                        for (t, out) in line[j0..j1].iter_mut().enumerate() {
                            *out = srow[x0 + t * p.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a `[c,h,w]` item.
fn col2im<T: Scalar>(p: &Plan, cols: &[T], dx: &mut [T]) {
    let plane = p.out_plane();
    for ci in 0..p.c {
        let dst = &mut dx[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for u in 0..p.k {
            for v in 0..p.k {
                let row = (ci * p.k + u) * p.k + v;
                let src = &cols[row * plane..(row + 1) * plane];
                let (j0, j1) = valid_cols(p, v);
                if j0 >= j1 {
                    continue;
                }
                for i in 0..p.ho {
                    let yy = (i * p.stride + u) as isize - p.pad as isize;
                    if yy < 0 || yy >= p.h as isize {
                        continue;
                    }
                    let drow = &mut dst[yy as usize * p.w..(yy as usize + 1) * p.w];
                    let line = &src[i * p.wo + j0..i * p.wo + j1];
                    let x0 = j0 * p.stride + v - p.pad;
                    if p.stride == 1 {
                        for (d, &g) in drow[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += g;
                        }
                    } else {
                        for (t, &g) in line.iter().enumerate() {
                            drow[x0 + t * p.stride] += g;
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Scalar>(p: &Plan, x: &[T], kernel: &[T], bias: &[T]) -> Tensor<T> {
    let shape = p.out_shape();
    let mut out = vec![T::zero(); shape.numel()];
    let item_in = p.c * p.h * p.w;
    let plane = p.out_plane();
    let pointwise = p.k == 1 && p.stride == 1 && p.pad == 0;
    exec::for_each_chunk(&mut out, p.d * plane, |b, dst| {
        let xb = &x[b * item_in..(b + 1) * item_in];
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        if pointwise {
            gemm(p.d, p.ckk(), plane, kernel, Layout::Normal, xb, Layout::Normal, T::one(), dst);
        } else {
            let mut cols = vec![T::zero(); p.ckk() * plane];
            im2col(p, xb, &mut cols);
            gemm(p.d, p.ckk(), plane, kernel, Layout::Normal, &cols, Layout::Normal, T::one(), dst);
        }
    });
    Tensor::from_vec(shape, out).expect("conv output shape")
}

/// Gradients of a convolution; fields are `None` when not requested.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Vector-Jacobian product of [`conv2d`] for output gradient `grad_out`.
/// Per-item partial sums for kernel and bias are reduced in batch order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeom,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let p = plan(x, kernel, bias, geom)?;
    grad_out.shape().expect_eq(&p.out_shape(), "conv2d_backward")?;
    let plane = p.out_plane();
    let ckk = p.ckk();
    let item_in = p.c * p.h * p.w;
    let item_out = p.d * plane;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());

    let per_item = exec::map_indices(p.n, |b| {
        let g = &gd[b * item_out..(b + 1) * item_out];
        let dk = want_kernel.then(|| {
            let mut cols = vec![T::zero(); ckk * plane];
            im2col(&p, &xd[b * item_in..(b + 1) * item_in], &mut cols);
            let mut dk = vec![T::zero(); p.d * ckk];
            gemm(p.d, plane, ckk, g, Layout::Normal, &cols, Layout::Transposed, T::zero(), &mut dk);
            dk
        });
        let dx = want_input.then(|| {
            let mut dcols = vec![T::zero(); ckk * plane];
            gemm(ckk, p.d, plane, kd, Layout::Transposed, g, Layout::Normal, T::zero(), &mut dcols);
            let mut dx = vec![T::zero(); item_in];
            col2im(&p, &dcols, &mut dx);
            dx
        });
        let db = want_bias.then(|| {
            g.chunks(plane)
                .map(super::pairwise_sum)
                .collect::<Vec<T>>()
        });
        (dx, dk, db)
    });

    let mut input = want_input.then(|| Vec::with_capacity(p.n * item_in));
    let mut dkernel = want_kernel.then(|| vec![T::zero(); p.d * ckk]);
    let mut dbias = want_bias.then(|| vec![T::zero(); p.d]);
    for (dx, dk, db) in per_item {
        if let (Some(acc), Some(v)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&v);
        }
        if let (Some(acc), Some(v)) = (dkernel.as_mut(), dk) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(v)) = (dbias.as_mut(), db) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    Ok(ConvGrads {
        input: input.map(|v| Tensor::from_vec(x.shape(), v).expect("dx shape")),
        kernel: dkernel.map(|v| Tensor::from_vec(kernel.shape(), v).expect("dk shape")),
        bias: dbias.map(|v| Tensor::from_vec(bias.shape(), v).expect("db shape")),
    })
}
