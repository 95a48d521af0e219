//! Convolution variants sharing one calling convention.
//!
//! * traditional: fixed kernel and bias;
//! * dynamic: a kernel bank mixed by convex weights predicted from the input
//!   through a squeeze-and-excitation head;
//! * tunable: the same bank mixed by `α = W·ω + b`, where `ω` are the
//!   interactive parameters supplied with every forward pass.
//!
//! Parameter containers are generic over their slot type `V`: the model
//! stores indices into its flat parameter list, a bound forward pass maps
//! those to graph variables, and analysis code maps them to borrowed tensors.

mod model;

pub use model::{build_backbone, Model, ModelConfig, Param, Variant};

use crate::autodiff::{combine, concat_batch, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, ConvGeom, Shape, Tensor};

/// `p` kernels `[d,c,k,k]` and `p` biases `[d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<V> {
    pub kernels: Vec<V>,
    pub biases: Vec<V>,
}

impl<V> KernelBank<V> {
    pub fn p(&self) -> usize {
        self.kernels.len()
    }
}

/// Square affine map `p → p`; its output is used without any activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMapper<V> {
    /// `[p,p,1,1]`
    pub weight: V,
    /// `[p]`
    pub bias: V,
}

/// Pool → FC(c→r) → ReLU → FC(r→p) → softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeightGen<V> {
    pub reduce_weight: V,
    pub reduce_bias: V,
    pub expand_weight: V,
    pub expand_bias: V,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvLayer<V> {
    Traditional { kernel: V, bias: V },
    Dynamic { bank: KernelBank<V>, gen: SeWeightGen<V> },
    Tunable { bank: KernelBank<V>, mapper: ParamMapper<V> },
}

impl<V: Copy> KernelBank<V> {
    pub fn map<U>(&self, f: &impl Fn(V) -> U) -> KernelBank<U> {
        KernelBank {
            kernels: self.kernels.iter().map(|&v| f(v)).collect(),
            biases: self.biases.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<V: Copy> ParamMapper<V> {
    pub fn map<U>(&self, f: &impl Fn(V) -> U) -> ParamMapper<U> {
        ParamMapper {
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

impl<V: Copy> SeWeightGen<V> {
    pub fn map<U>(&self, f: &impl Fn(V) -> U) -> SeWeightGen<U> {
        SeWeightGen {
            reduce_weight: f(self.reduce_weight),
            reduce_bias: f(self.reduce_bias),
            expand_weight: f(self.expand_weight),
            expand_bias: f(self.expand_bias),
        }
    }
}

impl<V: Copy> ConvLayer<V> {
    pub fn map<U>(&self, f: &impl Fn(V) -> U) -> ConvLayer<U> {
        match self {
            ConvLayer::Traditional { kernel, bias } => ConvLayer::Traditional {
                kernel: f(*kernel),
                bias: f(*bias),
            },
            ConvLayer::Dynamic { bank, gen } => ConvLayer::Dynamic {
                bank: bank.map(f),
                gen: gen.map(f),
            },
            ConvLayer::Tunable { bank, mapper } => ConvLayer::Tunable {
                bank: bank.map(f),
                mapper: mapper.map(f),
            },
        }
    }
}

impl<'a, T: Scalar> KernelBank<&'a Tensor<T>> {
    /// `(Σ α_i k_i, Σ α_i b_i)`, accumulated in bank order.
    pub fn aggregate(&self, alpha: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        if alpha.len() != self.p() {
            return Err(Error::dim("aggregate_bank", "p", self.p(), alpha.len()));
        }
        Ok((
            Tensor::weighted_sum(alpha, &self.kernels)?,
            Tensor::weighted_sum(alpha, &self.biases)?,
        ))
    }
}

impl<'a, T: Scalar> ParamMapper<&'a Tensor<T>> {
    pub fn p(&self) -> usize {
        self.weight.shape().n
    }

    /// `W·ω + b` for a single `ω`.
    pub fn weights(&self, omega: &[T]) -> Result<Vec<T>> {
        if omega.len() != self.p() {
            return Err(Error::dim("tunable_weights", "p", self.p(), omega.len()));
        }
        Ok(conv2d(&Tensor::vector(omega), self.weight, self.bias, ConvGeom::new(1, 0))?.into_vec())
    }
}

/// Aggregated kernel and bias using row `row` of `alpha` (`[n,p,1,1]`).
pub fn aggregate_bank<'g, T: Scalar>(
    bank: &KernelBank<Var<'g, T>>,
    alpha: Var<'g, T>,
    row: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = alpha.shape();
    if s.c != bank.p() {
        return Err(Error::dim("aggregate_bank", "p", bank.p(), s.c));
    }
    Ok((
        combine(alpha, row, &bank.kernels)?,
        combine(alpha, row, &bank.biases)?,
    ))
}

/// `α = W·ω + b`; `omega` is `[1,p,1,1]` (shared) or `[n,p,1,1]` (per item).
pub fn tunable_weights<'g, T: Scalar>(mapper: &ParamMapper<Var<'g, T>>, omega: Var<'g, T>) -> Result<Var<'g, T>> {
    let p = mapper.weight.shape().n;
    let s = omega.shape();
    if s.c != p || s.h != 1 || s.w != 1 {
        return Err(Error::dim("tunable_weights", "p", p, s.c));
    }
    omega.linear(mapper.weight, mapper.bias)
}

/// Convex per-item weights `[n,p,1,1]` predicted from the input.
pub fn dynamic_weights<'g, T: Scalar>(gen: &SeWeightGen<Var<'g, T>>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let c = gen.reduce_weight.shape().c;
    if x.shape().c != c {
        return Err(Error::dim("dynamic_weights", "c", c, x.shape().c));
    }
    x.global_avg_pool()?
        .linear(gen.reduce_weight, gen.reduce_bias)?
        .relu()
        .linear(gen.expand_weight, gen.expand_bias)?
        .softmax()
}

/// Convolution with bank weights `alpha`: one aggregation when `alpha` has a
/// single row, otherwise one aggregation per batch item.
fn banked_conv<'g, T: Scalar>(
    x: Var<'g, T>,
    bank: &KernelBank<Var<'g, T>>,
    alpha: Var<'g, T>,
    geom: ConvGeom,
) -> Result<Var<'g, T>> {
    let rows = alpha.shape().n;
    let n = x.shape().n;
    if rows == 1 {
        let (k, b) = aggregate_bank(bank, alpha, 0)?;
        return x.conv2d(k, b, geom);
    }
    if rows != n {
        return Err(Error::dim("banked_conv", "n", n, rows));
    }
    let outs = (0..n)
        .map(|i| {
            let (k, b) = aggregate_bank(bank, alpha, i)?;
            x.select_batch(i)?.conv2d(k, b, geom)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_batch(&outs)
}

pub fn tunable_conv<'g, T: Scalar>(
    x: Var<'g, T>,
    omega: Var<'g, T>,
    bank: &KernelBank<Var<'g, T>>,
    mapper: &ParamMapper<Var<'g, T>>,
    geom: ConvGeom,
) -> Result<Var<'g, T>> {
    if omega.shape().c != bank.p() {
        return Err(Error::dim("tunable_conv", "p", bank.p(), omega.shape().c));
    }
    let alpha = tunable_weights(mapper, omega)?;
    banked_conv(x, bank, alpha, geom)
}

pub fn dynamic_conv<'g, T: Scalar>(
    x: Var<'g, T>,
    bank: &KernelBank<Var<'g, T>>,
    gen: &SeWeightGen<Var<'g, T>>,
    geom: ConvGeom,
) -> Result<Var<'g, T>> {
    let alpha = dynamic_weights(gen, x)?;
    banked_conv(x, bank, alpha, geom)
}

impl<'g, T: Scalar> ConvLayer<Var<'g, T>> {
    pub fn forward(&self, x: Var<'g, T>, omega: Option<Var<'g, T>>, geom: ConvGeom) -> Result<Var<'g, T>> {
        match self {
            ConvLayer::Traditional { kernel, bias } => x.conv2d(*kernel, *bias, geom),
            ConvLayer::Dynamic { bank, gen } => dynamic_conv(x, bank, gen, geom),
            ConvLayer::Tunable { bank, mapper } => {
                let omega = omega.ok_or_else(|| Error::arg("tunable_conv", "tunable layer needs omega"))?;
                tunable_conv(x, omega, bank, mapper, geom)
            }
        }
    }
}

/// `x + conv2(relu(conv1(x)))`; `omega` reaches both convolutions.
pub fn residual_block<'g, T: Scalar>(
    x: Var<'g, T>,
    omega: Option<Var<'g, T>>,
    convs: &[ConvLayer<Var<'g, T>>; 2],
    geom: ConvGeom,
) -> Result<Var<'g, T>> {
    let h = convs[0].forward(x, omega, geom)?.relu();
    let r = convs[1].forward(h, omega, geom)?;
    x.add(r)
}

/// Shape of the interactive-parameter input for `p` objectives.
pub fn omega_shape(p: usize) -> Shape {
    Shape::vector(p)
}
