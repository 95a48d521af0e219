use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Shape, Tensor};

use super::{residual_block, ConvLayer, KernelBank, ParamMapper, SeWeightGen};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Traditional,
    Dynamic,
    Tunable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    /// Number of objectives; also the bank size of dynamic/tunable convs.
    pub p: usize,
    pub variant: Variant,
    #[serde(default = "yes")]
    pub long_skip: bool,
    /// One mapper for every tunable conv instead of one per layer.
    #[serde(default)]
    pub shared_mapper: bool,
    #[serde(default = "rgb")]
    pub in_channels: usize,
}

fn yes() -> bool {
    true
}

fn rgb() -> usize {
    3
}

impl ModelConfig {
    pub fn new(blocks: usize, channels: usize, kernel_size: usize, p: usize, variant: Variant) -> Self {
        ModelConfig {
            blocks,
            channels,
            kernel_size,
            p,
            variant,
            long_skip: true,
            shared_mapper: false,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.blocks < 1 {
            bad.push(format!("blocks must be >= 1 (got {})", self.blocks));
        }
        if self.channels < 1 {
            bad.push(format!("channels must be >= 1 (got {})", self.channels));
        }
        if self.kernel_size % 2 == 0 {
            bad.push(format!("kernel_size must be odd (got {})", self.kernel_size));
        }
        if self.p < 1 {
            bad.push(format!("p must be >= 1 (got {})", self.p));
        }
        if self.in_channels < 1 {
            bad.push(format!("in_channels must be >= 1 (got {})", self.in_channels));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Hidden width of the squeeze-and-excitation head for `c` input channels.
    pub fn se_hidden(c: usize) -> usize {
        (c / 16).max(4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Residual backbone: head conv, residual blocks, optional long skip from the
/// head output to the block output, tail conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    head: ConvLayer<usize>,
    blocks: Vec<[ConvLayer<usize>; 2]>,
    tail: ConvLayer<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Zero,
    Identity,
}

struct Layout {
    specs: Vec<(String, Shape, Init)>,
    head: ConvLayer<usize>,
    blocks: Vec<[ConvLayer<usize>; 2]>,
    tail: ConvLayer<usize>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Shape, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn build(config: &ModelConfig) -> Layout {
        let mut l = Layout {
            specs: Vec::new(),
            head: ConvLayer::Traditional { kernel: 0, bias: 0 },
            blocks: Vec::new(),
            tail: ConvLayer::Traditional { kernel: 0, bias: 0 },
        };
        let shared = (config.variant == Variant::Tunable && config.shared_mapper).then(|| l.mapper("mapper", config.p));
        let ch = config.channels;
        l.head = l.conv("head", config, config.in_channels, ch, shared.as_ref());
        for b in 0..config.blocks {
            let c1 = l.conv(&format!("blocks.{b}.conv1"), config, ch, ch, shared.as_ref());
            let c2 = l.conv(&format!("blocks.{b}.conv2"), config, ch, ch, shared.as_ref());
            l.blocks.push([c1, c2]);
        }
        l.tail = l.conv("tail", config, ch, config.in_channels, shared.as_ref());
        l
    }

    fn mapper(&mut self, prefix: &str, p: usize) -> ParamMapper<usize> {
        ParamMapper {
            weight: self.add(format!("{prefix}.weight"), Shape::new(p, p, 1, 1), Init::Identity),
            bias: self.add(format!("{prefix}.bias"), Shape::vector(p), Init::Zero),
        }
    }

    fn bank(&mut self, prefix: &str, p: usize, c: usize, d: usize, k: usize) -> KernelBank<usize> {
        let mut bank = KernelBank {
            kernels: Vec::new(),
            biases: Vec::new(),
        };
        for i in 0..p {
            bank.kernels
                .push(self.add(format!("{prefix}.bank.{i}.kernel"), Shape::new(d, c, k, k), Init::FanIn(c * k * k)));
            bank.biases
                .push(self.add(format!("{prefix}.bank.{i}.bias"), Shape::vector(d), Init::Zero));
        }
        bank
    }

    fn conv(
        &mut self,
        prefix: &str,
        config: &ModelConfig,
        c: usize,
        d: usize,
        shared: Option<&ParamMapper<usize>>,
    ) -> ConvLayer<usize> {
        let k = config.kernel_size;
        match config.variant {
            Variant::Traditional => ConvLayer::Traditional {
                kernel: self.add(format!("{prefix}.kernel"), Shape::new(d, c, k, k), Init::FanIn(c * k * k)),
                bias: self.add(format!("{prefix}.bias"), Shape::vector(d), Init::Zero),
            },
            Variant::Tunable => {
                let bank = self.bank(prefix, config.p, c, d, k);
                let mapper = match shared {
                    Some(m) => m.clone(),
                    None => self.mapper(&format!("{prefix}.mapper"), config.p),
                };
                ConvLayer::Tunable { bank, mapper }
            }
            Variant::Dynamic => {
                let bank = self.bank(prefix, config.p, c, d, k);
                let r = ModelConfig::se_hidden(c);
                let p = config.p;
                let gen = SeWeightGen {
                    reduce_weight: self.add(format!("{prefix}.se.reduce.weight"), Shape::new(r, c, 1, 1), Init::FanIn(c)),
                    reduce_bias: self.add(format!("{prefix}.se.reduce.bias"), Shape::vector(r), Init::Zero),
                    expand_weight: self.add(format!("{prefix}.se.expand.weight"), Shape::new(p, r, 1, 1), Init::FanIn(r)),
                    expand_bias: self.add(format!("{prefix}.se.expand.bias"), Shape::vector(p), Init::Zero),
                };
                ConvLayer::Dynamic { bank, gen }
            }
        }
    }
}

/// Builds and initialises a backbone; identical seeds give identical weights.
pub fn build_backbone<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    config.validate()?;
    let layout = Layout::build(config);
    let params = layout
        .specs
        .iter()
        .map(|(name, shape, init)| {
            let value = match *init {
                Init::Zero => Tensor::zeros(*shape),
                Init::Identity => Tensor::from_fn(*shape, |o, i, _, _| if o == i { T::one() } else { T::zero() }),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(*shape, |_, _, _, _| T::of(rng.uniform_in(-bound, bound)))
                }
            };
            Param {
                name: name.clone(),
                value,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
        head: layout.head,
        blocks: layout.blocks,
        tail: layout.tail,
    })
}

impl<T: Scalar> Model<T> {
    /// Reassembles a model from named arrays in layout order.
    pub fn from_params(config: &ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(config);
        if layout.specs.len() != params.len() {
            return Err(Error::dim("model", "parameter count", layout.specs.len(), params.len()));
        }
        for ((name, shape, _), p) in layout.specs.iter().zip(&params) {
            if *name != p.name {
                return Err(Error::arg("model", format!("expected parameter {name}, found {}", p.name)));
            }
            shape.expect_eq(&p.value.shape(), "model")?;
        }
        Ok(Model {
            config: config.clone(),
            params,
            head: layout.head,
            blocks: layout.blocks,
            tail: layout.tail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            head: self.head.clone(),
            blocks: self.blocks.clone(),
            tail: self.tail.clone(),
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::same(self.config.kernel_size)
    }

    /// Every convolution in forward order with a readable name.
    pub fn conv_layers(&self) -> Vec<(String, &ConvLayer<usize>)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (b, [c1, c2]) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.conv1"), c1));
            out.push((format!("blocks.{b}.conv2"), c2));
        }
        out.push(("tail".to_string(), &self.tail));
        out
    }

    /// Tunable convolutions as borrowed bank/mapper views.
    #[allow(clippy::type_complexity)]
    pub fn tunable_layers(&self) -> Vec<(String, KernelBank<&Tensor<T>>, ParamMapper<&Tensor<T>>)> {
        let get = |i: usize| &self.params[i].value;
        self.conv_layers()
            .into_iter()
            .filter_map(|(name, layer)| match layer {
                ConvLayer::Tunable { bank, mapper } => Some((name, bank.map(&get), mapper.map(&get))),
                _ => None,
            })
            .collect()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Forward pass over bound parameters. `omega` is required by tunable
    /// models and ignored otherwise.
    pub fn forward<'g>(&self, bound: &[Var<'g, T>], x: Var<'g, T>, omega: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        if bound.len() != self.params.len() {
            return Err(Error::dim("forward", "parameter count", self.params.len(), bound.len()));
        }
        let xs = x.shape();
        if xs.c != self.config.in_channels {
            return Err(Error::dim("forward", "c", self.config.in_channels, xs.c));
        }
        let omega = match (self.config.variant, omega) {
            (Variant::Tunable, None) => return Err(Error::arg("forward", "tunable model needs omega")),
            (Variant::Tunable, Some(w)) => {
                let s = w.shape();
                if s.c != self.config.p {
                    return Err(Error::dim("forward", "p", self.config.p, s.c));
                }
                Some(w)
            }
            _ => None,
        };
        let get = |i: usize| bound[i];
        let geom = self.geom();
        let head = self.head.map(&get).forward(x, omega, geom)?;
        let mut r = head;
        for block in &self.blocks {
            let convs = [block[0].map(&get), block[1].map(&get)];
            r = residual_block(r, omega, &convs, geom)?;
        }
        if self.config.long_skip {
            r = r.add(head)?;
        }
        self.tail.map(&get).forward(r, omega, geom)
    }

    /// Graph-free inference with one shared `ω`.
    pub fn infer(&self, x: &Tensor<T>, omega: &[T]) -> Result<Tensor<T>> {
        if self.config.variant == Variant::Tunable && omega.len() != self.config.p {
            return Err(Error::dim("infer", "p", self.config.p, omega.len()));
        }
        let graph = Graph::new();
        let bound = self.bind(&graph, false);
        let xv = graph.constant(x.clone());
        let w = graph.constant(Tensor::vector(omega));
        Ok(self.forward(&bound, xv, Some(w))?.value())
    }
}
