//! Parameter storage and the layers the resizer and classifier are built from.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::default_groups;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (conv/linear weights only).
    pub decay: bool,
}

/// Named, ordered parameter tensors shared by every network in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.variable(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

fn he_uniform<T: Element>(dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(dims, -bound, bound, rng)
}

/// Splits `total` channels over `parts` groups as evenly as possible, larger groups first.
pub fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// He-uniform weights, zero bias, "same" padding.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = he_uniform(vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]), false),
            kernel,
            stride,
        }
    }

    /// Weights and bias start at exactly zero.
    pub fn zeroed<T: Element>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]), false),
            kernel,
            stride: 1,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, (self.kernel - 1) / 2)
    }
}

/// Parallel convolutions with different kernel sizes, channel-concatenated.
#[derive(Clone, Debug)]
pub struct PyConv {
    pub branches: Vec<Conv>,
}

impl PyConv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernels: &[usize],
    ) -> Result<Self> {
        if kernels.is_empty() || out_ch < kernels.len() {
            return Err(Error::Config(format!(
                "{name}: cannot split {out_ch} channels over kernels {kernels:?}"
            )));
        }
        let branches = kernels
            .iter()
            .zip(split_even(out_ch, kernels.len()))
            .map(|(&k, c)| Conv::new(store, rng, &format!("{name}.k{k}"), in_ch, c, k, 1))
            .collect();
        Ok(Self { branches })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|c| c.forward(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat_channels(&outs)
    }
}

#[derive(Clone, Debug)]
pub enum ConvUnit {
    Plain(Conv),
    Pyramid(PyConv),
}

impl ConvUnit {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Plain(c) => c.forward(tape, p, x),
            ConvUnit::Pyramid(c) => c.forward(tape, p, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), false),
            groups: default_groups(channels),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p[self.gamma], p[self.beta], NORM_EPS)
    }
}

/// Kernel size and width of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub kernel_size: usize,
    pub channels: usize,
    pub groups: usize,
}

impl ResBlockSpec {
    pub fn new(kernel_size: usize, channels: usize) -> Self {
        Self {
            kernel_size,
            channels,
            groups: default_groups(channels),
        }
    }
}

/// conv → norm → relu → conv → norm, plus identity skip, then relu.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: ResBlockSpec,
    pub conv1: ConvUnit,
    pub norm1: GroupNorm,
    pub conv2: ConvUnit,
    pub norm2: GroupNorm,
}

impl ResBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, spec: ResBlockSpec) -> Self {
        let c = spec.channels;
        let conv1 = ConvUnit::Plain(Conv::new(store, rng, &format!("{name}.conv1"), c, c, spec.kernel_size, 1));
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c);
        let conv2 = ConvUnit::Plain(Conv::new(store, rng, &format!("{name}.conv2"), c, c, spec.kernel_size, 1));
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c);
        Self {
            spec,
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    /// A block whose two convolutions are pyramidal with the given kernel sets.
    pub fn pyramidal<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        spec: ResBlockSpec,
        kernels1: &[usize],
        kernels2: &[usize],
    ) -> Result<Self> {
        let c = spec.channels;
        let conv1 = ConvUnit::Pyramid(PyConv::new(store, rng, &format!("{name}.conv1"), c, c, kernels1)?);
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c);
        let conv2 = ConvUnit::Pyramid(PyConv::new(store, rng, &format!("{name}.conv2"), c, c, kernels2)?);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c);
        Ok(Self {
            spec,
            conv1,
            norm1,
            conv2,
            norm2,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.norm1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.add(h, x)?;
        Ok(tape.relu(h))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = he_uniform(vec![outputs, inputs], inputs, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]), false),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}
