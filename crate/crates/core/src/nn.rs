//! Parameter storage and the small dense building blocks shared by the
//! structure learner, the SEM maps and the recurrent forecaster.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};

/// Index of a parameter matrix inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter matrices. Names are `group/…` paths; the prefix before the
/// first `/` is the parameter group used by gradient checks and reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> &str {
        let name = &self.names[id.0];
        name.split('/').next().unwrap_or(name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Places every parameter on `tape` as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Fills every parameter whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                v.fill(0.0);
            }
        }
    }
}

/// Tape handles for a [`Params`] store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform initialisation.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Row-wise affine map `act(x W + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}/weight"), glorot(rng, fan_in, fan_out));
        let bias = params.add(format!("{name}/bias"), Array2::zeros((1, fan_out)));
        Dense {
            weight,
            bias,
            activation,
        }
    }

    /// Builds a layer from explicit weight (`fan_in × fan_out`) and bias values.
    pub fn from_values(
        params: &mut Params,
        name: &str,
        weight: Array2<f64>,
        bias: Array2<f64>,
        activation: Activation,
    ) -> Self {
        assert_eq!(bias.dim(), (1, weight.ncols()));
        let weight = params.add(format!("{name}/weight"), weight);
        let bias = params.add(format!("{name}/bias"), bias);
        Dense {
            weight,
            bias,
            activation,
        }
    }

    pub fn in_width(&self, params: &Params) -> usize {
        params.get(self.weight).nrows()
    }

    pub fn out_width(&self, params: &Params) -> usize {
        params.get(self.weight).ncols()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let z = tape.matmul(x, bound.var(self.weight));
        let z = tape.add_row(z, bound.var(self.bias));
        self.activation.apply(tape, z)
    }
}

/// A stack of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// An MLP `widths[0] → … → widths[last]`; hidden layers use `hidden`,
    /// the final layer uses `output`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                Dense::new(params, &format!("{name}/layer{i}"), w[0], w[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    /// The empty stack: the identity map.
    pub fn identity() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(tape, bound, h))
    }
}
