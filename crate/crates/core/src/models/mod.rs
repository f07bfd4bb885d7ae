//! Feature extractor, task heads and the adversary's learnable parameters.
//!
//! Parameters live as plain [`Tensor`]s in [`ParameterSet`]/[`Head`]. To
//! differentiate, a set is bound to a tape ([`ParameterSet::bind`]) which
//! yields tape variables; the forward functions operate on those.

mod checkpoint;

pub use checkpoint::{content_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Layer widths, input first, feature output last.
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Architecture(format!("need at least an input and an output width, got {dims:?}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Architecture(format!("layer widths must be positive, got {dims:?}")));
        }
        Ok(Architecture { dims, activation })
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Entry names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.depth());
        for (i, w) in self.dims.windows(2).enumerate() {
            out.push((format!("layers.{i}.weight"), vec![w[0], w[1]]));
            out.push((format!("layers.{i}.bias"), vec![w[1]]));
        }
        out
    }
}

/// Named tensors of an MLP feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Assembles a set from tensors listed in [`Architecture::layout`] order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Architecture(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Architecture(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        let names = layout.into_iter().map(|(n, _)| n).collect();
        Ok(ParameterSet { arch, names, tensors })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let (names, tensors) = arch.layout().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).unzip();
        ParameterSet { arch, names, tensors }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Architecture(format!(
                "parameter sets differ: {:?} vs {:?}",
                self.arch.dims, other.arch.dims
            )));
        }
        Ok(())
    }

    /// Elementwise combination with a set of identical layout.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            })
            .collect();
        Ok(ParameterSet { arch: self.arch.clone(), names: self.names.clone(), tensors })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        ParameterSet {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map(|v| v * c)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Binds every tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        self.bind_frozen(tape, &vec![false; self.arch.depth()])
    }

    /// Binds layer `i` as constants wherever `frozen[i]` is set.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>, frozen: &[bool]) -> BoundParams<'t, T> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if frozen.get(i / 2).copied().unwrap_or(false) { tape.constant(t.clone()) } else { tape.leaf(t.clone()) })
            .collect();
        BoundParams { arch: self.arch.clone(), vars }
    }
}

/// A [`ParameterSet`] living on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams<'t, T> {
    arch: Architecture,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn from_vars(arch: Architecture, vars: Vec<Var<'t, T>>) -> Self {
        debug_assert_eq!(vars.len(), 2 * arch.depth());
        BoundParams { arch, vars }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn values(&self) -> ParameterSet<T> {
        let names = self.arch.layout().into_iter().map(|(n, _)| n).collect();
        ParameterSet { arch: self.arch.clone(), names, tensors: self.vars.iter().map(Var::value).collect() }
    }
}

/// Deterministic MLP initialization: weights uniform in `[-1, 1] / sqrt(fan_in)`, zero biases.
pub fn init_mlp<T: Scalar>(dims: &[usize], activation: Activation, seed: u64) -> Result<ParameterSet<T>> {
    let arch = Architecture::new(dims.to_vec(), activation)?;
    let mut rng = seed::rng(seed);
    let tensors = arch
        .layout()
        .into_iter()
        .map(|(_, shape)| {
            if shape.len() == 2 {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
                Tensor::from_parts(shape, data)
            } else {
                Tensor::zeros(&shape)
            }
        })
        .collect();
    ParameterSet::from_tensors(arch, tensors)
}

fn check_input<T: Scalar>(what: &str, x: &Var<'_, T>, expected: usize) -> Result<()> {
    let shape = x.shape();
    match shape.as_slice() {
        [_, d] if *d == expected => Ok(()),
        [_, d] => Err(Error::DimensionMismatch { what: what.to_string(), expected, got: *d }),
        _ => Err(Error::Architecture(format!("{what}: expected a (batch, dim) input, got shape {shape:?}"))),
    }
}

/// Forward pass of the extractor: the activation follows every layer,
/// including the last.
pub fn features<'t, T: Scalar>(params: &BoundParams<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    check_input("features", &x, params.arch.input_dim())?;
    let mut h = x;
    for layer in params.vars.chunks(2) {
        let z = h.matmul(layer[0])?.add(layer[1])?;
        h = match params.arch.activation {
            Activation::Tanh => z.tanh()?,
            Activation::Relu => z.relu()?,
        };
    }
    Ok(h)
}

/// Affine classification head on extractor features.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `(feature_dim, num_classes)`
    pub weight: Tensor<T>,
    /// `(num_classes)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, c], [b]) if c == b => Ok(Head { weight, bias }),
            (w, b) => Err(Error::Architecture(format!("head weight {w:?} and bias {b:?} disagree"))),
        }
    }

    /// Same initialization rule as [`init_mlp`].
    pub fn init(feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Architecture(format!("head of shape ({feature_dim}, {num_classes})")));
        }
        let mut rng = seed::rng(seed);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..feature_dim * num_classes).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Ok(Head { weight: Tensor::from_parts(vec![feature_dim, num_classes], data), bias: Tensor::zeros(&[num_classes]) })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundHead<'t, T> {
        BoundHead { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> BoundHead<'t, T> {
    pub fn vars(&self) -> [Var<'t, T>; 2] {
        [self.weight, self.bias]
    }

    pub fn values(&self) -> Head<T> {
        Head { weight: self.weight.value(), bias: self.bias.value() }
    }
}

pub fn head_logits<'t, T: Scalar>(head: &BoundHead<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
    check_input("head_logits", &features, head.weight.shape()[0])?;
    Ok(features.matmul(head.weight)?.add(head.bias)?)
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
pub fn nll<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let [rows, classes] = shape[..] else {
        return Err(Error::Architecture(format!("nll expects (batch, classes) logits, got {shape:?}")));
    };
    if labels.len() != rows {
        return Err(Error::DimensionMismatch { what: "nll labels".into(), expected: rows, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(logits.log_softmax()?.gather(labels)?.mean(0)?.neg()?)
}

/// Fraction of rows whose arg-max logit equals the label. Ties resolve to the lowest index.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = *logits.shape().last().unwrap();
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// The adversary's learnable parameters: its harmful-task head and the
/// inner-loop learning rate, stored as `exp(log_lr)` so it stays positive.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialParams<T> {
    pub head: Head<T>,
    /// Rank-0 tensor.
    pub log_lr: Tensor<T>,
}

impl<T: Scalar> AdversarialParams<T> {
    pub fn new(head: Head<T>, inner_lr: f64) -> Result<Self> {
        if !(inner_lr > 0.0 && inner_lr.is_finite()) {
            return Err(Error::Config(format!("inner learning rate must be positive, got {inner_lr}")));
        }
        Ok(AdversarialParams { head, log_lr: Tensor::scalar(T::lit(inner_lr.ln())) })
    }

    pub fn inner_lr(&self) -> T {
        self.log_lr.item().exp()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundAdversary<'t, T> {
        BoundAdversary { head: self.head.bind(tape), log_lr: tape.leaf(self.log_lr.clone()) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAdversary<'t, T> {
    pub head: BoundHead<'t, T>,
    pub log_lr: Var<'t, T>,
}

impl<'t, T: Scalar> BoundAdversary<'t, T> {
    pub fn inner_lr(&self) -> Result<Var<'t, T>> {
        Ok(self.log_lr.exp()?)
    }

    pub fn vars(&self) -> [Var<'t, T>; 3] {
        [self.head.weight, self.head.bias, self.log_lr]
    }
}
