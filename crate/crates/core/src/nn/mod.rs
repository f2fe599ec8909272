//! Feed-forward networks, their input-Jacobian products and weight files.
//!
//! A [`Model`] is an ordered list of [`Layer`]s split at `feature_boundary`
//! into a feature extractor (whose output is the feature vector that gets
//! dithered) and a classifier. Both halves are exposed as [`LayerStack`]s.
//!
//! [`LayerStack::linearize`] runs one primal pass and keeps the per-layer
//! state needed to apply the Jacobian with respect to the *input*
//! (forward-mode tangent propagation, [`Linearization::jvp`]) and its
//! transpose (reverse sweep over the saved tape, [`Linearization::vjp`]).

mod layer;
mod weights;

pub use layer::{softmax, Affine, Conv2d, Layer, MaxPool2d};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC};

use layer::Cache;

use crate::error::{Error, Result};
use crate::lsqr::LinearOperator;
use crate::tensor::{RngStream, Tensor};

/// A borrowed run of consecutive layers.
#[derive(Debug, Clone, Copy)]
pub struct LayerStack<'a> {
    layers: &'a [Layer],
}

impl<'a> LayerStack<'a> {
    pub fn new(layers: &'a [Layer]) -> Self {
        LayerStack { layers }
    }

    pub fn layers(&self) -> &'a [Layer] {
        self.layers
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in self.layers {
            cur = layer.forward(&cur)?.0;
        }
        Ok(cur)
    }

    /// Evaluates the stack at `x`, recording everything the tangent and adjoint
    /// sweeps need.
    pub fn linearize(&self, x: &Tensor) -> Result<Linearization<'a>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in self.layers {
            let (y, cache) = layer.forward(activations.last().expect("nonempty"))?;
            activations.push(y);
            caches.push(cache);
        }
        Ok(Linearization {
            layers: self.layers,
            activations,
            caches,
        })
    }
}

/// The tape of one primal pass: activations and per-layer caches.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    layers: &'a [Layer],
    activations: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl Linearization<'_> {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("nonempty")
    }

    pub fn input_shape(&self) -> &[usize] {
        self.input().shape()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output().shape()
    }

    /// `J v` on flat buffers.
    pub fn jvp_flat(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input().len() {
            return Err(Error::shape(&[self.input().len()], &[v.len()]));
        }
        let mut cur = v.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            cur = layer.tangent(&self.caches[l], self.activations[l].shape(), &cur)?;
        }
        Ok(cur)
    }

    /// `J^T u` on flat buffers.
    pub fn vjp_flat(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.output().len() {
            return Err(Error::shape(&[self.output().len()], &[u.len()]));
        }
        let mut cur = u.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            cur = layer.adjoint(&self.caches[l], self.activations[l].shape(), &cur)?;
        }
        Ok(cur)
    }

    pub fn jvp(&self, v: &Tensor) -> Result<Tensor> {
        self.input().check_same_shape(v)?;
        let out = self.jvp_flat(v.data())?;
        Ok(Tensor::from_parts_unchecked(self.output_shape().to_vec(), out))
    }

    pub fn vjp(&self, u: &Tensor) -> Result<Tensor> {
        self.output().check_same_shape(u)?;
        let out = self.vjp_flat(u.data())?;
        Ok(Tensor::from_parts_unchecked(self.input_shape().to_vec(), out))
    }

    /// Reverse sweep that reports, for every trainable layer, its input and the
    /// gradient arriving at its output. Stops below the first trainable layer.
    pub fn backpropagate_params(
        &self,
        u: &[f64],
        mut visit: impl FnMut(usize, &Tensor, &[f64]) -> Result<()>,
    ) -> Result<()> {
        let Some(first) = self.layers.iter().position(Layer::has_params) else {
            return Ok(());
        };
        let mut cur = u.to_vec();
        for l in (first..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.has_params() {
                visit(l, &self.activations[l], &cur)?;
            }
            if l > first {
                cur = layer.adjoint(&self.caches[l], self.activations[l].shape(), &cur)?;
            }
        }
        Ok(())
    }
}

impl LinearOperator for Linearization<'_> {
    fn rows(&self) -> usize {
        self.output().len()
    }

    fn cols(&self) -> usize {
        self.input().len()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.jvp_flat(v).expect("dimension checked by the solver")
    }

    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        self.vjp_flat(u).expect("dimension checked by the solver")
    }
}

/// Features `a_theta` of the stack at `theta`.
pub fn forward(stack: LayerStack<'_>, theta: &Tensor) -> Result<Tensor> {
    stack.forward(theta)
}

/// `(d a / d theta) v` by forward-mode tangent propagation.
pub fn jvp(stack: LayerStack<'_>, theta: &Tensor, v: &Tensor) -> Result<Tensor> {
    theta.check_same_shape(v)?;
    stack.linearize(theta)?.jvp(v)
}

/// `(d a / d theta)^T u` by a reverse sweep over the tape of the pass at `theta`.
pub fn vjp(stack: LayerStack<'_>, theta: &Tensor, u: &Tensor) -> Result<Tensor> {
    stack.linearize(theta)?.vjp(u)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    feature_boundary: usize,
}

impl Model {
    pub fn new(layers: Vec<Layer>, feature_boundary: usize) -> Result<Self> {
        if feature_boundary > layers.len() {
            return Err(Error::invalid(format!(
                "feature boundary {feature_boundary} exceeds {} layers",
                layers.len()
            )));
        }
        if layers[..feature_boundary].iter().any(|l| matches!(l, Layer::Softmax)) {
            return Err(Error::invalid("softmax is only allowed in the classifier"));
        }
        Ok(Model {
            layers,
            feature_boundary,
        })
    }

    /// Splits at the last affine layer: everything before it extracts features.
    pub fn with_default_boundary(layers: Vec<Layer>) -> Result<Self> {
        let boundary = layers
            .iter()
            .rposition(|l| matches!(l, Layer::Affine(_)))
            .unwrap_or(layers.len());
        Self::new(layers, boundary)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn feature_boundary(&self) -> usize {
        self.feature_boundary
    }

    pub fn extractor(&self) -> LayerStack<'_> {
        LayerStack::new(&self.layers[..self.feature_boundary])
    }

    pub fn classifier(&self) -> LayerStack<'_> {
        LayerStack::new(&self.layers[self.feature_boundary..])
    }

    pub fn full(&self) -> LayerStack<'_> {
        LayerStack::new(&self.layers)
    }

    /// Checks that every layer composes for `input_shape`; returns the feature shape.
    pub fn validate(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let features = self.extractor().output_shape(input_shape)?;
        self.classifier().output_shape(&features)?;
        Ok(features)
    }

    pub fn features(&self, theta: &Tensor) -> Result<Tensor> {
        self.extractor().forward(theta)
    }

    pub fn forward(&self, theta: &Tensor) -> Result<Tensor> {
        self.full().forward(theta)
    }

    pub fn classify(&self, features: &Tensor) -> Result<usize> {
        classify(self, features)
    }
}

/// Class index chosen by the classifier head for the given features.
pub fn classify(model: &Model, features: &Tensor) -> Result<usize> {
    let out = model.classifier().forward(features)?;
    Ok(argmax(out.data()))
}

/// Uniform `±1/sqrt(fan_in)` initialisation of every trainable layer.
pub fn init_uniform(model: &mut Model, rng: &mut RngStream) {
    for layer in model.layers_mut() {
        let fan_in = match layer {
            Layer::Affine(a) => a.in_dim,
            Layer::Conv2d(c) => c.in_channels * c.kernel_h * c.kernel_w,
            _ => continue,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (w, b) = layer.params_mut().expect("trainable");
        for x in w.iter_mut().chain(b.iter_mut()) {
            *x = bound * (2.0 * rng.uniform_open() - 1.0);
        }
    }
}

/// Flatten → Affine(d×h) → ReLU → Affine(h×h) → ReLU | Affine(h×classes) → Softmax,
/// zero-initialised. With `d = h = 784` and ten classes this is the MNIST network.
pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Result<Model> {
    let layers = vec![
        Layer::Flatten,
        Layer::Affine(Affine::new(input_dim, hidden, vec![0.0; input_dim * hidden], vec![0.0; hidden])?),
        Layer::Relu,
        Layer::Affine(Affine::new(hidden, hidden, vec![0.0; hidden * hidden], vec![0.0; hidden])?),
        Layer::Relu,
        Layer::Affine(Affine::new(hidden, classes, vec![0.0; hidden * classes], vec![0.0; classes])?),
        Layer::Softmax,
    ];
    Model::new(layers, 5)
}
