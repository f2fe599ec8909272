//! Minibatched AdamW training with cross-entropy loss, and accuracy evaluation
//! with or without dithered features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hcr::NoiseModel;
use crate::nn::{Layer, LayerStack, Model};
use crate::tensor::{RngStream, Tensor};

/// Stream id reserved for weight initialisation; shuffles use the epoch index.
pub const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 6,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if !in_unit(self.adam_beta1) || !in_unit(self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Labelled inputs, all of one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            for x in &inputs[1..] {
                first.check_same_shape(x)?;
            }
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.inputs[i], self.labels[i])
    }

    /// Examples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.len() {
            return Err(Error::invalid(format!("range {start}..{end} outside 0..{}", self.len())));
        }
        Ok(Dataset {
            inputs: self.inputs[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
        })
    }
}

/// Loss `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = max + sum.ln();
    let loss = log_sum - z[label];
    let mut grad: Vec<f64> = z.iter().map(|&v| (v - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts_unchecked(logits.shape().to_vec(), grad)))
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// One AdamW update (step indices start at 1). The decay shrinks the
/// parameters directly and never enters the moment estimates.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.first.len() != n || moments.second.len() != n {
        return Err(Error::shape(&[n], &[grads.len()]));
    }
    if step == 0 {
        return Err(Error::invalid("AdamW step index starts at 1"));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..n {
        let g = grads[i];
        let m = b1 * moments.first[i] + (1.0 - b1) * g;
        let v = b2 * moments.second[i] + (1.0 - b2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] = params[i] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// The layers producing logits: everything but a trailing softmax.
fn logit_layers(model: &Model) -> &[Layer] {
    match model.layers() {
        [rest @ .., Layer::Softmax] => rest,
        all => all,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Mean minibatch loss over each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains `model` in place. Each epoch visits the examples in a permutation
/// drawn from stream `(seed, epoch)`; the final partial batch is kept.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let trainable: Vec<usize> = (0..model.layers().len())
        .filter(|&l| model.layers()[l].has_params())
        .collect();
    let lens: Vec<(usize, usize)> = trainable
        .iter()
        .map(|&l| model.layers()[l].param_lens().expect("trainable"))
        .collect();
    let mut moments: Vec<(AdamMoments, AdamMoments)> = lens
        .iter()
        .map(|&(w, b)| (AdamMoments::zeros(w), AdamMoments::zeros(b)))
        .collect();
    let slot = |l: usize| trainable.iter().position(|&t| t == l).expect("trainable layer");

    let mut history = TrainHistory { epoch_losses: Vec::with_capacity(cfg.epochs), steps: 0 };
    for epoch in 0..cfg.epochs {
        let order = RngStream::new(cfg.seed, epoch as u64).permutation(data.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
                lens.iter().map(|&(w, b)| (vec![0.0; w], vec![0.0; b])).collect();
            let stack = LayerStack::new(logit_layers(model));
            for &i in batch {
                let (x, label) = data.get(i);
                let lin = stack.linearize(x)?;
                let (loss, g) = cross_entropy_grad(lin.output(), label)?;
                epoch_loss += loss;
                lin.backpropagate_params(g.data(), |l, input, upstream| {
                    let (gw, gb) = &mut grads[slot(l)];
                    stack.layers()[l].accumulate_param_grad(input, upstream, gw, gb)
                })?;
            }
            let scale = 1.0 / batch.len() as f64;
            history.steps += 1;
            for (k, &l) in trainable.iter().enumerate() {
                let (gw, gb) = &mut grads[k];
                gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= scale);
                let (w, b) = model.layers_mut()[l].params_mut().expect("trainable");
                let (mw, mb) = &mut moments[k];
                adamw_step(w, gw, mw, history.steps, cfg)?;
                adamw_step(b, gb, mb, history.steps, cfg)?;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

/// Fraction of examples classified correctly. With `noise`, example `i`'s
/// features are dithered by a draw from stream `(seed, i)` before the
/// classifier head sees them.
pub fn evaluate_accuracy(model: &Model, data: &Dataset, noise: Option<&NoiseModel>, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let (x, label) = data.get(i);
            let mut features = model.features(x)?;
            if let Some(noise) = noise {
                let mut rng = RngStream::new(seed, i as u64);
                let z = noise.sample(&mut rng, features.len());
                if z.len() != features.len() {
                    return Err(Error::shape(&[features.len()], &[z.len()]));
                }
                features.data_mut().iter_mut().zip(z).for_each(|(f, z)| *f += z);
            }
            Ok(usize::from(model.classify(&features)? == label))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / data.len() as f64)
}
