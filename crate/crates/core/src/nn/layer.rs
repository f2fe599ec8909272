//! The layer zoo and its per-layer primal, tangent (forward-mode) and adjoint
//! (reverse-mode) rules.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Fully connected layer: `y = x W + b` with `W` stored `in_dim x out_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("affine dimensions must be positive"));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "affine {in_dim}x{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Affine {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    /// `x W` without the bias.
    fn apply_linear(&self, x: &[f64], out: &mut [f64]) {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &self.weight[i * self.out_dim..(i + 1) * self.out_dim], out);
            }
        }
    }

    /// `W u`
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        (0..self.in_dim)
            .map(|i| dot(&self.weight[i * self.out_dim..(i + 1) * self.out_dim], u))
            .collect()
    }
}

/// 2D convolution over `(channels, height, width)` inputs.
///
/// Weights are laid out `(out_channels, in_channels, kernel_h, kernel_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self::with_geometry(in_channels, out_channels, kernel_h, kernel_w, 1, 0, weight, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_geometry(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0
        {
            return Err(Error::invalid("conv2d dimensions and stride must be positive"));
        }
        let wlen = out_channels * in_channels * kernel_h * kernel_w;
        if weight.len() != wlen || bias.len() != out_channels {
            return Err(Error::invalid(format!(
                "conv2d needs {wlen} weights and {out_channels} biases, got {} and {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weight,
            bias,
        })
    }

    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let [c, h, w] = shape else {
            return Err(Error::shape(&[self.in_channels, 0, 0], shape));
        };
        if *c != self.in_channels {
            return Err(Error::shape(&[self.in_channels, *h, *w], shape));
        }
        let oh = window_count(*h, self.kernel_h, self.stride, self.padding)
            .ok_or_else(|| Error::invalid(format!("input {shape:?} smaller than conv kernel")))?;
        let ow = window_count(*w, self.kernel_w, self.stride, self.padding)
            .ok_or_else(|| Error::invalid(format!("input {shape:?} smaller than conv kernel")))?;
        Ok((*h, *w, oh, ow))
    }

    /// Calls `f(out_index, in_index, weight_index)` for every in-bounds tap.
    fn for_each_tap(&self, h: usize, w: usize, oh: usize, ow: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw, s, pad) = (self.kernel_h, self.kernel_w, self.stride, self.padding);
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for i in 0..kh {
                    for j in 0..kw {
                        let widx = ((o * self.in_channels + c) * kh + i) * kw + j;
                        for y in 0..oh {
                            let iy = (y * s + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for x in 0..ow {
                                let ix = (x * s + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let oidx = (o * oh + y) * ow + x;
                                let iidx = (c * h + iy as usize) * w + ix as usize;
                                f(oidx, iidx, widx);
                            }
                        }
                    }
                }
            }
        }
    }

    fn apply_linear(&self, shape: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        let (h, w, oh, ow) = self.geometry(shape)?;
        let mut out = vec![0.0; self.out_channels * oh * ow];
        self.for_each_tap(h, w, oh, ow, |o, i, k| out[o] += self.weight[k] * x[i]);
        Ok(out)
    }

    fn apply_transpose(&self, shape: &[usize], u: &[f64]) -> Result<Vec<f64>> {
        let (h, w, oh, ow) = self.geometry(shape)?;
        let mut out = vec![0.0; self.in_channels * h * w];
        self.for_each_tap(h, w, oh, ow, |o, i, k| out[i] += self.weight[k] * u[o]);
        Ok(out)
    }

    fn accumulate_param_grad(
        &self,
        shape: &[usize],
        input: &[f64],
        upstream: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Result<()> {
        let (h, w, oh, ow) = self.geometry(shape)?;
        self.for_each_tap(h, w, oh, ow, |o, i, k| gw[k] += upstream[o] * input[i]);
        let plane = oh * ow;
        for (o, g) in gb.iter_mut().enumerate() {
            *g += upstream[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        Ok(())
    }
}

/// Max pooling over `(channels, height, width)` inputs, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl MaxPool2d {
    pub fn new(kernel_h: usize, kernel_w: usize, stride_h: usize, stride_w: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 {
            return Err(Error::invalid("maxpool kernel and stride must be positive"));
        }
        Ok(MaxPool2d {
            kernel_h,
            kernel_w,
            stride_h,
            stride_w,
        })
    }

    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
        let [c, h, w] = shape else {
            return Err(Error::invalid(format!("maxpool expects (C,H,W) input, got {shape:?}")));
        };
        let oh = window_count(*h, self.kernel_h, self.stride_h, 0);
        let ow = window_count(*w, self.kernel_w, self.stride_w, 0);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((*c, *h, *w, oh, ow)),
            _ => Err(Error::invalid(format!("input {shape:?} smaller than pool window"))),
        }
    }

    /// Returns pooled values and, per output, the flat input index of the first maximum.
    fn pool(&self, shape: &[usize], x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        let (c, h, w, oh, ow) = self.geometry(shape)?;
        let mut values = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for i in 0..self.kernel_h {
                        for j in 0..self.kernel_w {
                            let idx = (ch * h + y * self.stride_h + i) * w + xo * self.stride_w + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok((values, argmax))
    }
}

fn window_count(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Relu,
    Flatten,
    Softmax,
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
}

/// What a layer remembers from its primal evaluation.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    None,
    ReluMask(Vec<bool>),
    Argmax(Vec<usize>),
    Softmax(Vec<f64>),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "Affine",
            Layer::Relu => "ReLU",
            Layer::Flatten => "Flatten",
            Layer::Softmax => "Softmax",
            Layer::Conv2d(_) => "Conv2D",
            Layer::MaxPool2d(_) => "MaxPool2D",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Affine(_) | Layer::Conv2d(_))
    }

    /// Mutable `(weights, bias)` for trainable layers.
    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Affine(a) => Some((&mut a.weight, &mut a.bias)),
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            _ => None,
        }
    }

    pub fn param_lens(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Affine(a) => Some((a.weight.len(), a.bias.len())),
            Layer::Conv2d(c) => Some((c.weight.len(), c.bias.len())),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Affine(a) => {
                if input != [a.in_dim] {
                    return Err(Error::shape(&[a.in_dim], input));
                }
                Ok(vec![a.out_dim])
            }
            Layer::Relu | Layer::Softmax => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Conv2d(c) => {
                let (_, _, oh, ow) = c.geometry(input)?;
                Ok(vec![c.out_channels, oh, ow])
            }
            Layer::MaxPool2d(p) => {
                let (ch, _, _, oh, ow) = p.geometry(input)?;
                Ok(vec![ch, oh, ow])
            }
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let out_shape = self.output_shape(x.shape())?;
        let xs = x.data();
        let (data, cache) = match self {
            Layer::Affine(a) => {
                let mut out = a.bias.clone();
                a.apply_linear(xs, &mut out);
                (out, Cache::None)
            }
            Layer::Relu => {
                let mask: Vec<bool> = xs.iter().map(|&v| v > 0.0).collect();
                let out = xs.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                (out, Cache::ReluMask(mask))
            }
            Layer::Flatten => (xs.to_vec(), Cache::None),
            Layer::Softmax => {
                let s = softmax(xs);
                (s.clone(), Cache::Softmax(s))
            }
            Layer::Conv2d(c) => {
                let mut out = c.apply_linear(x.shape(), xs)?;
                let plane = out.len() / c.out_channels;
                for (o, b) in c.bias.iter().enumerate() {
                    out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
                }
                (out, Cache::None)
            }
            Layer::MaxPool2d(p) => {
                let (values, argmax) = p.pool(x.shape(), xs)?;
                (values, Cache::Argmax(argmax))
            }
        };
        let out = Tensor::from_parts_unchecked(out_shape, data);
        if !out.is_finite() {
            return Err(Error::NonFinite("layer forward"));
        }
        Ok((out, cache))
    }

    /// Jacobian-vector product through this layer at the cached operating point.
    pub(crate) fn tangent(&self, cache: &Cache, in_shape: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        Ok(match (self, cache) {
            (Layer::Affine(a), _) => {
                let mut out = vec![0.0; a.out_dim];
                a.apply_linear(v, &mut out);
                out
            }
            (Layer::Relu, Cache::ReluMask(mask)) => v
                .iter()
                .zip(mask)
                .map(|(&t, &on)| if on { t } else { 0.0 })
                .collect(),
            (Layer::Flatten, _) => v.to_vec(),
            (Layer::Softmax, Cache::Softmax(s)) => softmax_jacobian_apply(s, v),
            (Layer::Conv2d(c), _) => c.apply_linear(in_shape, v)?,
            (Layer::MaxPool2d(_), Cache::Argmax(idx)) => idx.iter().map(|&i| v[i]).collect(),
            _ => unreachable!("cache does not match layer kind"),
        })
    }

    /// Transposed-Jacobian-vector product through this layer.
    pub(crate) fn adjoint(&self, cache: &Cache, in_shape: &[usize], u: &[f64]) -> Result<Vec<f64>> {
        Ok(match (self, cache) {
            (Layer::Affine(a), _) => a.apply_transpose(u),
            (Layer::Relu, Cache::ReluMask(mask)) => u
                .iter()
                .zip(mask)
                .map(|(&t, &on)| if on { t } else { 0.0 })
                .collect(),
            (Layer::Flatten, _) => u.to_vec(),
            // The softmax Jacobian diag(s) - s s^T is symmetric.
            (Layer::Softmax, Cache::Softmax(s)) => softmax_jacobian_apply(s, u),
            (Layer::Conv2d(c), _) => c.apply_transpose(in_shape, u)?,
            (Layer::MaxPool2d(_), Cache::Argmax(idx)) => {
                let mut out = vec![0.0; in_shape.iter().product()];
                for (&i, &g) in idx.iter().zip(u) {
                    out[i] += g;
                }
                out
            }
            _ => unreachable!("cache does not match layer kind"),
        })
    }

    /// Adds the gradient of `<upstream, layer(input)>` with respect to the
    /// parameters into `(gw, gb)`.
    pub(crate) fn accumulate_param_grad(
        &self,
        input: &Tensor,
        upstream: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Result<()> {
        match self {
            Layer::Affine(a) => {
                for (i, &xi) in input.data().iter().enumerate() {
                    if xi != 0.0 {
                        axpy(xi, upstream, &mut gw[i * a.out_dim..(i + 1) * a.out_dim]);
                    }
                }
                axpy(1.0, upstream, gb);
                Ok(())
            }
            Layer::Conv2d(c) => c.accumulate_param_grad(input.shape(), input.data(), upstream, gw, gb),
            _ => Ok(()),
        }
    }
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_jacobian_apply(s: &[f64], v: &[f64]) -> Vec<f64> {
    let sv = dot(s, v);
    s.iter().zip(v).map(|(&si, &vi)| si * (vi - sv)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_data(shape, data).unwrap()
    }

    #[test]
    fn relu_forward_and_tangent_at_zero() {
        let (y, cache) = Layer::Relu.forward(&t(&[3], vec![1.0, -1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
        let tan = Layer::Relu.tangent(&cache, &[3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tan, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_window_sums() {
        let conv = Conv2d::new(1, 1, 2, 2, vec![1.0; 4], vec![0.0]).unwrap();
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let (y, _) = Layer::Conv2d(conv).forward(&t(&[1, 3, 3], x.clone())).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // Nested-loop oracle.
        let mut expected = vec![];
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        s += x[(r + i) * 3 + c + j];
                    }
                }
                expected.push(s);
            }
        }
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn conv_output_geometry_with_stride_and_padding() {
        let conv = Conv2d::with_geometry(2, 3, 3, 2, 2, 1, vec![0.1; 36], vec![0.0; 3]).unwrap();
        // floor((7 + 2 - 3)/2) + 1 = 4 ; floor((5 + 2 - 2)/2) + 1 = 3
        assert_eq!(Layer::Conv2d(conv).output_shape(&[2, 7, 5]).unwrap(), vec![3, 4, 3]);
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let pool = MaxPool2d::new(2, 2, 2, 2).unwrap();
        let layer = Layer::MaxPool2d(pool);
        let (y, cache) = layer.forward(&t(&[1, 2, 2], vec![5.0, 5.0, 5.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let back = layer.adjoint(&cache, &[1, 2, 2], &[2.0]).unwrap();
        assert_eq!(back, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_matches_loop_oracle() {
        let pool = MaxPool2d::new(2, 2, 2, 2).unwrap();
        let layer = Layer::MaxPool2d(pool);
        let x: Vec<f64> = vec![
            0.3, 0.9, 0.1, 0.2, //
            0.4, 0.5, 0.8, 0.7, //
            0.6, 0.1, 0.2, 0.3, //
            0.2, 0.0, 0.9, 0.4,
        ];
        let (_, cache) = layer.forward(&t(&[1, 4, 4], x.clone())).unwrap();
        let u = [1.0, 2.0, 3.0, 4.0];
        let got = layer.adjoint(&cache, &[1, 4, 4], &u).unwrap();
        let mut oracle = vec![0.0; 16];
        for (k, (by, bx)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..2 {
                for j in 0..2 {
                    let idx = (by + i) * 4 + bx + j;
                    if x[idx] > best.0 {
                        best = (x[idx], idx);
                    }
                }
            }
            oracle[best.1] += u[k];
        }
        assert_eq!(got, oracle);
    }

    #[test]
    fn affine_rejects_bad_lengths() {
        assert!(Affine::new(2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
        assert!(Affine::new(2, 2, vec![0.0; 4], vec![0.0; 1]).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1] >= 0.0);
    }
}
