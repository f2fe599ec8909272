//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use hcrbounds::nn::{Affine, Conv2d, Layer, LayerStack, MaxPool2d, Model};
use hcrbounds::tensor::sample_normal;
use hcrbounds::{RngStream, Tensor};
use nalgebra::DMatrix;

/// Affine layer computing `M theta` for an `n x p` matrix `m`.
pub fn matrix_layer(m: &DMatrix<f64>) -> Layer {
    let (n, p) = m.shape();
    let mut w = vec![0.0; p * n];
    for r in 0..n {
        for c in 0..p {
            w[c * n + r] = m[(r, c)];
        }
    }
    Layer::Affine(Affine::new(p, n, w, vec![0.0; n]).unwrap())
}

pub fn gaussian_matrix(rng: &mut RngStream, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.standard_normal())
}

/// `n x p` matrix with orthonormal columns.
pub fn orthonormal_columns(rng: &mut RngStream, n: usize, p: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, p).qr().q()
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform_open()
}

fn normal_vec(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

/// Random network using every layer kind, and an input of matching shape:
/// Conv2d -> ReLU -> MaxPool2d -> Flatten -> Affine -> ReLU -> Affine [-> Softmax].
pub fn random_net(rng: &mut RngStream, softmax: bool) -> (Vec<Layer>, Tensor) {
    let in_c = 1 + rng.below(2);
    let out_c = 1 + rng.below(3);
    let k = 2 + rng.below(2);
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let side = 6 + rng.below(3);
    let fan = (in_c * k * k) as f64;
    let conv = Conv2d::with_geometry(
        in_c,
        out_c,
        k,
        k,
        stride,
        pad,
        normal_vec(rng, out_c * in_c * k * k, 1.0 / fan.sqrt()),
        normal_vec(rng, out_c, 0.1),
    )
    .unwrap();
    let mut layers = vec![
        Layer::Conv2d(conv),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d::new(2, 2, 2, 2).unwrap()),
        Layer::Flatten,
    ];
    let flat: usize = LayerStack::new(&layers).output_shape(&[in_c, side, side]).unwrap().iter().product();
    let hidden = 3 + rng.below(6);
    let outs = 2 + rng.below(4);
    let s1 = 1.0 / (flat as f64).sqrt();
    let s2 = 1.0 / (hidden as f64).sqrt();
    layers.push(Layer::Affine(
        Affine::new(flat, hidden, normal_vec(rng, flat * hidden, s1), normal_vec(rng, hidden, 0.1)).unwrap(),
    ));
    layers.push(Layer::Relu);
    layers.push(Layer::Affine(
        Affine::new(hidden, outs, normal_vec(rng, hidden * outs, s2), normal_vec(rng, outs, 0.1)).unwrap(),
    ));
    if softmax {
        layers.push(Layer::Softmax);
    }
    let theta = sample_normal(rng, &[in_c, side, side], 1.0).unwrap();
    (layers, theta)
}

/// Smallest distance of any ReLU input to 0 and of any pooling window's
/// maximum to its runner-up, over the forward pass at `theta`.
pub fn kink_margin(layers: &[Layer], theta: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    let mut x = theta.clone();
    for layer in layers {
        match layer {
            Layer::Relu => {
                margin = x.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
            Layer::MaxPool2d(p) => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let oh = (h - p.kernel_h) / p.stride_h + 1;
                let ow = (w - p.kernel_w) / p.stride_w + 1;
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut win = Vec::new();
                            for a in 0..p.kernel_h {
                                for b in 0..p.kernel_w {
                                    win.push(x.data()[(ch * h + i * p.stride_h + a) * w + j * p.stride_w + b]);
                                }
                            }
                            win.sort_by(|a, b| b.total_cmp(a));
                            margin = margin.min(win[0] - win[1]);
                        }
                    }
                }
            }
            _ => {}
        }
        x = LayerStack::new(std::slice::from_ref(layer)).forward(&x).unwrap();
    }
    margin
}

/// Small random MLP `Flatten -> Affine -> ReLU -> Affine -> ReLU | Affine -> Softmax`
/// with uniform weights, for `(1, side, side)` inputs.
pub fn small_mlp(rng: &mut RngStream, side: usize, hidden: usize, classes: usize) -> Model {
    let mut m = hcrbounds::nn::mlp(side * side, hidden, classes).unwrap();
    hcrbounds::nn::init_uniform(&mut m, rng);
    m
}

fn idx_bytes(kind: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 0x08, kind];
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(payload);
    v
}

/// Writes `{split}-images-idx3-ubyte` and `{split}-labels-idx1-ubyte` with
/// `n` random `side x side` images into `dir`.
pub fn write_idx_split(dir: &Path, split: &str, n: usize, side: usize, seed: u64) {
    let mut rng = RngStream::new(seed, 0);
    let pixels: Vec<u8> = (0..n * side * side).map(|_| rng.below(256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
    let s = side as u32;
    fs::write(dir.join(format!("{split}-images-idx3-ubyte")), idx_bytes(3, &[n as u32, s, s], &pixels)).unwrap();
    fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), idx_bytes(1, &[n as u32], &labels)).unwrap();
}

/// Brute-force orthonormal DCT-II of one `h x w` plane.
pub fn naive_dct2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let a = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x[i * w + j]
                        * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                        * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                }
            }
            out[u * w + v] = a(u, h) * a(v, w) * s;
        }
    }
    out
}

pub fn uniform_in(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo, hi)
}
