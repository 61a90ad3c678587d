#![allow(dead_code)]

use ftsgd_core::nn::Layer;
use ftsgd_core::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn one_hot(classes: &[usize], k: usize) -> Tensor {
    let mut d = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        d[i * k + c] = 1.0;
    }
    Tensor::from_vec(&[classes.len(), k], d).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let c: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    one_hot(&c, k)
}

/// Perturbs every parameter to nonzero values so biases take part in the check.
pub fn jitter(net: &mut Network, rng: &mut ChaCha8Rng) {
    let p: Vec<f64> = net
        .parameter_vector()
        .iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    net.load_parameter_vector(&p).unwrap();
}

/// Central differences of the mean loss for every listed parameter index.
/// Returns the largest absolute deviation from the analytic gradient.
pub fn finite_difference_gap(net: &mut Network, x: &Tensor, y: &Tensor, h: f64, indices: &[usize]) -> f64 {
    net.forward(x).unwrap();
    let (_, grad) = net.backward(y).unwrap();
    let base = net.parameter_vector();
    let mut worst = 0.0f64;
    for &i in indices {
        let mut p = base.clone();
        p[i] = base[i] + h;
        net.load_parameter_vector(&p).unwrap();
        let up = net.loss(x, y).unwrap();
        p[i] = base[i] - h;
        net.load_parameter_vector(&p).unwrap();
        let down = net.loss(x, y).unwrap();
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - grad.0[i]).abs());
    }
    net.load_parameter_vector(&base).unwrap();
    worst
}

/// Nested-loop convolution over one HWC sample. Zero padding splits the
/// excess `(out-1)*s + w - in` with the smaller half on top/left.
pub fn direct_conv(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    weights: &[f64],
    (k1, k2, n2): (usize, usize, usize),
    bias: &[f64],
    (s1, s2): (usize, usize),
) -> Vec<f64> {
    let (oh, ow) = (h / s1, w / s2);
    let pt = (((oh - 1) * s1 + k1) as isize - h as isize).max(0) / 2;
    let pl = (((ow - 1) * s2 + k2) as isize - w as isize).max(0) / 2;
    let mut out = vec![0.0; oh * ow * n2];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..n2 {
                let mut acc = bias[o];
                for a in 0..k1 {
                    for b in 0..k2 {
                        let iy = (oy * s1 + a) as isize - pt;
                        let ix = (ox * s2 + b) as isize - pl;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let xv = x[(iy as usize * w + ix as usize) * c + ci];
                            let wv = weights[((a * k2 + b) * c + ci) * n2 + o];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * n2 + o] = acc;
            }
        }
    }
    out
}

/// Independent forward pass over a network's layers, one sample at a time.
pub fn oracle_forward(net: &Network, x: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for s in 0..x.rows() {
        let mut a = x.row(s).to_vec();
        for layer in net.layers() {
            a = match layer {
                Layer::FullyConnected { weights, biases } => {
                    let (n2, n1) = (weights.shape()[0], weights.shape()[1]);
                    (0..n2)
                        .map(|j| biases.data()[j] + (0..n1).map(|i| weights.data()[j * n1 + i] * a[i]).sum::<f64>())
                        .collect()
                }
                Layer::Convolution {
                    weights,
                    biases,
                    geometry: g,
                } => direct_conv(
                    &a,
                    (g.in_h, g.in_w, g.in_c),
                    weights.data(),
                    (g.win_h, g.win_w, g.out_c),
                    biases.data(),
                    (g.stride_h, g.stride_w),
                ),
                Layer::Relu => a.iter().map(|v| v.max(0.0)).collect(),
                Layer::SoftmaxXent => {
                    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
                    a.iter().map(|v| (v - m).exp() / z).collect()
                }
            };
        }
        out.extend(a);
    }
    out
}

pub const LENET3: &str = "\
input 28 28 1
conv 5 5 6 stride 2 2
relu
conv 5 5 16 stride 2 2
relu
fc 64
relu
fc 10
softmax
";

pub const MLP: &str = "\
input 784
fc 32
relu
fc 10
softmax
";
