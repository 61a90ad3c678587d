use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::model_spec::{ActShape, LayerDecl, ModelSpec};
use crate::nn::{ConvGeometry, Layer, LayerKind, NnError, Tensor};
use crate::scalar::Scalar;

/// Gradient (or parameter) values in canonical layout: layer-major, each
/// layer's weights followed by its biases.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient<T>(pub Vec<T>);

impl<T: Scalar> FlatGradient<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }
}

struct ForwardCache<T> {
    batch: usize,
    /// Input activations of every layer, `[batch * features]`.
    inputs: Vec<Vec<T>>,
    /// Unrolled windows for convolution layers.
    patches: Vec<Option<Vec<T>>>,
    log_probs: Option<Vec<T>>,
    output: Tensor<T>,
}

/// Ordered layer stack with forward state cached for the backward pass.
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    shapes: Vec<ActShape>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            cache: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("kinds", &self.layers.iter().map(Layer::kind).collect::<Vec<_>>())
            .field("shapes", &self.shapes)
            .finish()
    }
}

impl<T: Scalar> Network<T> {
    /// Checks that adjacent layers compose and records the activation shape
    /// at every boundary.
    pub fn new(input: &[usize], layers: Vec<Layer<T>>) -> Result<Self, NnError> {
        let mut cur = ActShape::from_dims(input).ok_or_else(|| NnError::InvalidShape(input.to_vec()))?;
        if layers.is_empty() {
            return Err(NnError::Geometry {
                layer: 0,
                msg: "network has no layers".into(),
            });
        }
        let mut shapes = vec![cur];
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            cur = match layer {
                Layer::FullyConnected { weights, .. } => {
                    let (n2, n1) = (weights.shape()[0], weights.shape()[1]);
                    if n1 != cur.features() {
                        return Err(NnError::ShapeMismatch {
                            layer: i,
                            expected: vec![n1],
                            found: cur.dims(),
                        });
                    }
                    ActShape::Flat(n2)
                }
                Layer::Convolution { geometry: g, .. } => {
                    let want = ActShape::Image {
                        h: g.in_h,
                        w: g.in_w,
                        c: g.in_c,
                    };
                    if cur != want {
                        return Err(NnError::ShapeMismatch {
                            layer: i,
                            expected: want.dims(),
                            found: cur.dims(),
                        });
                    }
                    ActShape::Image {
                        h: g.out_h,
                        w: g.out_w,
                        c: g.out_c,
                    }
                }
                Layer::Relu => cur,
                Layer::SoftmaxXent => {
                    if i != last {
                        return Err(NnError::Geometry {
                            layer: i,
                            msg: "softmax cross-entropy must be the last layer".into(),
                        });
                    }
                    ActShape::Flat(cur.features())
                }
            };
            shapes.push(cur);
        }
        Ok(Network {
            layers,
            shapes,
            cache: None,
        })
    }

    /// Builds a network from a topology file description. Weights are drawn
    /// uniformly from `±sqrt(6 / (fan_in + fan_out))` with a seeded SplitMix64
    /// stream; biases start at zero.
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        let shapes = spec.shapes().map_err(|e| NnError::Geometry {
            layer: 0,
            msg: e.to_string(),
        })?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, decl) in spec.layers.iter().enumerate() {
            let input = shapes[i];
            let layer = match *decl {
                LayerDecl::FullyConnected { out } => {
                    let n1 = input.features();
                    let weights = glorot(&mut rng, &[out, n1], n1, out)?;
                    Layer::fully_connected(weights, Tensor::zeros(&[out])?)?
                }
                LayerDecl::Convolution { window, out, stride } => {
                    let ActShape::Image { h, w, c } = input else {
                        return Err(NnError::Geometry {
                            layer: i,
                            msg: "conv needs image input".into(),
                        });
                    };
                    let g = ConvGeometry::new((h, w, c), window, out, stride)
                        .map_err(|msg| NnError::Geometry { layer: i, msg })?;
                    let area = window.0 * window.1;
                    let weights = glorot(&mut rng, &[window.0, window.1, c, out], c * area, out * area)?;
                    Layer::convolution(g, weights, Tensor::zeros(&[out])?)?
                }
                LayerDecl::Relu => Layer::Relu,
                LayerDecl::Softmax => Layer::SoftmaxXent,
            };
            layers.push(layer);
        }
        Network::new(&spec.input, layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Number of layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.shapes[0].dims()
    }

    pub fn output_features(&self) -> usize {
        self.shapes.last().expect("non-empty").features()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Forward multiply-accumulates per sample.
    pub fn forward_macs_per_sample(&self) -> u64 {
        self.layers.iter().map(Layer::forward_macs).sum()
    }

    /// Runs the batch through every layer, caching inputs for `backward`.
    /// Returns the final activations (class probabilities when the network
    /// ends in a softmax head).
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let b = batch.rows();
        let want = self.shapes[0].dims();
        if batch.shape()[1..] != want[..] {
            let mut expected = vec![b];
            expected.extend(want);
            return Err(NnError::ShapeMismatch {
                layer: 0,
                expected,
                found: batch.shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut patches = Vec::with_capacity(n);
        let mut log_probs = None;
        let mut cur = batch.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let out_features = self.shapes[i + 1].features();
            let mut conv_cols = None;
            let next = match layer {
                Layer::FullyConnected { weights, biases } => fc_forward(&cur, b, weights, biases),
                Layer::Convolution {
                    weights,
                    biases,
                    geometry,
                } => {
                    let (out, cols) = conv_forward(&cur, b, geometry, weights, biases);
                    conv_cols = Some(cols);
                    out
                }
                Layer::Relu => cur.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
                Layer::SoftmaxXent => {
                    let (p, lp) = softmax_rows(&cur, b, out_features);
                    log_probs = Some(lp);
                    p
                }
            };
            inputs.push(cur);
            patches.push(conv_cols);
            cur = next;
        }
        let mut shape = vec![b];
        shape.extend(self.shapes[n].dims());
        let output = Tensor::from_vec(&shape, cur)?;
        self.cache = Some(ForwardCache {
            batch: b,
            inputs,
            patches,
            log_probs,
            output: output.clone(),
        });
        Ok(output)
    }

    /// Mean cross-entropy over the cached batch and its gradient, averaged
    /// over samples.
    pub fn backward(&mut self, labels: &Tensor<T>) -> Result<(T, FlatGradient<T>), NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        if self.layers.last().map(Layer::kind) != Some(LayerKind::SoftmaxXent) {
            return Err(NnError::NoLossLayer);
        }
        if labels.shape() != cache.output.shape() {
            return Err(NnError::LabelShape {
                expected: cache.output.shape().to_vec(),
                found: labels.shape().to_vec(),
            });
        }
        let b = cache.batch;
        let inv_b = T::one() / T::of(b as f64);
        let log_probs = cache.log_probs.as_ref().expect("softmax caches log-probs");
        let probs = cache.output.data();
        let y = labels.data();

        let mut loss = T::zero();
        for (lp, &yy) in log_probs.iter().zip(y) {
            if yy != T::zero() {
                loss -= yy * *lp;
            }
        }
        loss *= inv_b;

        // gradient of the mean loss w.r.t. the logits: (p - y) / B
        let mut delta: Vec<T> = probs.iter().zip(y).map(|(&p, &yy)| (p - yy) * inv_b).collect();

        let mut per_layer: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len() - 1).rev() {
            let input = &cache.inputs[i];
            let need_input_grad = i > 0;
            match &self.layers[i] {
                Layer::FullyConnected { weights, .. } => {
                    let (dw, db, din) = fc_backward(input, &delta, b, weights, need_input_grad);
                    per_layer[i] = Some((dw, db));
                    delta = din;
                }
                Layer::Convolution { weights, geometry, .. } => {
                    let cols = cache.patches[i].as_ref().expect("conv caches patches");
                    let (dw, db, din) = conv_backward(cols, &delta, b, geometry, weights, need_input_grad);
                    per_layer[i] = Some((dw, db));
                    delta = din;
                }
                Layer::Relu => {
                    for (d, &z) in delta.iter_mut().zip(input) {
                        if z <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
                Layer::SoftmaxXent => unreachable!("softmax is last"),
            }
        }

        let mut flat = Vec::with_capacity(self.parameter_count());
        for (dw, db) in per_layer.into_iter().flatten() {
            flat.extend(dw);
            flat.extend(db);
        }
        Ok((loss, FlatGradient(flat)))
    }

    /// Forward pass followed by the head's mean loss.
    pub fn loss(&mut self, batch: &Tensor<T>, labels: &Tensor<T>) -> Result<T, NnError> {
        self.forward(batch)?;
        Ok(self.backward(labels)?.0)
    }

    /// `θ ← θ − lr · grad`.
    pub fn apply_update(&mut self, grad: &FlatGradient<T>, lr: T) -> Result<(), NnError> {
        let expected = self.parameter_count();
        if grad.len() != expected {
            return Err(NnError::LayoutLength {
                expected,
                found: grad.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                for t in [w, b] {
                    let n = t.len();
                    for (p, g) in t.data_mut().iter_mut().zip(&grad.0[offset..offset + n]) {
                        *p -= lr * *g;
                    }
                    offset += n;
                }
            }
        }
        Ok(())
    }

    pub fn parameter_vector(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.layers.iter().filter_map(Layer::params) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn load_parameter_vector(&mut self, values: &[T]) -> Result<(), NnError> {
        let expected = self.parameter_count();
        if values.len() != expected {
            return Err(NnError::LayoutLength {
                expected,
                found: values.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                for t in [w, b] {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&values[offset..offset + n]);
                    offset += n;
                }
            }
        }
        self.cache = None;
        Ok(())
    }
}

fn glorot<T: Scalar>(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor<T>, NnError> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

fn fc_forward<T: Scalar>(input: &[T], b: usize, weights: &Tensor<T>, biases: &Tensor<T>) -> Vec<T> {
    let (n2, n1) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let mut out = Vec::with_capacity(b * n2);
    for s in 0..b {
        let x = &input[s * n1..(s + 1) * n1];
        for (j, &bias) in biases.data().iter().enumerate() {
            let row = &w[j * n1..(j + 1) * n1];
            let mut acc = bias;
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi * *xi;
            }
            out.push(acc);
        }
    }
    out
}

fn fc_backward<T: Scalar>(
    input: &[T],
    delta: &[T],
    b: usize,
    weights: &Tensor<T>,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n2, n1) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let mut dw = vec![T::zero(); n2 * n1];
    let mut db = vec![T::zero(); n2];
    let mut din = if need_input_grad {
        vec![T::zero(); b * n1]
    } else {
        Vec::new()
    };
    for s in 0..b {
        let x = &input[s * n1..(s + 1) * n1];
        let d = &delta[s * n2..(s + 1) * n2];
        for j in 0..n2 {
            let dj = d[j];
            db[j] += dj;
            if dj == T::zero() {
                continue;
            }
            for (g, xi) in dw[j * n1..(j + 1) * n1].iter_mut().zip(x) {
                *g += dj * *xi;
            }
            if need_input_grad {
                for (g, wi) in din[s * n1..(s + 1) * n1].iter_mut().zip(&w[j * n1..(j + 1) * n1]) {
                    *g += dj * *wi;
                }
            }
        }
    }
    (dw, db, din)
}

fn conv_forward<T: Scalar>(
    input: &[T],
    b: usize,
    g: &ConvGeometry,
    weights: &Tensor<T>,
    biases: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.positions();
    let n2 = g.out_c;
    let w = weights.data();
    let mut cols = vec![T::zero(); b * p * k];
    let mut out = vec![T::zero(); b * p * n2];
    for s in 0..b {
        let x = &input[s * g.in_features()..(s + 1) * g.in_features()];
        let c = &mut cols[s * p * k..(s + 1) * p * k];
        g.im2col(x, c);
        for pos in 0..p {
            let o = &mut out[(s * p + pos) * n2..][..n2];
            o.copy_from_slice(biases.data());
            for (kk, &a) in c[pos * k..(pos + 1) * k].iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (oo, wv) in o.iter_mut().zip(&w[kk * n2..(kk + 1) * n2]) {
                    *oo += a * *wv;
                }
            }
        }
    }
    (out, cols)
}

fn conv_backward<T: Scalar>(
    cols: &[T],
    delta: &[T],
    b: usize,
    g: &ConvGeometry,
    weights: &Tensor<T>,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.positions();
    let n2 = g.out_c;
    let w = weights.data();
    let mut dw = vec![T::zero(); k * n2];
    let mut db = vec![T::zero(); n2];
    let mut din = if need_input_grad {
        vec![T::zero(); b * g.in_features()]
    } else {
        Vec::new()
    };
    let mut dcols = vec![T::zero(); p * k];
    for s in 0..b {
        let c = &cols[s * p * k..(s + 1) * p * k];
        for pos in 0..p {
            let d = &delta[(s * p + pos) * n2..][..n2];
            for (acc, dv) in db.iter_mut().zip(d) {
                *acc += *dv;
            }
            for kk in 0..k {
                let a = c[pos * k + kk];
                let wrow = &w[kk * n2..(kk + 1) * n2];
                if a != T::zero() {
                    for (gw, dv) in dw[kk * n2..(kk + 1) * n2].iter_mut().zip(d) {
                        *gw += a * *dv;
                    }
                }
                if need_input_grad {
                    let mut acc = T::zero();
                    for (wv, dv) in wrow.iter().zip(d) {
                        acc += *wv * *dv;
                    }
                    dcols[pos * k + kk] = acc;
                }
            }
        }
        if need_input_grad {
            let f = g.in_features();
            g.col2im(&dcols, &mut din[s * f..(s + 1) * f]);
        }
    }
    (dw, db, din)
}

/// Row-wise softmax with log-probabilities from a shifted log-sum-exp.
fn softmax_rows<T: Scalar>(logits: &[T], b: usize, k: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = Vec::with_capacity(b * k);
    let mut log_probs = Vec::with_capacity(b * k);
    for s in 0..b {
        let z = &logits[s * k..(s + 1) * k];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for &v in z {
            let lp = v - lse;
            log_probs.push(lp);
            probs.push(lp.exp());
        }
    }
    (probs, log_probs)
}
