use crate::nn::{NnError, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    FullyConnected,
    Convolution,
    Relu,
    SoftmaxXent,
}

/// Geometry of a convolution over HWC activations.
///
/// Inputs are zero padded so that `out = in / stride` exactly; the stride must
/// divide the input extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize),
        window: (usize, usize),
        out_c: usize,
        stride: (usize, usize),
    ) -> Result<Self, String> {
        let (in_h, in_w, in_c) = input;
        let (win_h, win_w) = window;
        let (stride_h, stride_w) = stride;
        if [in_h, in_w, in_c, win_h, win_w, out_c].contains(&0) {
            return Err("conv extents must be positive".into());
        }
        if stride_h == 0 || stride_w == 0 {
            return Err("strides must be >= 1".into());
        }
        if win_h > in_h || win_w > in_w {
            return Err(format!("window {win_h}x{win_w} exceeds input {in_h}x{in_w}"));
        }
        if in_h % stride_h != 0 || in_w % stride_w != 0 {
            return Err(format!(
                "stride {stride_h}x{stride_w} does not divide input {in_h}x{in_w}"
            ));
        }
        let out_h = in_h / stride_h;
        let out_w = in_w / stride_w;
        let pad_h = ((out_h - 1) * stride_h + win_h).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride_w + win_w).saturating_sub(in_w);
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            out_c,
            win_h,
            win_w,
            stride_h,
            stride_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        })
    }

    /// Elements in one unrolled input window.
    pub fn patch_len(&self) -> usize {
        self.win_h * self.win_w * self.in_c
    }

    /// Output spatial positions.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_features(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_features(&self) -> usize {
        self.positions() * self.out_c
    }

    /// Unrolls one HWC sample into a `[positions, patch_len]` matrix so the
    /// convolution becomes a matrix product against `[patch_len, out_c]`
    /// weights. Padding positions read as zero.
    pub(crate) fn im2col<T: Scalar>(&self, input: &[T], patches: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut patches[(oy * self.out_w + ox) * k..][..k];
                let mut col = 0;
                for ky in 0..self.win_h {
                    let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.win_w {
                        let ix = (ox * self.stride_w + kx) as isize - self.pad_left as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.in_h
                            && (ix as usize) < self.in_w;
                        if inside {
                            let base = (iy as usize * self.in_w + ix as usize) * self.in_c;
                            row[col..col + self.in_c].copy_from_slice(&input[base..base + self.in_c]);
                        } else {
                            row[col..col + self.in_c].fill(T::zero());
                        }
                        col += self.in_c;
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the HWC input gradient.
    pub(crate) fn col2im<T: Scalar>(&self, dpatches: &[T], dinput: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &dpatches[(oy * self.out_w + ox) * k..][..k];
                let mut col = 0;
                for ky in 0..self.win_h {
                    let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.win_w {
                        let ix = (ox * self.stride_w + kx) as isize - self.pad_left as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.in_h && (ix as usize) < self.in_w {
                            let base = (iy as usize * self.in_w + ix as usize) * self.in_c;
                            for c in 0..self.in_c {
                                dinput[base + c] += row[col + c];
                            }
                        }
                        col += self.in_c;
                    }
                }
            }
        }
    }
}

/// One layer of a [`Network`](crate::nn::Network).
///
/// Fully-connected weights are `[n2, n1]`; convolution weights are
/// `[w1, w2, n1, n2]`. Biases are `[n2]` in both cases.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    FullyConnected {
        weights: Tensor<T>,
        biases: Tensor<T>,
    },
    Convolution {
        weights: Tensor<T>,
        biases: Tensor<T>,
        geometry: ConvGeometry,
    },
    Relu,
    SoftmaxXent,
}

impl<T: Scalar> Layer<T> {
    pub fn fully_connected(weights: Tensor<T>, biases: Tensor<T>) -> Result<Self, NnError> {
        let &[n2, _n1] = weights.shape() else {
            return Err(NnError::InvalidShape(weights.shape().to_vec()));
        };
        if biases.shape() != [n2] {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                expected: vec![n2],
                found: biases.shape().to_vec(),
            });
        }
        Ok(Layer::FullyConnected { weights, biases })
    }

    pub fn convolution(geometry: ConvGeometry, weights: Tensor<T>, biases: Tensor<T>) -> Result<Self, NnError> {
        let expected = [geometry.win_h, geometry.win_w, geometry.in_c, geometry.out_c];
        if weights.shape() != expected {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                expected: expected.to_vec(),
                found: weights.shape().to_vec(),
            });
        }
        if biases.shape() != [geometry.out_c] {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                expected: vec![geometry.out_c],
                found: biases.shape().to_vec(),
            });
        }
        Ok(Layer::Convolution {
            weights,
            biases,
            geometry,
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::FullyConnected { .. } => LayerKind::FullyConnected,
            Layer::Convolution { .. } => LayerKind::Convolution,
            Layer::Relu => LayerKind::Relu,
            Layer::SoftmaxXent => LayerKind::SoftmaxXent,
        }
    }

    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::FullyConnected { weights, biases } | Layer::Convolution { weights, biases, .. } => {
                Some((weights, biases))
            }
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::FullyConnected { weights, biases } | Layer::Convolution { weights, biases, .. } => {
                Some((weights, biases))
            }
            _ => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map_or(0, |(w, b)| w.len() + b.len())
    }

    /// Multiply-accumulates of one forward pass for a single sample.
    pub fn forward_macs(&self) -> u64 {
        match self {
            Layer::FullyConnected { weights, .. } => weights.len() as u64,
            Layer::Convolution { geometry: g, .. } => (g.positions() * g.patch_len() * g.out_c) as u64,
            _ => 0,
        }
    }
}
