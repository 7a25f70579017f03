//! Straightforward forward-pass evaluator used as the numerical reference
//! for compiled code.
//!
//! Every kernel accumulates in natural index order, allocates fresh output
//! storage and uses correctly rounded scalar math for transcendental
//! functions, so results are reproducible bit for bit.

use thiserror::Error;

use crate::graph::{topological_order, ComputationGraph, LayerOp, PoolKind};
use crate::model::{Activation, Padding};
use crate::tensor::{BatchNormParams, Tensor, TensorShape, WindowAxis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpretError {
    #[error("expected {expected} input tensors, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("input {index} has shape {actual}, graph expects {expected}")]
    InputShapeMismatch {
        index: usize,
        expected: TensorShape,
        actual: TensorShape,
    },
}

/// Convolution geometry shared by the spatial kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub size: [usize; 2],
    pub strides: [usize; 2],
    pub padding: Padding,
}

impl Window {
    pub fn axes(&self, input: TensorShape) -> (WindowAxis, WindowAxis) {
        let (h, w, _) = input.hwc();
        let y = WindowAxis::new(h, self.size[0], self.strides[0], self.padding)
            .expect("window fits input");
        let x = WindowAxis::new(w, self.size[1], self.strides[1], self.padding)
            .expect("window fits input");
        (y, x)
    }
}

/// `exp` evaluated in double precision and rounded once.
pub fn exact_exp(x: f32) -> f32 {
    (x as f64).exp() as f32
}

pub fn exact_tanh(x: f32) -> f32 {
    (x as f64).tanh() as f32
}

pub fn exact_sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

#[inline]
pub fn activate(tag: Activation, x: f32) -> f32 {
    match tag {
        Activation::Linear => x,
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Sigmoid => exact_sigmoid(x),
        Activation::Tanh => exact_tanh(x),
    }
}

/// `y_j = sum_i kernel[i][j] * x_i + bias_j`; `kernel` is `(in, units)`.
pub fn dense_forward(x: &Tensor, kernel: &[f32], bias: &[f32]) -> Tensor {
    let units = bias.len();
    let n = x.data.len();
    assert_eq!(kernel.len(), n * units);
    let data = (0..units)
        .map(|j| {
            let mut acc = 0.0f32;
            for i in 0..n {
                acc += kernel[i * units + j] * x.data[i];
            }
            acc + bias[j]
        })
        .collect();
    Tensor::new(TensorShape::Flat(units), data)
}

/// Cross-correlation with `(kh, kw, cin, cout)` kernel. `same` padding
/// adds zeros, the odd extra row/column going to the bottom/right.
pub fn conv2d_forward(x: &Tensor, kernel: &[f32], bias: &[f32], window: Window) -> Tensor {
    let (_, w, cin) = x.shape.hwc();
    let cout = bias.len();
    let [kh, kw] = window.size;
    assert_eq!(kernel.len(), kh * kw * cin * cout);
    let (ay, ax) = window.axes(x.shape);
    let mut out = Tensor::zeros(TensorShape::spatial(ay.output, ax.output, cout));
    for oy in 0..ay.output {
        for ox in 0..ax.output {
            let (y0, x0) = (ay.origin(oy), ax.origin(ox));
            for co in 0..cout {
                let mut acc = 0.0f32;
                for ky in ay.valid_taps(oy) {
                    let iy = (y0 + ky as isize) as usize;
                    for kx in ax.valid_taps(ox) {
                        let ix = (x0 + kx as isize) as usize;
                        let px = (iy * w + ix) * cin;
                        let kbase = (ky * kw + kx) * cin;
                        for ci in 0..cin {
                            acc += kernel[(kbase + ci) * cout + co] * x.data[px + ci];
                        }
                    }
                }
                out.data[(oy * ax.output + ox) * cout + co] = acc + bias[co];
            }
        }
    }
    out
}

/// Per-channel spatial convolution; `kernel` is `(kh, kw, c)` (the
/// trailing unit multiplier axis of the file layout is implicit).
pub fn depthwise_conv2d_forward(
    x: &Tensor,
    kernel: &[f32],
    bias: &[f32],
    window: Window,
) -> Tensor {
    let (_, w, c) = x.shape.hwc();
    let [kh, kw] = window.size;
    assert_eq!(kernel.len(), kh * kw * c);
    let (ay, ax) = window.axes(x.shape);
    let mut out = Tensor::zeros(TensorShape::spatial(ay.output, ax.output, c));
    for oy in 0..ay.output {
        for ox in 0..ax.output {
            let (y0, x0) = (ay.origin(oy), ax.origin(ox));
            for ch in 0..c {
                let mut acc = 0.0f32;
                for ky in ay.valid_taps(oy) {
                    let iy = (y0 + ky as isize) as usize;
                    for kx in ax.valid_taps(ox) {
                        let ix = (x0 + kx as isize) as usize;
                        acc += kernel[(ky * kw + kx) * c + ch] * x.data[(iy * w + ix) * c + ch];
                    }
                }
                out.data[(oy * ax.output + ox) * c + ch] = acc + bias[ch];
            }
        }
    }
    out
}

/// Window max or mean per channel. Padded positions are excluded, so an
/// average under `same` padding divides by the count of real elements.
pub fn pool_forward(x: &Tensor, kind: PoolKind, window: Window) -> Tensor {
    let (_, w, c) = x.shape.hwc();
    let (ay, ax) = window.axes(x.shape);
    let mut out = Tensor::zeros(TensorShape::spatial(ay.output, ax.output, c));
    for oy in 0..ay.output {
        for ox in 0..ax.output {
            let (y0, x0) = (ay.origin(oy), ax.origin(ox));
            let (ty, tx) = (ay.valid_taps(oy), ax.valid_taps(ox));
            let count = (ty.len() * tx.len()) as f32;
            for ch in 0..c {
                let mut acc: Option<f32> = None;
                for ky in ty.clone() {
                    let iy = (y0 + ky as isize) as usize;
                    for kx in tx.clone() {
                        let ix = (x0 + kx as isize) as usize;
                        let v = x.data[(iy * w + ix) * c + ch];
                        acc = Some(match (acc, kind) {
                            (None, _) => v,
                            (Some(m), PoolKind::Max) => {
                                if m > v {
                                    m
                                } else {
                                    v
                                }
                            }
                            (Some(s), PoolKind::Avg) => s + v,
                        });
                    }
                }
                let v = acc.unwrap_or(0.0);
                out.data[(oy * ax.output + ox) * c + ch] = match kind {
                    PoolKind::Max => v,
                    PoolKind::Avg => v / count,
                };
            }
        }
    }
    out
}

pub fn batchnorm_forward(x: &Tensor, p: &BatchNormParams) -> Tensor {
    let c = x.shape.channels();
    assert_eq!(p.channels(), c);
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| p.scale[i % c] * v + p.offset[i % c])
        .collect();
    Tensor::new(x.shape, data)
}

pub fn activation_forward(x: &Tensor, tag: Activation) -> Tensor {
    Tensor::new(x.shape, x.data.iter().map(|&v| activate(tag, v)).collect())
}

/// Softmax over the last axis: a max pass, an exp pass accumulating the
/// sum, then a normalization pass.
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let c = x.shape.channels();
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(c) {
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        let start = data.len();
        for &v in row {
            let e = exact_exp(v - max);
            sum += e;
            data.push(e);
        }
        for e in &mut data[start..] {
            *e /= sum;
        }
    }
    Tensor::new(x.shape, data)
}

pub fn upsample_forward(x: &Tensor, size: [usize; 2]) -> Tensor {
    let (h, w, c) = x.shape.hwc();
    let (oh, ow) = (h * size[0], w * size[1]);
    let mut out = Tensor::zeros(TensorShape::spatial(oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let src = ((oy / size[0]) * w + ox / size[1]) * c;
            let dst = (oy * ow + ox) * c;
            out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    out
}

/// Elementwise sum in input order: `((a + b) + c) + ...`.
pub fn add_forward(inputs: &[&Tensor]) -> Tensor {
    let mut data = inputs[0].data.clone();
    for t in &inputs[1..] {
        for (d, v) in data.iter_mut().zip(&t.data) {
            *d += v;
        }
    }
    Tensor::new(inputs[0].shape, data)
}

/// Concatenation along the channel axis.
pub fn concat_forward(inputs: &[&Tensor]) -> Tensor {
    let channels: usize = inputs.iter().map(|t| t.shape.channels()).sum();
    let shape = match inputs[0].shape {
        TensorShape::Flat(_) => TensorShape::Flat(channels),
        TensorShape::Spatial { height, width, .. } => TensorShape::spatial(height, width, channels),
    };
    let pixels = shape.element_count() / channels;
    let mut data = Vec::with_capacity(shape.element_count());
    for p in 0..pixels {
        for t in inputs {
            let c = t.shape.channels();
            data.extend_from_slice(&t.data[p * c..(p + 1) * c]);
        }
    }
    Tensor::new(shape, data)
}

/// Evaluates one node given its input tensors.
pub fn eval_op(op: &LayerOp, inputs: &[&Tensor], out_shape: TensorShape) -> Tensor {
    match op {
        LayerOp::Input { .. } => inputs[0].clone(),
        LayerOp::Dense {
            activation,
            kernel,
            bias,
            ..
        } => activation_forward(&dense_forward(inputs[0], kernel, bias), *activation),
        LayerOp::Conv2D {
            kernel_size,
            strides,
            padding,
            activation,
            kernel,
            bias,
            ..
        } => {
            let window = Window {
                size: *kernel_size,
                strides: *strides,
                padding: *padding,
            };
            activation_forward(
                &conv2d_forward(inputs[0], kernel, bias, window),
                *activation,
            )
        }
        LayerOp::DepthwiseConv2D {
            kernel_size,
            strides,
            padding,
            activation,
            kernel,
            bias,
            ..
        } => {
            let window = Window {
                size: *kernel_size,
                strides: *strides,
                padding: *padding,
            };
            activation_forward(
                &depthwise_conv2d_forward(inputs[0], kernel, bias, window),
                *activation,
            )
        }
        LayerOp::Pool {
            kind,
            pool_size,
            strides,
            padding,
        } => pool_forward(
            inputs[0],
            *kind,
            Window {
                size: *pool_size,
                strides: *strides,
                padding: *padding,
            },
        ),
        LayerOp::BatchNorm(p) => batchnorm_forward(inputs[0], p),
        LayerOp::Activation(tag) => activation_forward(inputs[0], *tag),
        LayerOp::Softmax => softmax_forward(inputs[0]),
        LayerOp::Flatten => Tensor::new(out_shape, inputs[0].data.clone()),
        LayerOp::UpSample2D { size } => upsample_forward(inputs[0], *size),
        LayerOp::Add => add_forward(inputs),
        LayerOp::Concatenate => concat_forward(inputs),
    }
}

/// Runs the whole graph in topological order, one fresh tensor per node.
pub fn interpret(
    graph: &ComputationGraph,
    inputs: &[Tensor],
) -> Result<Vec<Tensor>, InterpretError> {
    if inputs.len() != graph.inputs.len() {
        return Err(InterpretError::InputCount {
            expected: graph.inputs.len(),
            actual: inputs.len(),
        });
    }
    let mut values: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    for (index, (&id, t)) in graph.inputs.iter().zip(inputs).enumerate() {
        let expected = graph.shape(id);
        if t.shape != expected {
            return Err(InterpretError::InputShapeMismatch {
                index,
                expected,
                actual: t.shape,
            });
        }
        values[id.0] = Some(t.clone());
    }
    for i in topological_order(graph) {
        let node = &graph.nodes[i];
        if matches!(node.op, LayerOp::Input { .. }) {
            continue;
        }
        let args: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|t| values[t.0].as_ref().expect("producer evaluated first"))
            .collect();
        let out = eval_op(&node.op, &args, node.shape);
        values[i] = Some(out);
    }
    Ok(graph
        .outputs
        .iter()
        .map(|t| values[t.0].clone().expect("outputs are evaluated"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: &[f32]) -> Tensor {
        Tensor::new(TensorShape::Flat(v.len()), v.to_vec())
    }

    fn window(k: usize, s: usize, padding: Padding) -> Window {
        Window {
            size: [k, k],
            strides: [s, s],
            padding,
        }
    }

    #[test]
    fn dense_identity_and_matrix() {
        let x = flat(&[1.0, -2.0, 3.0, 0.5]);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert_eq!(dense_forward(&x, &eye, &[0.0; 4]), x);

        // kernel is (in, units) = transpose of A
        let a: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let mut kernel = vec![0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                kernel[c * 4 + r] = a[r * 4 + c];
            }
        }
        let y = dense_forward(&flat(&[1.0; 4]), &kernel, &[0.0; 4]);
        assert_eq!(y.data, vec![10.0, 26.0, 42.0, 58.0]);
    }

    #[test]
    fn conv_identity_and_ones() {
        let x = Tensor::new(
            TensorShape::spatial(2, 3, 1),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        );
        assert_eq!(
            conv2d_forward(&x, &[1.0], &[0.0], window(1, 1, Padding::Valid)),
            x
        );
        let ones = Tensor::new(TensorShape::spatial(3, 3, 1), vec![1.0; 9]);
        let y = conv2d_forward(&ones, &[1.0; 9], &[0.0], window(3, 1, Padding::Valid));
        assert_eq!(y.shape, TensorShape::spatial(1, 1, 1));
        assert_eq!(y.data, vec![9.0]);
    }

    #[test]
    fn depthwise_channels_independent() {
        let x = Tensor::new(TensorShape::spatial(1, 2, 2), vec![1.0, 10.0, 2.0, 20.0]);
        assert_eq!(
            depthwise_conv2d_forward(&x, &[1.0, 1.0], &[0.0, 0.0], window(1, 1, Padding::Valid)),
            x
        );
        let k = [1.0, 0.0, 0.0, 1.0]; // 1x2 kernel: ch0 takes left, ch1 takes right
        let w = Window {
            size: [1, 2],
            strides: [1, 1],
            padding: Padding::Valid,
        };
        let y = depthwise_conv2d_forward(&x, &k, &[0.0, 0.0], w);
        assert_eq!(y.data, vec![1.0, 20.0]);
    }

    #[test]
    fn pools() {
        let x = Tensor::new(TensorShape::spatial(2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]);
        let w = window(2, 2, Padding::Valid);
        assert_eq!(pool_forward(&x, PoolKind::Max, w).data, vec![4.0]);
        assert_eq!(pool_forward(&x, PoolKind::Avg, w).data, vec![2.5]);
        // same padding on 2x2 with 3x3 window averages only real cells
        let w = window(3, 1, Padding::Same);
        assert_eq!(pool_forward(&x, PoolKind::Avg, w).data[0], 2.5);
    }

    #[test]
    fn batchnorm_cases() {
        let x = Tensor::new(TensorShape::spatial(1, 2, 2), vec![1.0; 4]);
        let id = BatchNormParams {
            scale: vec![1.0, 1.0],
            offset: vec![0.0, 0.0],
        };
        assert_eq!(batchnorm_forward(&x, &id), x);
        let p = BatchNormParams {
            scale: vec![2.0, 2.0],
            offset: vec![-1.0, -1.0],
        };
        assert_eq!(batchnorm_forward(&x, &p).data, vec![1.0; 4]);
    }

    #[test]
    fn activations_and_softmax() {
        let y = activation_forward(&flat(&[-1.0, 2.0]), Activation::Relu);
        assert_eq!(y.data, vec![0.0, 2.0]);
        assert_eq!(softmax_forward(&flat(&[0.0, 0.0])).data, vec![0.5, 0.5]);
        let s = softmax_forward(&flat(&[1.0, -3.0, 7.5, 0.25, 100.0]));
        let sum: f32 = s.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(s.data.iter().all(|&v| v >= 0.0));
        assert_eq!(activate(Activation::Sigmoid, 0.0), 0.5);
    }

    #[test]
    fn upsample_concat_add() {
        let x = Tensor::new(TensorShape::spatial(1, 2, 1), vec![1.0, 2.0]);
        let up = upsample_forward(&x, [2, 2]);
        assert_eq!(up.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let y = Tensor::new(TensorShape::spatial(1, 2, 2), vec![5.0, 6.0, 7.0, 8.0]);
        let cat = concat_forward(&[&x, &y]);
        assert_eq!(cat.data, vec![1.0, 5.0, 6.0, 2.0, 7.0, 8.0]);
        assert_eq!(add_forward(&[&x, &x, &x]).data, vec![3.0, 6.0]);
    }
}
