//! Seeded random models for property tests, plus comparison helpers.

use std::collections::HashMap;

use cnnjit::model::{Activation, LayerConfig, LayerKind, ModelBuilder, Padding, WeightRole};
use cnnjit::optimizer::FusionPlan;
use cnnjit::planner::{BufferAssignment, ALIGN};
use cnnjit::tensor::WindowAxis;
use cnnjit::{CompiledNetwork, ComputationGraph, Model, Tensor, TensorId, TensorShape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng as TestRng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut TestRng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

pub fn random_tensor(rng: &mut TestRng, shape: TensorShape) -> Tensor {
    Tensor::new(shape, uniform(rng, shape.element_count(), 1.0))
}

pub fn random_inputs(rng: &mut TestRng, graph: &ComputationGraph) -> Vec<Tensor> {
    graph
        .input_shapes()
        .into_iter()
        .map(|s| random_tensor(rng, s))
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f32::max)
}

/// Copies `inputs` in, applies, and returns every output.
pub fn run(net: &mut CompiledNetwork, inputs: &[Tensor]) -> Vec<Vec<f32>> {
    for (i, t) in inputs.iter().enumerate() {
        net.input_view(i).unwrap().copy_from_slice(&t.data);
    }
    net.apply();
    (0..net.outputs().len())
        .map(|i| net.output_view(i).unwrap().to_vec())
        .collect()
}

/// Largest elementwise difference over all outputs.
pub fn max_abs_diff_all(a: &[Vec<f32>], b: &[Tensor]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| max_abs_diff(x, &y.data))
        .fold(0.0, f32::max)
}

fn window_output(
    input: TensorShape,
    size: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
    channels: usize,
) -> Option<TensorShape> {
    let (h, w, _) = input.hwc();
    let ay = WindowAxis::new(h, size[0], strides[0], padding)?;
    let ax = WindowAxis::new(w, size[1], strides[1], padding)?;
    Some(TensorShape::spatial(ay.output, ax.output, channels))
}

/// A [`ModelBuilder`] that tracks shapes and names layers itself.
pub struct Net {
    builder: ModelBuilder,
    shapes: HashMap<String, TensorShape>,
    count: usize,
}

impl Default for Net {
    fn default() -> Self {
        Self::new()
    }
}

impl Net {
    pub fn new() -> Self {
        Net {
            builder: ModelBuilder::new(),
            shapes: HashMap::new(),
            count: 0,
        }
    }

    pub fn shape(&self, name: &str) -> TensorShape {
        self.shapes[name]
    }

    fn fresh(&mut self, prefix: &str, shape: TensorShape) -> String {
        let name = format!("{prefix}{}", self.count);
        self.count += 1;
        self.shapes.insert(name.clone(), shape);
        name
    }

    pub fn input(&mut self, shape: TensorShape) -> String {
        let name = self.fresh("in", shape);
        self.builder.input(&name, &shape.dims());
        name
    }

    pub fn dense(
        &mut self,
        rng: &mut TestRng,
        x: &str,
        units: usize,
        activation: Activation,
    ) -> String {
        let n = self.shape(x).element_count();
        let scale = 1.0 / (n as f32).sqrt();
        let kernel = uniform(rng, n * units, scale);
        let bias = uniform(rng, units, 0.5);
        let name = self.fresh("dense", TensorShape::Flat(units));
        self.builder.dense(&name, x, activation, kernel, bias);
        name
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        rng: &mut TestRng,
        x: &str,
        filters: usize,
        size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
    ) -> Option<String> {
        let input = self.shape(x);
        let out = window_output(input, size, strides, padding, filters)?;
        let cin = input.channels();
        let fan_in = size[0] * size[1] * cin;
        let kernel = uniform(rng, fan_in * filters, 1.0 / (fan_in as f32).sqrt());
        let bias = uniform(rng, filters, 0.5);
        let name = self.fresh("conv", out);
        self.builder
            .conv2d(&name, x, size, strides, padding, activation, kernel, bias);
        Some(name)
    }

    pub fn depthwise(
        &mut self,
        rng: &mut TestRng,
        x: &str,
        size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
    ) -> Option<String> {
        let input = self.shape(x);
        let c = input.channels();
        let out = window_output(input, size, strides, padding, c)?;
        let taps = size[0] * size[1];
        let kernel = uniform(rng, taps * c, 1.0 / (taps as f32).sqrt());
        let bias = uniform(rng, c, 0.5);
        let name = self.fresh("dw", out);
        self.builder.layer(
            &name,
            LayerConfig::DepthwiseConv2D {
                kernel_size: size,
                strides,
                padding,
                activation,
                use_bias: true,
            },
            &[x],
            vec![
                (WeightRole::Kernel, vec![size[0], size[1], c, 1], kernel),
                (WeightRole::Bias, vec![c], bias),
            ],
        );
        Some(name)
    }

    pub fn pool(
        &mut self,
        x: &str,
        max: bool,
        size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    ) -> Option<String> {
        let input = self.shape(x);
        let out = window_output(input, size, strides, padding, input.channels())?;
        let name = self.fresh("pool", out);
        let config = if max {
            LayerConfig::MaxPool2D {
                pool_size: size,
                strides,
                padding,
            }
        } else {
            LayerConfig::AvgPool2D {
                pool_size: size,
                strides,
                padding,
            }
        };
        self.builder.simple(&name, config, &[x]);
        Some(name)
    }

    pub fn batch_norm(&mut self, rng: &mut TestRng, x: &str) -> String {
        let shape = self.shape(x);
        let c = shape.channels();
        let scale = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let offset = uniform(rng, c, 0.5);
        let name = self.fresh("bn", shape);
        self.builder.batch_norm(&name, x, scale, offset);
        name
    }

    pub fn activation(&mut self, x: &str, activation: Activation) -> String {
        let shape = self.shape(x);
        let name = self.fresh("act", shape);
        self.builder
            .simple(&name, LayerConfig::Activation { activation }, &[x]);
        name
    }

    pub fn softmax(&mut self, x: &str) -> String {
        let shape = self.shape(x);
        let name = self.fresh("softmax", shape);
        self.builder.simple(&name, LayerConfig::Softmax, &[x]);
        name
    }

    pub fn flatten(&mut self, x: &str) -> String {
        let n = self.shape(x).element_count();
        let name = self.fresh("flat", TensorShape::Flat(n));
        self.builder.simple(&name, LayerConfig::Flatten, &[x]);
        name
    }

    pub fn upsample(&mut self, x: &str, size: [usize; 2]) -> String {
        let (h, w, c) = self.shape(x).hwc();
        let name = self.fresh("up", TensorShape::spatial(h * size[0], w * size[1], c));
        self.builder
            .simple(&name, LayerConfig::UpSample2D { size }, &[x]);
        name
    }

    pub fn add(&mut self, xs: &[&str]) -> String {
        let shape = self.shape(xs[0]);
        let name = self.fresh("add", shape);
        self.builder.simple(&name, LayerConfig::Add, xs);
        name
    }

    pub fn concat(&mut self, xs: &[&str]) -> String {
        let c: usize = xs.iter().map(|x| self.shape(x).channels()).sum();
        let shape = match self.shape(xs[0]) {
            TensorShape::Flat(_) => TensorShape::Flat(c),
            TensorShape::Spatial { height, width, .. } => TensorShape::spatial(height, width, c),
        };
        let name = self.fresh("cat", shape);
        self.builder.simple(&name, LayerConfig::Concatenate, xs);
        name
    }

    pub fn build(self, outputs: &[&str]) -> Model {
        self.builder
            .build(outputs)
            .expect("generated model is valid")
    }
}

fn exact_activation(rng: &mut TestRng) -> Activation {
    *[Activation::Linear, Activation::Relu].choose(rng).unwrap()
}

fn padding(rng: &mut TestRng) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn pair(rng: &mut TestRng, lo: usize, hi: usize) -> [usize; 2] {
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

fn spatial(rng: &mut TestRng, max_hw: usize, max_c: usize) -> TensorShape {
    TensorShape::spatial(
        rng.gen_range(1..=max_hw),
        rng.gen_range(1..=max_hw),
        rng.gen_range(1..=max_c),
    )
}

/// Layer kinds a single-layer case can be built for.
pub const CASE_KINDS: [LayerKind; 12] = [
    LayerKind::Dense,
    LayerKind::Conv2D,
    LayerKind::DepthwiseConv2D,
    LayerKind::MaxPool2D,
    LayerKind::AvgPool2D,
    LayerKind::BatchNorm,
    LayerKind::Activation,
    LayerKind::Softmax,
    LayerKind::Flatten,
    LayerKind::UpSample2D,
    LayerKind::Add,
    LayerKind::Concatenate,
];

/// One layer of `kind` with random configuration between network
/// inputs and outputs. Activations are limited to linear and relu, so the
/// compiled result is exact up to reassociation.
pub fn single_layer_model(rng: &mut TestRng, kind: LayerKind) -> Model {
    loop {
        if let Some(model) = try_single_layer(rng, kind) {
            return model;
        }
    }
}

fn try_single_layer(rng: &mut TestRng, kind: LayerKind) -> Option<Model> {
    let mut net = Net::new();
    let out = match kind {
        LayerKind::Dense => {
            let x = if rng.gen_bool(0.3) {
                let x = net.input(spatial(rng, 4, 6));
                net.flatten(&x)
            } else {
                net.input(TensorShape::Flat(rng.gen_range(1..=80)))
            };
            let act = exact_activation(rng);
            let units = rng.gen_range(1..=70);
            net.dense(rng, &x, units, act)
        }
        LayerKind::Conv2D => {
            let x = net.input(spatial(rng, 9, 6));
            let act = exact_activation(rng);
            let filters = rng.gen_range(1..=20);
            let (size, strides, pad) = (pair(rng, 1, 3), pair(rng, 1, 2), padding(rng));
            net.conv(rng, &x, filters, size, strides, pad, act)?
        }
        LayerKind::DepthwiseConv2D => {
            let x = net.input(spatial(rng, 9, 20));
            let act = exact_activation(rng);
            let (size, strides, pad) = (pair(rng, 1, 3), pair(rng, 1, 2), padding(rng));
            net.depthwise(rng, &x, size, strides, pad, act)?
        }
        LayerKind::MaxPool2D | LayerKind::AvgPool2D => {
            let x = net.input(spatial(rng, 9, 20));
            let (size, strides, pad) = (pair(rng, 1, 3), pair(rng, 1, 3), padding(rng));
            net.pool(&x, kind == LayerKind::MaxPool2D, size, strides, pad)?
        }
        LayerKind::BatchNorm => {
            let x = if rng.gen_bool(0.5) {
                net.input(TensorShape::Flat(rng.gen_range(1..=130)))
            } else {
                net.input(spatial(rng, 6, 70))
            };
            net.batch_norm(rng, &x)
        }
        LayerKind::Activation => {
            let x = if rng.gen_bool(0.5) {
                net.input(TensorShape::Flat(rng.gen_range(1..=300)))
            } else {
                net.input(spatial(rng, 8, 12))
            };
            let act = exact_activation(rng);
            net.activation(&x, act)
        }
        LayerKind::Softmax => {
            let x = net.input(TensorShape::Flat(rng.gen_range(1..=64)));
            net.softmax(&x)
        }
        LayerKind::Flatten => {
            let x = net.input(spatial(rng, 6, 8));
            net.flatten(&x)
        }
        LayerKind::UpSample2D => {
            let x = net.input(spatial(rng, 6, 20));
            net.upsample(&x, pair(rng, 1, 3))
        }
        LayerKind::Add => {
            let shape = if rng.gen_bool(0.5) {
                TensorShape::Flat(rng.gen_range(1..=200))
            } else {
                spatial(rng, 6, 12)
            };
            let xs: Vec<String> = (0..rng.gen_range(2..=4))
                .map(|_| net.input(shape))
                .collect();
            let refs: Vec<&str> = xs.iter().map(String::as_str).collect();
            net.add(&refs)
        }
        LayerKind::Concatenate => {
            let base = spatial(rng, 6, 10);
            let flat = rng.gen_bool(0.3);
            let xs: Vec<String> = (0..rng.gen_range(2..=3))
                .map(|_| {
                    let c = rng.gen_range(1..=10);
                    let shape = if flat {
                        TensorShape::Flat(c)
                    } else {
                        let (h, w, _) = base.hwc();
                        TensorShape::spatial(h, w, c)
                    };
                    net.input(shape)
                })
                .collect();
            let refs: Vec<&str> = xs.iter().map(String::as_str).collect();
            net.concat(&refs)
        }
        LayerKind::Input => unreachable!("inputs are not a layer case"),
    };
    Some(net.build(&[&out]))
}

/// The three batch-norm neighborhoods fusion rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPattern {
    /// Dense/Conv followed by BN.
    After,
    /// BN followed by Dense/Conv.
    Before,
    /// Dense/Conv, relu, BN.
    AfterActivation,
}

pub const BN_PATTERNS: [BnPattern; 3] = [
    BnPattern::After,
    BnPattern::Before,
    BnPattern::AfterActivation,
];

/// A small network exercising `pattern` with a dense or convolution layer,
/// optionally surrounded by more layers.
pub fn bn_pattern_model(rng: &mut TestRng, pattern: BnPattern) -> Model {
    loop {
        let mut net = Net::new();
        let conv = rng.gen_bool(0.5);
        let x = if conv {
            net.input(spatial(rng, 8, 6))
        } else {
            net.input(TensorShape::Flat(rng.gen_range(1..=48)))
        };
        let weighted = |net: &mut Net, rng: &mut TestRng, x: &str, act: Activation| {
            if conv {
                let filters = rng.gen_range(1..=12);
                let (size, strides) = (pair(rng, 1, 3), pair(rng, 1, 2));
                let pad = if pattern == BnPattern::Before && rng.gen_bool(0.7) {
                    Padding::Valid
                } else {
                    padding(rng)
                };
                net.conv(rng, x, filters, size, strides, pad, act)
            } else {
                let units = rng.gen_range(1..=40);
                Some(net.dense(rng, x, units, act))
            }
        };
        let out = match pattern {
            BnPattern::After => {
                let Some(y) = weighted(&mut net, rng, &x, Activation::Linear) else {
                    continue;
                };
                net.batch_norm(rng, &y)
            }
            BnPattern::Before => {
                let b = net.batch_norm(rng, &x);
                let act = exact_activation(rng);
                let Some(y) = weighted(&mut net, rng, &b, act) else {
                    continue;
                };
                y
            }
            BnPattern::AfterActivation => {
                let separate = rng.gen_bool(0.5);
                let act = if separate {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                let Some(y) = weighted(&mut net, rng, &x, act) else {
                    continue;
                };
                let y = if separate {
                    net.activation(&y, Activation::Relu)
                } else {
                    y
                };
                net.batch_norm(rng, &y)
            }
        };
        let out = if rng.gen_bool(0.3) {
            net.activation(&out, Activation::Relu)
        } else {
            out
        };
        return net.build(&[&out]);
    }
}

/// A random DAG of up to `max_layers` layers over one or two inputs, with
/// exact activations only.
pub fn random_graph_model(rng: &mut TestRng, max_layers: usize) -> Model {
    let mut net = Net::new();
    let mut live = vec![net.input(spatial(rng, 7, 6))];
    if rng.gen_bool(0.2) {
        let s = net.shape(&live[0]);
        live.push(net.input(s));
    }
    let layers = rng.gen_range(1..=max_layers);
    for _ in 0..layers {
        let x = live.choose(rng).unwrap().clone();
        let shape = net.shape(&x);
        let is_spatial = shape.rank() == 3;
        let pick = rng.gen_range(0..12);
        let next = match pick {
            0 if is_spatial => {
                let filters = rng.gen_range(1..=8);
                let act = exact_activation(rng);
                let (size, strides, pad) = (pair(rng, 1, 3), pair(rng, 1, 2), padding(rng));
                net.conv(rng, &x, filters, size, strides, pad, act)
            }
            1 if is_spatial => {
                let act = exact_activation(rng);
                let (size, strides, pad) = (pair(rng, 1, 3), pair(rng, 1, 2), padding(rng));
                net.depthwise(rng, &x, size, strides, pad, act)
            }
            2 if is_spatial => {
                let max = rng.gen_bool(0.5);
                let (size, strides, pad) = (pair(rng, 1, 2), pair(rng, 1, 2), padding(rng));
                net.pool(&x, max, size, strides, pad)
            }
            3 if is_spatial && shape.element_count() <= 32 => {
                Some(net.upsample(&x, pair(rng, 1, 2)))
            }
            4 if is_spatial => Some(net.flatten(&x)),
            5 | 6 => Some(net.batch_norm(rng, &x)),
            7 => Some(net.activation(&x, Activation::Relu)),
            8 if !is_spatial => {
                let act = exact_activation(rng);
                let units = rng.gen_range(1..=24);
                Some(net.dense(rng, &x, units, act))
            }
            9 => {
                let same: Vec<String> = live
                    .iter()
                    .filter(|t| **t != x && net.shape(t) == shape)
                    .cloned()
                    .collect();
                same.first().map(|y| net.add(&[&x, y]))
            }
            10 => {
                let compatible: Vec<String> = live
                    .iter()
                    .filter(|t| {
                        let s = net.shape(t);
                        s.rank() == shape.rank()
                            && (s.rank() == 1
                                || s.hwc().0 == shape.hwc().0 && s.hwc().1 == shape.hwc().1)
                    })
                    .cloned()
                    .collect();
                let y = compatible.choose(rng).unwrap().clone();
                Some(net.concat(&[&x, &y]))
            }
            11 => Some(net.activation(&x, Activation::Linear)),
            _ => None,
        };
        if let Some(t) = next {
            live.push(t);
        }
    }
    let last = live.last().unwrap().clone();
    let mut outputs = vec![last.clone()];
    if live.len() > 2 && rng.gen_bool(0.3) {
        let other = live[rng.gen_range(0..live.len() - 1)].clone();
        if !other.starts_with("in") && other != last {
            outputs.push(other);
        }
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    net.build(&refs)
}

fn bytes(plan: &FusionPlan, t: TensorId) -> usize {
    (plan.shape(t).element_count() * 4).div_ceil(ALIGN) * ALIGN
}

/// Replays the schedule on a byte-ownership map of the arena. Each unit
/// first checks that every input still owns its bytes, then claims its
/// output range. Returns the first violation.
pub fn shadow_run(plan: &FusionPlan, a: &BufferAssignment) -> Result<(), String> {
    let mut owner: Vec<Option<TensorId>> = vec![None; a.arena_bytes];
    let claim = |owner: &mut Vec<Option<TensorId>>, t: TensorId| {
        let start = a.offset(t);
        for b in &mut owner[start..start + bytes(plan, t)] {
            *b = Some(t);
        }
    };
    let check = |owner: &[Option<TensorId>], t: TensorId, at: &str| {
        let start = a.offset(t);
        match owner[start..start + bytes(plan, t)]
            .iter()
            .find(|o| **o != Some(t))
        {
            Some(other) => Err(format!("{t} read at {at} but overwritten by {other:?}")),
            None => Ok(()),
        }
    };
    for &t in &plan.inputs {
        claim(&mut owner, t);
    }
    for (u, unit) in plan.units.iter().enumerate() {
        for &t in &unit.inputs {
            check(&owner, t, &format!("unit {u}"))?;
        }
        claim(&mut owner, unit.output);
    }
    for &t in &plan.outputs {
        check(&owner, t, "exit")?;
    }
    Ok(())
}

/// Named networks checked into `fixtures/`, regenerated by the
/// `make_fixtures` example. Weights come from fixed seeds.
pub mod fixtures {
    use super::*;

    pub const NAMES: [&str; 6] = [
        "ball_classifier",
        "relu_convnet",
        "softmax_net",
        "identity",
        "dense_bn",
        "branchy",
    ];

    pub fn build(name: &str) -> Option<Model> {
        Some(match name {
            "ball_classifier" => ball_classifier(),
            "relu_convnet" => relu_convnet(),
            "softmax_net" => softmax_net(),
            "identity" => identity(),
            "dense_bn" => dense_bn(),
            "branchy" => branchy(),
            _ => return None,
        })
    }

    pub fn all() -> Vec<(&'static str, Model)> {
        NAMES.iter().map(|&n| (n, build(n).unwrap())).collect()
    }

    /// 32×32 grayscale patch to ball / no-ball.
    pub fn ball_classifier() -> Model {
        let mut rng = rng(0xBA11);
        let mut net = Net::new();
        let x = net.input(TensorShape::spatial(32, 32, 1));
        let mut y = x;
        for filters in [8, 16, 16] {
            y = net
                .conv(
                    &mut rng,
                    &y,
                    filters,
                    [3, 3],
                    [1, 1],
                    Padding::Same,
                    Activation::Linear,
                )
                .unwrap();
            y = net.batch_norm(&mut rng, &y);
            y = net.activation(&y, Activation::Relu);
            y = net.pool(&y, true, [2, 2], [2, 2], Padding::Valid).unwrap();
        }
        let f = net.flatten(&y);
        let d = net.dense(&mut rng, &f, 32, Activation::Relu);
        let d = net.batch_norm(&mut rng, &d);
        let o = net.dense(&mut rng, &d, 1, Activation::Sigmoid);
        net.build(&[&o])
    }

    pub fn relu_convnet() -> Model {
        let mut rng = rng(0xC0);
        let mut net = Net::new();
        let x = net.input(TensorShape::spatial(16, 16, 3));
        let c = net
            .conv(
                &mut rng,
                &x,
                12,
                [5, 5],
                [2, 2],
                Padding::Same,
                Activation::Relu,
            )
            .unwrap();
        let d = net
            .depthwise(
                &mut rng,
                &c,
                [3, 3],
                [1, 1],
                Padding::Same,
                Activation::Relu,
            )
            .unwrap();
        let p = net.pool(&d, false, [2, 2], [2, 2], Padding::Valid).unwrap();
        let c = net
            .conv(
                &mut rng,
                &p,
                10,
                [1, 1],
                [1, 1],
                Padding::Valid,
                Activation::Relu,
            )
            .unwrap();
        net.build(&[&c])
    }

    pub fn softmax_net() -> Model {
        let mut rng = rng(0x50F7);
        let mut net = Net::new();
        let x = net.input(TensorShape::Flat(20));
        let h = net.dense(&mut rng, &x, 24, Activation::Tanh);
        let o = net.dense(&mut rng, &h, 7, Activation::Linear);
        let s = net.softmax(&o);
        net.build(&[&s])
    }

    /// No layers: the output is the input.
    pub fn identity() -> Model {
        let mut net = Net::new();
        let x = net.input(TensorShape::spatial(4, 4, 2));
        net.build(&[&x])
    }

    pub fn dense_bn() -> Model {
        let mut rng = rng(0xD0);
        let mut net = Net::new();
        let x = net.input(TensorShape::Flat(30));
        let b = net.batch_norm(&mut rng, &x);
        let h = net.dense(&mut rng, &b, 17, Activation::Linear);
        let h = net.batch_norm(&mut rng, &h);
        let h = net.activation(&h, Activation::Relu);
        let h = net.dense(&mut rng, &h, 9, Activation::Relu);
        let h = net.batch_norm(&mut rng, &h);
        net.build(&[&h])
    }

    /// Two branches joined by add and concatenation, with an upsampling
    /// tail and two outputs.
    pub fn branchy() -> Model {
        let mut rng = rng(0xB4);
        let mut net = Net::new();
        let x = net.input(TensorShape::spatial(8, 8, 4));
        let a = net
            .conv(
                &mut rng,
                &x,
                6,
                [3, 3],
                [1, 1],
                Padding::Same,
                Activation::Relu,
            )
            .unwrap();
        let b = net
            .conv(
                &mut rng,
                &x,
                6,
                [1, 1],
                [1, 1],
                Padding::Valid,
                Activation::Linear,
            )
            .unwrap();
        let s = net.add(&[&a, &b]);
        let c = net.concat(&[&s, &x]);
        let p = net.pool(&c, true, [2, 2], [2, 2], Padding::Valid).unwrap();
        let u = net.upsample(&p, [2, 2]);
        let f = net.flatten(&p);
        let d = net.dense(&mut rng, &f, 5, Activation::Sigmoid);
        net.build(&[&u, &d])
    }
}
