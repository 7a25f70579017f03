use cnnjit::approx::{self, ActivationMode};
use cnnjit::interp::{exact_exp, exact_sigmoid, exact_tanh};
use cnnjit::model::Activation;
use cnnjit::{ApproximationOptions, CodegenOptions, CompiledNetwork, TensorShape};
use cnnjit_testkit::{self as kit, Net};
use proptest::prelude::*;

fn compiled_activation(n: usize, tag: Activation, mode: ActivationMode) -> CompiledNetwork {
    let mut net = Net::new();
    let x = net.input(TensorShape::Flat(n));
    let y = net.activation(&x, tag);
    let options = CodegenOptions {
        approximations: ApproximationOptions {
            activation_mode: mode,
            ..Default::default()
        },
        ..Default::default()
    };
    CompiledNetwork::compile(&net.build(&[&y]), &options).unwrap()
}

fn jit_apply(net: &mut CompiledNetwork, xs: &[f32]) -> Vec<f32> {
    net.input_view(0).unwrap().copy_from_slice(xs);
    net.apply();
    net.output_view(0).unwrap().to_vec()
}

fn grid(lo: f32, hi: f32, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32)
        .collect()
}

const TAGS: [Activation; 2] = [Activation::Tanh, Activation::Sigmoid];
const MODES: [ActivationMode; 2] = [ActivationMode::Rational, ActivationMode::FastExp];

#[test]
fn generated_code_matches_scalar_mirror_bitwise() {
    let mut xs = grid(-12.0, 12.0, 4001);
    xs.extend([
        0.0, -0.0, 5.7, -5.7, 5.7001, 9.0, -9.0, 87.0, -88.0, 1e30, -1e30,
    ]);
    for tag in TAGS {
        for mode in MODES {
            let mut net = compiled_activation(xs.len(), tag, mode);
            let got = jit_apply(&mut net, &xs);
            for (x, y) in xs.iter().zip(&got) {
                let want = approx::activate(mode, tag, *x);
                assert_eq!(
                    y.to_bits(),
                    want.to_bits(),
                    "{tag} {mode:?} at {x}: {y} vs {want}"
                );
            }
        }
    }
}

fn max_error(xs: &[f32], f: impl Fn(f32) -> f32, exact: impl Fn(f32) -> f32) -> f32 {
    xs.iter()
        .map(|&x| (f(x) - exact(x)).abs())
        .fold(0.0, f32::max)
}

#[test]
fn rational_tanh_error_bounds() {
    let near = grid(-5.0, 5.0, 100_000);
    let wide = grid(-8.0, 8.0, 100_000);
    assert!(max_error(&near, approx::tanh_rational, exact_tanh) <= 1e-4);
    assert!(max_error(&wide, approx::tanh_rational, exact_tanh) <= 2e-3);
}

#[test]
fn rational_sigmoid_error_bounds() {
    // sigmoid(x) = tanh(x/2)/2 + 1/2, so the tanh bounds on the halved
    // domain hold at half the size
    let near = grid(-10.0, 10.0, 100_000);
    let wide = grid(-16.0, 16.0, 100_000);
    assert!(max_error(&near, approx::sigmoid_rational, exact_sigmoid) <= 0.5e-4);
    assert!(max_error(&wide, approx::sigmoid_rational, exact_sigmoid) <= 1e-3);
}

#[test]
fn fast_exp_relative_error_on_clamped_domain() {
    let xs = grid(-87.0, 88.0, 100_000);
    let worst = xs
        .iter()
        .map(|&x| ((approx::exp_fast(x) - exact_exp(x)) / exact_exp(x)).abs())
        .fold(0.0, f32::max);
    assert!(worst <= 0.06, "relative error {worst}");
}

proptest! {
    #[test]
    fn rational_tanh_is_odd_and_bounded(x in -50.0f32..50.0) {
        let y = approx::tanh_rational(x);
        prop_assert_eq!(y, -approx::tanh_rational(-x));
        prop_assert!(y.abs() <= 1.0);
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -1e4f32..1e4) {
        for mode in MODES {
            let y = approx::activate(mode, Activation::Sigmoid, x);
            prop_assert!((0.0..=1.0).contains(&y), "{:?} {} -> {}", mode, x, y);
        }
    }

    #[test]
    fn fast_exp_is_monotone(a in -87.0f32..88.0, d in 0.0f32..5.0) {
        prop_assert!(approx::exp_fast(a) <= approx::exp_fast((a + d).min(88.0)));
    }
}

#[test]
fn fast_softmax_preserves_clear_argmax() {
    let mut rng = kit::rng(99);
    for n in [2, 3, 5, 8, 13, 32] {
        let mut net = Net::new();
        let x = net.input(TensorShape::Flat(n));
        let y = net.softmax(&x);
        let mut net =
            CompiledNetwork::compile(&net.build(&[&y]), &CodegenOptions::default()).unwrap();
        for _ in 0..500 {
            let logits = kit::uniform(&mut rng, n, 8.0);
            let out = jit_apply(&mut net, &logits);
            let argmax = |v: &[f32]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] >= 0.5 {
                assert_eq!(argmax(&out), argmax(&logits), "{logits:?} -> {out:?}");
            }
            let sum: f32 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
        }
    }
}
