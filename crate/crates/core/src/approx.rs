//! Scalar mirrors of the vector approximations the code generator emits.
//!
//! Each function performs the same f32 operations in the same order as the
//! generated instruction sequence, so compiled output matches these
//! bit for bit.

use crate::model::Activation;

/// Inputs are clamped to `±TANH_CLAMP` before the rational is evaluated.
pub const TANH_CLAMP: f32 = 9.0;
/// Beyond this magnitude the result is replaced by `±1`.
pub const TANH_SATURATION: f32 = 5.7;

/// Constants of the bit-manipulation exponential: the IEEE-754 bit
/// pattern of `2^(x / ln 2)` is approximated by `scale * x + bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpApproxConstants {
    /// `2^23 / ln 2`.
    pub scale: f32,
    /// Exponent bias `127 << 23`, shifted to minimize the maximum relative
    /// error.
    pub bias: i32,
    pub clamp_lo: f32,
    pub clamp_hi: f32,
}

pub const FAST_EXP: ExpApproxConstants = ExpApproxConstants {
    scale: 12_102_203.0,
    bias: 1_065_353_216 - 361_009,
    clamp_lo: -87.0,
    clamp_hi: 88.0,
};

/// How sigmoid and tanh are approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationMode {
    /// Clamped `[7/6]` continued-fraction rational for tanh; sigmoid via
    /// `0.5 * tanh(x / 2) + 0.5`.
    #[default]
    Rational,
    /// Both built on [`exp_fast`].
    FastExp,
}

impl ActivationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActivationMode::Rational => "rational",
            ActivationMode::FastExp => "fast",
        }
    }
}

/// How softmax exponentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxExp {
    /// Inline [`exp_fast`].
    #[default]
    Fast,
    /// Out-of-line call to an exactly rounded exponential.
    Precise,
}

impl SoftmaxExp {
    pub fn as_str(&self) -> &'static str {
        match self {
            SoftmaxExp::Fast => "fast",
            SoftmaxExp::Precise => "precise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApproximationOptions {
    pub activation_mode: ActivationMode,
    pub softmax_exp: SoftmaxExp,
}

pub fn tanh_rational(x: f32) -> f32 {
    let x = x.max(-TANH_CLAMP).min(TANH_CLAMP);
    let x2 = x * x;
    let num = (((36.0 * x2 + 6930.0) * x2 + 270_270.0) * x2 + 2_027_025.0) * x;
    let den = (((x2 + 630.0) * x2 + 51_975.0) * x2 + 945_945.0) * x2 + 2_027_025.0;
    let r = num / den;
    if x2 > TANH_SATURATION * TANH_SATURATION {
        1.0f32.copysign(r)
    } else {
        r
    }
}

pub fn sigmoid_rational(x: f32) -> f32 {
    tanh_rational(x * 0.5) * 0.5 + 0.5
}

pub fn exp_fast(x: f32) -> f32 {
    let c = FAST_EXP;
    let x = x.max(c.clamp_lo).min(c.clamp_hi);
    let i = (x * c.scale).round_ties_even() as i32;
    f32::from_bits(i.wrapping_add(c.bias) as u32)
}

pub fn sigmoid_fast(x: f32) -> f32 {
    1.0 / (exp_fast(-x) + 1.0)
}

pub fn tanh_fast(x: f32) -> f32 {
    2.0 / (exp_fast(x * -2.0) + 1.0) - 1.0
}

/// The activation the compiled code computes for `tag` under `mode`.
pub fn activate(mode: ActivationMode, tag: Activation, x: f32) -> f32 {
    match (tag, mode) {
        (Activation::Linear, _) => x,
        (Activation::Relu, _) => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        (Activation::Tanh, ActivationMode::Rational) => tanh_rational(x),
        (Activation::Sigmoid, ActivationMode::Rational) => sigmoid_rational(x),
        (Activation::Tanh, ActivationMode::FastExp) => tanh_fast(x),
        (Activation::Sigmoid, ActivationMode::FastExp) => sigmoid_fast(x),
    }
}
