use super::asm::{Gpr, Insn, Mem, Operand, ScalarLoad, SseImmOp, SseOp, StoreOp, Xmm};
use super::pool::ConstantPool;
use super::trace::{Marker, Trace, TraceItem};
use crate::approx::{ActivationMode, FAST_EXP, TANH_CLAMP, TANH_SATURATION};
use crate::model::Activation;
use crate::tensor::BatchNormParams;

/// Arena base on entry.
pub const ARENA: Gpr = Gpr::Rdi;
/// Constant pool base on entry.
pub const POOL: Gpr = Gpr::Rsi;

const SIGN_MASK: u32 = 0x8000_0000;

pub struct Emitter {
    pub code: Vec<u8>,
    pub trace: Trace,
    pub pool: ConstantPool,
}

impl Emitter {
    pub fn new() -> Self {
        Emitter {
            code: Vec::new(),
            trace: Trace::default(),
            pool: ConstantPool::new(),
        }
    }

    pub fn here(&self) -> usize {
        self.code.len()
    }

    pub fn emit(&mut self, insn: Insn) {
        let offset = self.code.len();
        insn.encode(offset, &mut self.code);
        self.trace.items.push(TraceItem::Insn {
            offset,
            len: self.code.len() - offset,
            insn,
        });
    }

    pub fn mark(&mut self, marker: Marker) {
        self.trace.items.push(TraceItem::Marker(marker));
    }

    pub fn sse(&mut self, op: SseOp, dst: Xmm, src: impl Into<Operand>) {
        self.emit(Insn::Sse {
            op,
            dst,
            src: src.into(),
        });
    }

    pub fn sse_imm(&mut self, op: SseImmOp, dst: Xmm, src: impl Into<Operand>, imm: u8) {
        self.emit(Insn::SseImm {
            op,
            dst,
            src: src.into(),
            imm,
        });
    }

    pub fn pool_mem(offset: usize) -> Mem {
        Mem::new(POOL, offset as i32)
    }

    pub fn splat(&mut self, v: f32) -> Mem {
        Self::pool_mem(self.pool.splat(v))
    }

    pub fn splat_bits(&mut self, bits: u32) -> Mem {
        Self::pool_mem(self.pool.splat_bits(bits))
    }

    /// Lanes `0..n` of `values`, zero elsewhere.
    pub fn lanes(&mut self, values: &[f32]) -> Mem {
        let mut v = [0.0f32; 4];
        v[..values.len()].copy_from_slice(values);
        Self::pool_mem(self.pool.vector(v))
    }

    /// Loads `n` floats into the low lanes of `dst`, zeroing the rest and
    /// touching no memory beyond the `n` floats.
    pub fn load(&mut self, dst: Xmm, src: Mem, n: usize, aligned: bool) {
        match n {
            4 => {
                let op = if aligned {
                    SseOp::Movaps
                } else {
                    SseOp::Movups
                };
                self.sse(op, dst, src);
            }
            1 => self.emit(Insn::LoadScalar {
                op: ScalarLoad::Movss,
                dst,
                src,
            }),
            2 => self.emit(Insn::LoadScalar {
                op: ScalarLoad::Movq,
                dst,
                src,
            }),
            3 => {
                self.emit(Insn::LoadScalar {
                    op: ScalarLoad::Movq,
                    dst,
                    src,
                });
                self.sse_imm(SseImmOp::Insertps, dst, src.offset(8), 0x20);
            }
            _ => unreachable!("partial load of {n} lanes"),
        }
    }

    /// Stores the low `n` lanes of `src`.
    pub fn store(&mut self, dst: Mem, src: Xmm, n: usize, aligned: bool) {
        let op = match n {
            4 if aligned => StoreOp::Movaps,
            4 => StoreOp::Movups,
            1 => StoreOp::Movss,
            2 | 3 => StoreOp::Movq,
            _ => unreachable!("partial store of {n} lanes"),
        };
        self.emit(Insn::Store { op, dst, src });
        if n == 3 {
            self.emit(Insn::Extractps {
                dst: dst.offset(8),
                src,
                lane: 2,
            });
        }
    }

    pub fn zero(&mut self, r: Xmm) {
        self.sse(SseOp::Xorps, r, r);
    }

    pub fn copy(&mut self, dst: Xmm, src: Xmm) {
        self.sse(SseOp::Movaps, dst, src);
    }

    /// Starts a counted loop; returns the loop head.
    pub fn loop_begin(&mut self, counter: Gpr, count: usize) -> usize {
        self.emit(Insn::MovImm32 {
            dst: counter,
            imm: count as u32,
        });
        self.here()
    }

    pub fn loop_end(&mut self, counter: Gpr, head: usize) {
        self.emit(Insn::SubImm {
            dst: counter,
            imm: 1,
        });
        self.emit(Insn::Jnz { target: head });
    }

    pub fn add_imm(&mut self, dst: Gpr, imm: usize) {
        if imm != 0 {
            self.emit(Insn::AddImm {
                dst,
                imm: imm as i32,
            });
        }
    }

    pub fn lea(&mut self, dst: Gpr, src: Mem) {
        self.emit(Insn::Lea { dst, src });
    }

    /// Applies `tag` to `r` in place using `temps`.
    pub fn activation(&mut self, tag: Activation, mode: ActivationMode, r: Xmm, temps: [Xmm; 2]) {
        let [t1, t2] = temps;
        match (tag, mode) {
            (Activation::Linear, _) => {}
            (Activation::Relu, _) => {
                self.zero(t1);
                self.sse(SseOp::Maxps, r, t1);
            }
            (Activation::Tanh, ActivationMode::Rational) => self.tanh_rational(r, t1, t2),
            (Activation::Sigmoid, ActivationMode::Rational) => {
                let half = self.splat(0.5);
                self.sse(SseOp::Mulps, r, half);
                self.tanh_rational(r, t1, t2);
                self.sse(SseOp::Mulps, r, half);
                self.sse(SseOp::Addps, r, half);
            }
            (Activation::Sigmoid, ActivationMode::FastExp) => {
                let sign = self.splat_bits(SIGN_MASK);
                self.sse(SseOp::Xorps, r, sign);
                self.exp_fast(r);
                self.reciprocal_of_one_plus(r, t1);
            }
            (Activation::Tanh, ActivationMode::FastExp) => {
                let m2 = self.splat(-2.0);
                self.sse(SseOp::Mulps, r, m2);
                self.exp_fast(r);
                let one = self.splat(1.0);
                let two = self.splat(2.0);
                self.sse(SseOp::Addps, r, one);
                self.sse(SseOp::Movaps, t1, two);
                self.sse(SseOp::Divps, t1, r);
                self.sse(SseOp::Subps, t1, one);
                self.copy(r, t1);
            }
        }
    }

    /// Activation temporaries required for `tag`.
    pub fn activation_temps(tag: Activation, mode: ActivationMode) -> usize {
        match (tag, mode) {
            (Activation::Linear, _) => 0,
            (Activation::Tanh | Activation::Sigmoid, ActivationMode::Rational) => 2,
            _ => 1,
        }
    }

    /// `r = 1 / (r + 1)`.
    fn reciprocal_of_one_plus(&mut self, r: Xmm, t: Xmm) {
        let one = self.splat(1.0);
        self.sse(SseOp::Addps, r, one);
        self.sse(SseOp::Movaps, t, one);
        self.sse(SseOp::Divps, t, r);
        self.copy(r, t);
    }

    pub fn tanh_rational(&mut self, r: Xmm, t1: Xmm, t2: Xmm) {
        let lo = self.splat(-TANH_CLAMP);
        let hi = self.splat(TANH_CLAMP);
        self.sse(SseOp::Maxps, r, lo);
        self.sse(SseOp::Minps, r, hi);
        self.copy(t1, r);
        self.sse(SseOp::Mulps, t1, r);
        // numerator
        self.copy(t2, t1);
        let c = self.splat(36.0);
        self.sse(SseOp::Mulps, t2, c);
        for k in [6930.0, 270_270.0] {
            let c = self.splat(k);
            self.sse(SseOp::Addps, t2, c);
            self.sse(SseOp::Mulps, t2, t1);
        }
        let c = self.splat(2_027_025.0);
        self.sse(SseOp::Addps, t2, c);
        self.sse(SseOp::Mulps, t2, r);
        // denominator
        self.copy(r, t1);
        for k in [630.0, 51_975.0, 945_945.0] {
            let c = self.splat(k);
            self.sse(SseOp::Addps, r, c);
            self.sse(SseOp::Mulps, r, t1);
        }
        let c = self.splat(2_027_025.0);
        self.sse(SseOp::Addps, r, c);
        self.sse(SseOp::Divps, t2, r);
        // saturate where x^2 > T^2
        let limit = self.splat(TANH_SATURATION * TANH_SATURATION);
        self.sse_imm(SseImmOp::Cmpps, t1, limit, 6);
        let sign = self.splat_bits(SIGN_MASK);
        let one = self.splat(1.0);
        self.copy(r, t2);
        self.sse(SseOp::Andps, r, sign);
        self.sse(SseOp::Orps, r, one);
        self.sse(SseOp::Andps, r, t1);
        self.sse(SseOp::Andnps, t1, t2);
        self.sse(SseOp::Orps, r, t1);
    }

    /// In place, no temporaries.
    pub fn exp_fast(&mut self, r: Xmm) {
        let c = FAST_EXP;
        let lo = self.splat(c.clamp_lo);
        let hi = self.splat(c.clamp_hi);
        let scale = self.splat(c.scale);
        let bias = self.splat_bits(c.bias as u32);
        self.sse(SseOp::Maxps, r, lo);
        self.sse(SseOp::Minps, r, hi);
        self.sse(SseOp::Mulps, r, scale);
        self.sse(SseOp::Cvtps2dq, r, r);
        self.sse(SseOp::Paddd, r, bias);
    }

    /// Bias, activation and post-activation affine for output lanes
    /// `first..first + n` held in `r`.
    #[allow(clippy::too_many_arguments)]
    pub fn epilogue(
        &mut self,
        r: Xmm,
        first: usize,
        n: usize,
        bias: &[f32],
        tag: Activation,
        mode: ActivationMode,
        post: Option<&BatchNormParams>,
        temps: [Xmm; 2],
    ) {
        let b = self.lanes(&bias[first..first + n]);
        self.sse(SseOp::Addps, r, b);
        self.activation(tag, mode, r, temps);
        if let Some(p) = post {
            let s = self.lanes(&p.scale[first..first + n]);
            let o = self.lanes(&p.offset[first..first + n]);
            self.sse(SseOp::Mulps, r, s);
            self.sse(SseOp::Addps, r, o);
        }
    }
}
