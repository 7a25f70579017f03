//! Softmax over a flat tensor in three passes: maximum, shifted
//! exponentials with their sum, normalization.

use super::asm::{Gpr, Insn, Mem, SseImmOp, SseOp, Xmm};
use super::emit::{Emitter, ARENA, POOL};
use super::Ctx;
use crate::approx::SoftmaxExp;
use crate::interp::exact_exp;
use crate::optimizer::CompilationUnit;

const M: Xmm = Xmm(0);
const S: Xmm = Xmm(1);
const X: Xmm = Xmm(2);
const T: Xmm = Xmm(3);

const NEG_INF: u32 = 0xFF80_0000;

/// Writes `exp(src[i] - max)` to `dst[i]` and returns the sum in index
/// order. `src` and `dst` may be the same buffer.
pub(crate) extern "sysv64" fn softmax_exp_sum(
    src: *const f32,
    dst: *mut f32,
    n: usize,
    max: f32,
) -> f32 {
    let mut sum = 0.0f32;
    for i in 0..n {
        // SAFETY: the generated caller passes `n` floats at both pointers,
        // all inside the arena.
        unsafe {
            let v = exact_exp(*src.add(i) - max);
            *dst.add(i) = v;
            sum += v;
        }
    }
    sum
}

/// Emits `body(e, addr, lanes)` for every 4-lane block of `n` floats at
/// arena offset `base`, looping the full blocks on `rcx` with `rax`.
fn blocks(e: &mut Emitter, base: i32, n: usize, mut body: impl FnMut(&mut Emitter, Mem, usize)) {
    let full = n / 4;
    if full >= 2 {
        e.emit(Insn::MovReg {
            dst: Gpr::Rax,
            src: ARENA,
        });
        let head = e.loop_begin(Gpr::Rcx, full);
        body(e, Mem::new(Gpr::Rax, base), 4);
        e.add_imm(Gpr::Rax, 16);
        e.loop_end(Gpr::Rcx, head);
    } else if full == 1 {
        body(e, Mem::new(ARENA, base), 4);
    }
    if !n.is_multiple_of(4) {
        body(e, Mem::new(ARENA, base + 16 * full as i32), n % 4);
    }
}

/// Combines all four lanes of `r` with `op`, leaving the result in every
/// lane.
fn horizontal(e: &mut Emitter, op: SseOp, r: Xmm) {
    for imm in [0x4E, 0xB1] {
        e.sse_imm(SseImmOp::Pshufd, T, r, imm);
        e.sse(op, r, T);
    }
}

/// Mask with all bits set in lanes `0..n`.
fn low_lanes(e: &mut Emitter, n: usize, inside: u32, outside: u32) -> Mem {
    let v: Vec<f32> = (0..4)
        .map(|l| f32::from_bits(if l < n { inside } else { outside }))
        .collect();
    e.lanes(&v)
}

pub(super) fn emit_softmax(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit) {
    let src = ctx.offset(unit.inputs[0]);
    let dst = ctx.offset(unit.output);
    let n = ctx.plan.shape(unit.output).element_count();

    let neg_inf = e.splat_bits(NEG_INF);
    e.sse(SseOp::Movaps, M, neg_inf);
    blocks(e, src, n, |e, m, lanes| {
        if lanes == 4 {
            e.sse(SseOp::Maxps, M, m);
        } else {
            e.load(X, m, lanes, true);
            let fill = low_lanes(e, lanes, 0, NEG_INF);
            e.sse(SseOp::Orps, X, fill);
            e.sse(SseOp::Maxps, M, X);
        }
    });
    horizontal(e, SseOp::Maxps, M);

    match ctx.options.approximations.softmax_exp {
        SoftmaxExp::Fast => {
            e.zero(S);
            blocks(e, 0, n, |e, m, lanes| {
                let (from, to) = (m.offset(src), m.offset(dst));
                e.load(X, from, lanes, true);
                e.sse(SseOp::Subps, X, M);
                e.exp_fast(X);
                if lanes < 4 {
                    let keep = low_lanes(e, lanes, u32::MAX, 0);
                    e.sse(SseOp::Andps, X, keep);
                }
                e.store(to, X, lanes, true);
                e.sse(SseOp::Addps, S, X);
            });
            horizontal(e, SseOp::Addps, S);
            let one = e.splat(1.0);
            e.sse(SseOp::Movaps, T, one);
            e.sse(SseOp::Divps, T, S);
            blocks(e, dst, n, |e, m, lanes| {
                e.load(X, m, lanes, true);
                e.sse(SseOp::Mulps, X, T);
                e.store(m, X, lanes, true);
            });
        }
        SoftmaxExp::Precise => {
            // entry rsp is 8 mod 16 after the two prologue pushes; three
            // more 8-byte adjustments realign it for the call
            e.emit(Insn::Push(Gpr::Rdi));
            e.emit(Insn::Push(Gpr::Rsi));
            e.emit(Insn::SubImm {
                dst: Gpr::Rsp,
                imm: 8,
            });
            e.lea(Gpr::Rax, Mem::new(ARENA, dst));
            e.emit(Insn::MovReg {
                dst: Gpr::Rsi,
                src: Gpr::Rax,
            });
            e.lea(Gpr::Rdi, Mem::new(ARENA, src));
            e.emit(Insn::MovImm32 {
                dst: Gpr::Rdx,
                imm: n as u32,
            });
            e.emit(Insn::MovImm64 {
                dst: Gpr::Rax,
                imm: softmax_exp_sum as *const () as u64,
            });
            e.emit(Insn::Call(Gpr::Rax));
            e.emit(Insn::AddImm {
                dst: Gpr::Rsp,
                imm: 8,
            });
            e.emit(Insn::Pop(POOL));
            e.emit(Insn::Pop(ARENA));
            e.sse_imm(SseImmOp::Pshufd, S, M, 0);
            blocks(e, dst, n, |e, m, lanes| {
                e.load(X, m, lanes, true);
                e.sse(SseOp::Divps, X, S);
                e.store(m, X, lanes, true);
            });
        }
    }
}
