//! Flat batched kernels: activation, standalone batch norm, add, copy.

use super::asm::{Gpr, Mem, SseOp, Xmm};
use super::emit::{Emitter, ARENA};
use super::trace::Marker;
use super::Ctx;
use crate::model::Activation;
use crate::optimizer::CompilationUnit;
use crate::tensor::BatchNormParams;

/// What happens to each data register between the load and store phases.
enum FlatOp<'a> {
    Activation(Activation),
    /// Per-channel affine repeating every `channels` elements.
    Affine(&'a BatchNormParams),
    /// Adds the remaining inputs at these arena offsets.
    Sum(Vec<i32>),
    Copy,
}

/// Splits `elements` into batches of `lanes` and emits `body` for each.
/// Batches after the first full one are a runtime loop on `rcx`, with
/// `rax` walking the arena.
fn batches(
    e: &mut Emitter,
    elements: usize,
    lanes: usize,
    k: usize,
    mut body: impl FnMut(&mut Emitter, Gpr, i32, usize),
) {
    let full = elements / lanes;
    let rem = elements % lanes;
    let mut done = 0i32;
    if full >= 2 {
        e.mark(Marker::Batch {
            lanes,
            repeat: full,
            k,
        });
        e.emit(super::asm::Insn::MovReg {
            dst: Gpr::Rax,
            src: ARENA,
        });
        let head = e.loop_begin(Gpr::Rcx, full);
        body(e, Gpr::Rax, 0, lanes);
        e.add_imm(Gpr::Rax, lanes * 4);
        e.loop_end(Gpr::Rcx, head);
        done = (full * lanes * 4) as i32;
    } else if full == 1 {
        e.mark(Marker::Batch {
            lanes,
            repeat: 1,
            k,
        });
        body(e, ARENA, 0, lanes);
        done = (lanes * 4) as i32;
    }
    if rem > 0 {
        e.mark(Marker::Batch {
            lanes: rem,
            repeat: 1,
            k,
        });
        body(e, ARENA, done, rem);
    }
}

fn emit_flat(
    ctx: &Ctx,
    e: &mut Emitter,
    unit: &CompilationUnit,
    op: FlatOp,
    k: usize,
    lanes: usize,
) {
    let n_xmm = ctx.n_xmm();
    let src = ctx.offset(unit.inputs[0]);
    let dst = ctx.offset(unit.output);
    let elements = ctx.plan.shape(unit.output).element_count();
    let mode = ctx.options.approximations.activation_mode;
    let temps = [Xmm((n_xmm - k) as u8), Xmm((n_xmm - 1) as u8)];
    batches(e, elements, lanes, k, |e, base, shift, lanes| {
        let chunks = lanes.div_ceil(4);
        let width = |j: usize| (lanes - 4 * j).min(4);
        for j in 0..chunks {
            e.load(
                Xmm(j as u8),
                Mem::new(base, src + shift + 16 * j as i32),
                width(j),
                true,
            );
        }
        for j in 0..chunks {
            let r = Xmm(j as u8);
            match &op {
                FlatOp::Activation(tag) => e.activation(*tag, mode, r, temps),
                FlatOp::Affine(p) => {
                    let c = p.channels();
                    let pick = |v: &[f32]| -> Vec<f32> {
                        (0..width(j)).map(|l| v[(4 * j + l) % c]).collect()
                    };
                    let s = e.lanes(&pick(&p.scale));
                    let o = e.lanes(&pick(&p.offset));
                    e.sse(SseOp::Mulps, r, s);
                    e.sse(SseOp::Addps, r, o);
                }
                FlatOp::Sum(others) => {
                    for &off in others {
                        let m = Mem::new(base, off + shift + 16 * j as i32);
                        if width(j) == 4 {
                            e.sse(SseOp::Addps, r, m);
                        } else {
                            e.load(temps[0], m, width(j), true);
                            e.sse(SseOp::Addps, r, temps[0]);
                        }
                    }
                }
                FlatOp::Copy => {}
            }
        }
        for j in 0..chunks {
            e.store(
                Mem::new(base, dst + shift + 16 * j as i32),
                Xmm(j as u8),
                width(j),
                true,
            );
        }
    });
}

pub(super) fn emit_activation(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit, tag: Activation) {
    let need = Emitter::activation_temps(tag, ctx.options.approximations.activation_mode);
    let k = ctx.k().max(need);
    emit_flat(
        ctx,
        e,
        unit,
        FlatOp::Activation(tag),
        k,
        4 * (ctx.n_xmm() - k),
    );
}

pub(super) fn emit_add(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit) {
    let k = ctx.k().max(1);
    let others = unit.inputs[1..].iter().map(|&t| ctx.offset(t)).collect();
    emit_flat(ctx, e, unit, FlatOp::Sum(others), k, 4 * (ctx.n_xmm() - k));
}

pub(super) fn emit_copy(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit) {
    let k = ctx.k();
    emit_flat(ctx, e, unit, FlatOp::Copy, k, 4 * (ctx.n_xmm() - k));
}

/// Lanes per batch for a flat affine with `channels`-periodic constants, or
/// `None` when no batch size that is a multiple of the period fits.
pub(super) fn affine_lanes(channels: usize, n_xmm: usize, k: usize) -> Option<usize> {
    let period = num_lcm(channels, 4);
    let capacity = 4 * (n_xmm - k);
    (period <= capacity).then(|| capacity / period * period)
}

pub(super) fn emit_affine(
    ctx: &Ctx,
    e: &mut Emitter,
    unit: &CompilationUnit,
    p: &BatchNormParams,
    lanes: usize,
) {
    let k = ctx.n_xmm() - lanes / 4;
    emit_flat(ctx, e, unit, FlatOp::Affine(p), k, lanes);
}

fn num_lcm(a: usize, b: usize) -> usize {
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    a / gcd(a, b) * b
}
