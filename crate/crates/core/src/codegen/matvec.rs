//! Matrix-vector product with the weights stored as rotated diagonals of
//! 4×4 blocks, so the input register is only ever lane-rotated.
//!
//! For input block `b` and output block `o`, step `r` multiplies the input
//! rotated by `r` lanes (lane `l` holds `x[4b + (l + r) % 4]`) with the
//! weight vector whose lane `l` is `a[4o + l][4b + (l + r) % 4]`. Output
//! block `o` starts at rotation `3o mod 4`, continuing where block `o - 1`
//! left off, so each 4×4 block costs exactly three rotations and the input
//! is loaded once per input block.

use super::asm::{Gpr, Mem, SseImmOp, SseOp, Xmm, ROTATE_LANES};
use super::emit::{Emitter, POOL};
use super::trace::Marker;
use crate::approx::ActivationMode;
use crate::model::Activation;
use crate::tensor::BatchNormParams;

const X: Xmm = Xmm(0);
const T: Xmm = Xmm(1);
const WEIGHTS: Gpr = Gpr::R12;
const INPUT: Gpr = Gpr::Rax;
const COUNTER: Gpr = Gpr::R13;

/// A contiguous run of the input vector at `[base + disp]`.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub base: Gpr,
    pub disp: i32,
    pub len: usize,
}

pub struct Matvec<'a> {
    pub segments: &'a [Segment],
    pub units: usize,
    /// `weight(out, in)` with `in` indexing the concatenated segments.
    pub weight: &'a dyn Fn(usize, usize) -> f32,
    pub bias: &'a [f32],
    pub activation: Activation,
    pub mode: ActivationMode,
    pub post: Option<&'a BatchNormParams>,
    pub out: Mem,
    /// Accumulator registers available, starting at `xmm2`.
    pub accumulators: usize,
}

fn start_rotation(o: usize) -> usize {
    3 * o % 4
}

fn acc(o: usize) -> Xmm {
    Xmm(2 + o as u8)
}

pub fn emit_matvec(e: &mut Emitter, mv: &Matvec) {
    let group = 4 * mv.accumulators;
    let starts: Vec<usize> = mv
        .segments
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.len;
            Some(start)
        })
        .collect();

    for first in (0..mv.units).step_by(group) {
        let units = group.min(mv.units - first);
        let blocks = units.div_ceil(4);
        let lanes = |o: usize| (units - 4 * o).min(4);

        let mut packed = Vec::new();
        for (seg, &start) in mv.segments.iter().zip(&starts) {
            for b in 0..seg.len.div_ceil(4) {
                for o in 0..blocks {
                    for step in 0..4 {
                        let r = (start_rotation(o) + step) % 4;
                        for l in 0..4 {
                            let row = 4 * o + l;
                            let col = 4 * b + (l + r) % 4;
                            packed.push(if row < units && col < seg.len {
                                (mv.weight)(first + row, start + col)
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        let offset = e.pool.push(&packed);
        e.lea(WEIGHTS, Mem::new(POOL, offset as i32));
        for o in 0..blocks {
            e.zero(acc(o));
        }

        let stride = blocks * 64;
        let mut pending = 0usize;
        for seg in mv.segments {
            let full = seg.len / 4;
            let tail = seg.len % 4;
            let mut disp = seg.disp;
            if full >= 2 {
                e.add_imm(WEIGHTS, pending);
                pending = 0;
                e.lea(INPUT, Mem::new(seg.base, seg.disp));
                let head = e.loop_begin(COUNTER, full);
                block(e, Mem::new(INPUT, 0), 4, blocks, &lanes, 0);
                e.add_imm(INPUT, 16);
                e.add_imm(WEIGHTS, stride);
                e.loop_end(COUNTER, head);
                disp += 16 * full as i32;
            } else {
                for _ in 0..full {
                    block(e, Mem::new(seg.base, disp), 4, blocks, &lanes, pending);
                    pending += stride;
                    disp += 16;
                }
            }
            if tail > 0 {
                block(e, Mem::new(seg.base, disp), tail, blocks, &lanes, pending);
                pending += stride;
            }
        }

        for o in 0..blocks {
            e.epilogue(
                acc(o),
                first + 4 * o,
                lanes(o),
                mv.bias,
                mv.activation,
                mv.mode,
                mv.post,
                [X, T],
            );
            let dst = mv.out.offset(4 * (first + 4 * o) as i32);
            e.store(dst, acc(o), lanes(o), false);
        }
    }
}

/// One input block against every output block. Weights start at
/// `[r12 + disp]`.
fn block(
    e: &mut Emitter,
    src: Mem,
    n: usize,
    blocks: usize,
    lanes: &dyn Fn(usize) -> usize,
    disp: usize,
) {
    e.load(X, src, n, false);
    let mut w = disp as i32;
    for o in 0..blocks {
        e.mark(Marker::MatvecBlock {
            inputs: n,
            outputs: lanes(o),
        });
        for step in 0..4 {
            if step > 0 {
                e.sse_imm(SseImmOp::Pshufd, X, X, ROTATE_LANES);
            }
            e.sse(SseOp::Movaps, T, Mem::new(WEIGHTS, w));
            e.sse(SseOp::Mulps, T, X);
            e.sse(SseOp::Addps, acc(o), T);
            w += 16;
        }
        e.mark(Marker::MatvecBlockEnd);
    }
}
