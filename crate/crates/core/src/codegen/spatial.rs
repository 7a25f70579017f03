//! Kernels over `(height, width, channels)` tensors: convolutions, pooling,
//! upsampling and channel concatenation.
//!
//! Windowed kernels split the output plane into regions whose positions
//! all see the same in-bounds kernel taps, so padding never reaches the
//! generated code. Each region is a row loop (`rcx`; `r8` input, `r9`
//! output) around a column loop (`rdx`; `r10` input, `r11` output).

use std::ops::Range;

use super::asm::{Gpr, Insn, Mem, SseOp, Xmm};
use super::emit::{Emitter, ARENA};
use super::matvec::{emit_matvec, Matvec, Segment};
use super::Ctx;
use crate::graph::PoolKind;
use crate::interp::Window;
use crate::optimizer::{CompilationUnit, ConvParams, DepthwiseParams};
use crate::tensor::{TensorShape, WindowAxis};

const IN: Gpr = Gpr::R10;
const OUT: Gpr = Gpr::R11;
const X: Xmm = Xmm(0);
const T: Xmm = Xmm(1);

/// Consecutive output positions sharing one range of valid taps.
struct Run {
    outputs: Range<usize>,
    taps: Range<usize>,
}

fn runs(axis: &WindowAxis) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for o in 0..axis.output {
        let taps = axis.valid_taps(o);
        match runs.last_mut() {
            Some(run) if run.taps == taps => run.outputs.end = o + 1,
            _ => runs.push(Run {
                outputs: o..o + 1,
                taps,
            }),
        }
    }
    runs
}

/// Byte steps of a region walk.
struct Steps {
    in_col: usize,
    in_row: usize,
    out_col: usize,
    out_row: usize,
}

/// Runs `body` once per output position of a `rows × cols` region with
/// `r10`/`r11` at the position's input and output addresses.
fn region_loops(
    e: &mut Emitter,
    rows: usize,
    cols: usize,
    in_start: i64,
    out_start: i64,
    steps: &Steps,
    mut body: impl FnMut(&mut Emitter),
) {
    e.lea(Gpr::R8, Mem::new(ARENA, in_start as i32));
    e.lea(Gpr::R9, Mem::new(ARENA, out_start as i32));
    let row_head = (rows > 1).then(|| e.loop_begin(Gpr::Rcx, rows));
    e.emit(Insn::MovReg {
        dst: IN,
        src: Gpr::R8,
    });
    e.emit(Insn::MovReg {
        dst: OUT,
        src: Gpr::R9,
    });
    let col_head = (cols > 1).then(|| e.loop_begin(Gpr::Rdx, cols));
    body(e);
    if let Some(head) = col_head {
        e.add_imm(IN, steps.in_col);
        e.add_imm(OUT, steps.out_col);
        e.loop_end(Gpr::Rdx, head);
    }
    if let Some(head) = row_head {
        e.add_imm(Gpr::R8, steps.in_row);
        e.add_imm(Gpr::R9, steps.out_row);
        e.loop_end(Gpr::Rcx, head);
    }
}

struct Plane {
    ay: WindowAxis,
    ax: WindowAxis,
    width: usize,
    out_width: usize,
}

impl Plane {
    fn new(window: Window, input: TensorShape) -> Self {
        let (ay, ax) = window.axes(input);
        let (_, width, _) = input.hwc();
        Plane {
            ay,
            ax,
            width,
            out_width: ax.output,
        }
    }

    /// Visits every region with its first output position and taps.
    fn regions(&self, mut f: impl FnMut(&Run, &Run)) {
        let ys = runs(&self.ay);
        let xs = runs(&self.ax);
        for y in &ys {
            for x in &xs {
                f(y, x);
            }
        }
    }

    /// Element index (may be negative) of the input pixel under tap
    /// `(ty, tx)` for output `(oy, ox)`.
    fn input_pixel(&self, oy: usize, ox: usize, ty: usize, tx: usize) -> i64 {
        let iy = self.ay.origin(oy) as i64 + ty as i64;
        let ix = self.ax.origin(ox) as i64 + tx as i64;
        iy * self.width as i64 + ix
    }
}

pub(super) fn emit_conv(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit, p: &ConvParams) {
    let input = ctx.plan.shape(unit.inputs[0]);
    let plane = Plane::new(p.window, input);
    let (cin, f) = (p.in_channels, p.filters);
    let kw = p.window.size[1];
    let in_off = ctx.offset(unit.inputs[0]) as i64;
    let out_off = ctx.offset(unit.output) as i64;
    let steps = Steps {
        in_col: plane.ax.stride * cin * 4,
        in_row: plane.ay.stride * plane.width * cin * 4,
        out_col: f * 4,
        out_row: plane.out_width * f * 4,
    };
    let mode = ctx.options.approximations.activation_mode;
    let accumulators = ctx.n_xmm() - ctx.k().max(2);
    plane.regions(|y, x| {
        let (oy, ox) = (y.outputs.start, x.outputs.start);
        let row_len = x.taps.len() * cin;
        let segments: Vec<Segment> = y
            .taps
            .clone()
            .map(|ty| Segment {
                base: IN,
                disp: ((ty - y.taps.start) * plane.width * cin * 4) as i32,
                len: row_len,
            })
            .collect();
        let weight = |out: usize, i: usize| {
            let ky = y.taps.start + i / row_len.max(1);
            let kx = x.taps.start + i % row_len.max(1) / cin;
            let ci = i % cin;
            p.kernel[((ky * kw + kx) * cin + ci) * f + out]
        };
        let first_tap = plane.input_pixel(oy, ox, y.taps.start, x.taps.start);
        region_loops(
            e,
            y.outputs.len(),
            x.outputs.len(),
            in_off + first_tap * cin as i64 * 4,
            out_off + ((oy * plane.out_width + ox) * f * 4) as i64,
            &steps,
            |e| {
                emit_matvec(
                    e,
                    &Matvec {
                        segments: &segments,
                        units: f,
                        weight: &weight,
                        bias: &p.bias,
                        activation: unit.fused_activation,
                        mode,
                        post: unit.post_affine.as_ref(),
                        out: Mem::new(OUT, 0),
                        accumulators,
                    },
                )
            },
        );
    });
}

/// How window taps combine per channel.
#[derive(Clone, Copy)]
pub(super) enum Reduce<'a> {
    Depthwise(&'a DepthwiseParams),
    Pool(PoolKind),
}

pub(super) fn emit_window_reduce(
    ctx: &Ctx,
    e: &mut Emitter,
    unit: &CompilationUnit,
    input: TensorShape,
    window: Window,
    reduce: Reduce,
) {
    let plane = Plane::new(window, input);
    let c = input.channels();
    let kw = window.size[1];
    let in_off = ctx.offset(unit.inputs[0]) as i64;
    let out_off = ctx.offset(unit.output) as i64;
    let steps = Steps {
        in_col: plane.ax.stride * c * 4,
        in_row: plane.ay.stride * plane.width * c * 4,
        out_col: c * 4,
        out_row: plane.out_width * c * 4,
    };
    let mode = ctx.options.approximations.activation_mode;
    let blocks = c.div_ceil(4);
    let lanes = |b: usize| (c - 4 * b).min(4);
    let per_group = ctx.n_xmm() - ctx.k().max(2);
    plane.regions(|y, x| {
        let (oy, ox) = (y.outputs.start, x.outputs.start);
        let taps: Vec<(usize, usize)> = y
            .taps
            .clone()
            .flat_map(|ty| x.taps.clone().map(move |tx| (ty, tx)))
            .collect();
        let origin = plane.input_pixel(oy, ox, 0, 0);
        region_loops(
            e,
            y.outputs.len(),
            x.outputs.len(),
            in_off + origin * c as i64 * 4,
            out_off + ((oy * plane.out_width + ox) * c * 4) as i64,
            &steps,
            |e| {
                for group in (0..blocks).collect::<Vec<_>>().chunks(per_group) {
                    let acc = |b: usize| Xmm((2 + b - group[0]) as u8);
                    if taps.is_empty() {
                        for &b in group {
                            e.zero(acc(b));
                        }
                    }
                    for (i, &(ty, tx)) in taps.iter().enumerate() {
                        let pixel = ((ty * plane.width + tx) * c * 4) as i32;
                        for &b in group {
                            let src = Mem::new(IN, pixel + 16 * b as i32);
                            let dst = if i == 0 { acc(b) } else { T };
                            e.load(dst, src, lanes(b), false);
                            if let Reduce::Depthwise(p) = reduce {
                                let w: Vec<f32> = (0..lanes(b))
                                    .map(|l| p.kernel[(ty * kw + tx) * c + 4 * b + l])
                                    .collect();
                                let w = e.lanes(&w);
                                e.sse(SseOp::Mulps, dst, w);
                            }
                            if i > 0 {
                                let op = match reduce {
                                    Reduce::Pool(PoolKind::Max) => SseOp::Maxps,
                                    _ => SseOp::Addps,
                                };
                                e.sse(op, acc(b), T);
                            }
                        }
                    }
                    for &b in group {
                        match reduce {
                            Reduce::Depthwise(p) => e.epilogue(
                                acc(b),
                                4 * b,
                                lanes(b),
                                &p.bias,
                                unit.fused_activation,
                                mode,
                                unit.post_affine.as_ref(),
                                [X, T],
                            ),
                            Reduce::Pool(PoolKind::Avg) => {
                                let n = e.splat(taps.len() as f32);
                                e.sse(SseOp::Divps, acc(b), n);
                            }
                            Reduce::Pool(PoolKind::Max) => {}
                        }
                        e.store(Mem::new(OUT, 16 * b as i32), acc(b), lanes(b), false);
                    }
                }
            },
        );
    });
}

pub(super) fn emit_upsample(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit, size: [usize; 2]) {
    let (h, w, c) = ctx.plan.shape(unit.inputs[0]).hwc();
    let ow = w * size[1];
    let steps = Steps {
        in_col: c * 4,
        in_row: w * c * 4,
        out_col: size[1] * c * 4,
        out_row: size[0] * ow * c * 4,
    };
    let blocks = c.div_ceil(4);
    let lanes = |b: usize| (c - 4 * b).min(4);
    let per_group = ctx.n_xmm();
    for group in (0..blocks).collect::<Vec<_>>().chunks(per_group) {
        region_loops(
            e,
            h,
            w,
            ctx.offset(unit.inputs[0]) as i64,
            ctx.offset(unit.output) as i64,
            &steps,
            |e| {
                let reg = |b: usize| Xmm((b - group[0]) as u8);
                for &b in group {
                    e.load(reg(b), Mem::new(IN, 16 * b as i32), lanes(b), false);
                }
                for dy in 0..size[0] {
                    for dx in 0..size[1] {
                        let pixel = ((dy * ow + dx) * c * 4) as i32;
                        for &b in group {
                            e.store(
                                Mem::new(OUT, pixel + 16 * b as i32),
                                reg(b),
                                lanes(b),
                                false,
                            );
                        }
                    }
                }
            },
        );
    }
}

pub(super) fn emit_concat(ctx: &Ctx, e: &mut Emitter, unit: &CompilationUnit) {
    let out = ctx.plan.shape(unit.output);
    let (h, w, total) = out.hwc();
    let mut channel = 0;
    for &t in &unit.inputs {
        // flattened inputs may still carry their spatial shape
        let c = match out {
            TensorShape::Flat(_) => ctx.plan.shape(t).element_count(),
            TensorShape::Spatial { .. } => ctx.plan.shape(t).channels(),
        };
        let steps = Steps {
            in_col: c * 4,
            in_row: w * c * 4,
            out_col: total * 4,
            out_row: w * total * 4,
        };
        let blocks = c.div_ceil(4);
        let lanes = |b: usize| (c - 4 * b).min(4);
        for group in (0..blocks).collect::<Vec<_>>().chunks(ctx.n_xmm()) {
            region_loops(
                e,
                h,
                w,
                ctx.offset(t) as i64,
                (ctx.offset(unit.output) + channel as i32 * 4) as i64,
                &steps,
                |e| {
                    let reg = |b: usize| Xmm((b - group[0]) as u8);
                    for &b in group {
                        e.load(reg(b), Mem::new(IN, 16 * b as i32), lanes(b), false);
                    }
                    for &b in group {
                        e.store(Mem::new(OUT, 16 * b as i32), reg(b), lanes(b), false);
                    }
                },
            );
        }
        channel += c;
    }
}
