//! Machine code generation for a fused, memory-planned unit schedule.
//!
//! The generated function has the signature
//! `extern "sysv64" fn(arena: *mut f32, pool: *const f32)`. Both pointers
//! must be 16-byte aligned. `r12` and `r13` are saved and restored; all
//! other registers touched are caller-saved.

pub mod asm;
mod elementwise;
mod emit;
pub mod exec;
mod matvec;
pub mod pool;
mod softmax;
mod spatial;
pub mod trace;

use thiserror::Error;

pub use crate::approx::{ActivationMode, ApproximationOptions, SoftmaxExp};
use crate::optimizer::{CompilationUnit, DepthwiseParams, FusionPlan, UnitKind};
use crate::planner::BufferAssignment;
use asm::{Gpr, Insn};
use emit::{Emitter, POOL};
pub use exec::ExecutableMemory;
pub use matvec::Segment;
pub use trace::{Marker, Trace, TraceItem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodegenError {
    #[error("host CPU is not supported: {reason}")]
    UnsupportedHost { reason: String },
    #[error("unit {unit} ({kind}) cannot be compiled: {reason}")]
    UnsupportedUnit {
        unit: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("invalid register budget: {reason}")]
    InvalidBudget { reason: String },
    #[error("could not allocate executable memory: {reason}")]
    ExecutableAllocationFailed { reason: String },
}

/// Vector registers the kernels may use and how many of them each
/// operation keeps for temporaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterBudget {
    pub n_xmm: usize,
    pub k: usize,
}

impl Default for RegisterBudget {
    fn default() -> Self {
        RegisterBudget { n_xmm: 16, k: 2 }
    }
}

impl RegisterBudget {
    /// Scalar lanes per elementwise batch.
    pub fn batch_lanes(&self) -> usize {
        4 * (self.n_xmm - self.k)
    }

    fn validate(&self) -> Result<(), CodegenError> {
        let reason = if !(4..=16).contains(&self.n_xmm) {
            "n_xmm must lie in 4..=16"
        } else if self.k < 1 || self.k + 1 >= self.n_xmm {
            "k must satisfy 1 <= k < n_xmm - 1"
        } else {
            return Ok(());
        };
        Err(CodegenError::InvalidBudget {
            reason: format!("{reason} (n_xmm = {}, k = {})", self.n_xmm, self.k),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CodegenOptions {
    pub budget: RegisterBudget,
    pub approximations: ApproximationOptions,
}

/// A code site reading the constant pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relocation {
    pub code_offset: usize,
    pub pool_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeArtifact {
    pub code: Vec<u8>,
    /// Contents of the constant pool, in 16-byte aligned entries.
    pub pool: Vec<f32>,
    pub trace: Trace,
    pub relocations: Vec<Relocation>,
    /// Code offset where each unit starts.
    pub unit_offsets: Vec<usize>,
    pub arena_bytes: usize,
}

impl CodeArtifact {
    pub fn pool_bytes(&self) -> Vec<u8> {
        self.pool.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) struct Ctx<'a> {
    pub plan: &'a FusionPlan,
    pub assignment: &'a BufferAssignment,
    pub options: &'a CodegenOptions,
}

impl Ctx<'_> {
    pub fn offset(&self, t: crate::graph::TensorId) -> i32 {
        self.assignment.offset(t) as i32
    }

    pub fn n_xmm(&self) -> usize {
        self.options.budget.n_xmm
    }

    pub fn k(&self) -> usize {
        self.options.budget.k
    }
}

/// Fails unless the running CPU can execute the generated code.
pub fn check_host() -> Result<(), CodegenError> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("sse4.1") {
            Ok(())
        } else {
            Err(CodegenError::UnsupportedHost {
                reason: "SSE4.1 is not available".into(),
            })
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(CodegenError::UnsupportedHost {
            reason: format!("target is {}, not x86_64", std::env::consts::ARCH),
        })
    }
}

/// Generates the code for `plan` laid out by `assignment`. The result is
/// a pure function of the arguments.
pub fn compile_network(
    plan: &FusionPlan,
    assignment: &BufferAssignment,
    options: &CodegenOptions,
) -> Result<CodeArtifact, CodegenError> {
    options.budget.validate()?;
    let ctx = Ctx {
        plan,
        assignment,
        options,
    };
    let mut e = Emitter::new();
    let mut unit_offsets = Vec::with_capacity(plan.units.len());
    if !plan.units.is_empty() {
        e.emit(Insn::Push(Gpr::R12));
        e.emit(Insn::Push(Gpr::R13));
    }
    for (i, unit) in plan.units.iter().enumerate() {
        unit_offsets.push(e.here());
        e.mark(Marker::UnitStart {
            unit: i,
            kind: unit.kind.name(),
        });
        emit_unit(&ctx, &mut e, i, unit)?;
    }
    if !plan.units.is_empty() {
        e.emit(Insn::Pop(Gpr::R13));
        e.emit(Insn::Pop(Gpr::R12));
    }
    e.emit(Insn::Ret);

    let relocations = e
        .trace
        .instructions()
        .filter_map(|(offset, _, insn)| match insn.memory() {
            Some((m, false)) if m.base == POOL => Some(Relocation {
                code_offset: offset,
                pool_offset: m.disp as usize,
            }),
            _ => None,
        })
        .chain(
            e.trace
                .instructions()
                .filter_map(|(offset, _, insn)| match insn {
                    Insn::Lea { src, .. } if src.base == POOL => Some(Relocation {
                        code_offset: offset,
                        pool_offset: src.disp as usize,
                    }),
                    _ => None,
                }),
        )
        .collect();

    Ok(CodeArtifact {
        code: e.code,
        pool: e.pool.into_data(),
        trace: e.trace,
        relocations,
        unit_offsets,
        arena_bytes: assignment.arena_bytes,
    })
}

fn emit_unit(
    ctx: &Ctx,
    e: &mut Emitter,
    index: usize,
    unit: &CompilationUnit,
) -> Result<(), CodegenError> {
    let unsupported = |reason: &str| CodegenError::UnsupportedUnit {
        unit: index,
        kind: unit.kind.name(),
        reason: reason.to_string(),
    };
    match &unit.kind {
        UnitKind::Dense(d) => {
            let segments = [Segment {
                base: emit::ARENA,
                disp: ctx.offset(unit.inputs[0]),
                len: d.in_features,
            }];
            let weight = |out: usize, i: usize| d.kernel[i * d.units + out];
            matvec::emit_matvec(
                e,
                &matvec::Matvec {
                    segments: &segments,
                    units: d.units,
                    weight: &weight,
                    bias: &d.bias,
                    activation: unit.fused_activation,
                    mode: ctx.options.approximations.activation_mode,
                    post: unit.post_affine.as_ref(),
                    out: asm::Mem::new(emit::ARENA, ctx.offset(unit.output)),
                    accumulators: ctx.n_xmm() - ctx.k().max(2),
                },
            );
        }
        UnitKind::Conv2D(p) => spatial::emit_conv(ctx, e, unit, p),
        UnitKind::DepthwiseConv2D(p) => spatial::emit_window_reduce(
            ctx,
            e,
            unit,
            ctx.plan.shape(unit.inputs[0]),
            p.window,
            spatial::Reduce::Depthwise(p),
        ),
        UnitKind::Pool { kind, window } => spatial::emit_window_reduce(
            ctx,
            e,
            unit,
            ctx.plan.shape(unit.inputs[0]),
            *window,
            spatial::Reduce::Pool(*kind),
        ),
        UnitKind::ElementwiseActivation(tag) => elementwise::emit_activation(ctx, e, unit, *tag),
        UnitKind::BatchNorm(p) => {
            let shape = ctx.plan.shape(unit.output);
            if p.channels() != shape.channels() {
                return Err(unsupported(
                    "batch norm channel count does not match its input",
                ));
            }
            match elementwise::affine_lanes(p.channels(), ctx.n_xmm(), ctx.k()) {
                Some(lanes) => elementwise::emit_affine(ctx, e, unit, p, lanes),
                None => {
                    let depthwise = DepthwiseParams {
                        window: crate::interp::Window {
                            size: [1, 1],
                            strides: [1, 1],
                            padding: crate::model::Padding::Valid,
                        },
                        channels: p.channels(),
                        kernel: p.scale.clone(),
                        bias: p.offset.clone(),
                    };
                    let as_image = CompilationUnit {
                        fused_activation: crate::model::Activation::Linear,
                        post_affine: None,
                        ..unit.clone()
                    };
                    spatial::emit_window_reduce(
                        ctx,
                        e,
                        &as_image,
                        shape,
                        depthwise.window,
                        spatial::Reduce::Depthwise(&depthwise),
                    );
                }
            }
        }
        UnitKind::Softmax => {
            if ctx.plan.shape(unit.output).rank() != 1 {
                return Err(unsupported("softmax is only compiled for flat tensors"));
            }
            softmax::emit_softmax(ctx, e, unit)
        }
        UnitKind::Upsample { size } => spatial::emit_upsample(ctx, e, unit, *size),
        UnitKind::Add => elementwise::emit_add(ctx, e, unit),
        UnitKind::Concat => spatial::emit_concat(ctx, e, unit),
        UnitKind::Copy => elementwise::emit_copy(ctx, e, unit),
    }
    if unit.fused_activation != crate::model::Activation::Linear || unit.post_affine.is_some() {
        let fusable = matches!(
            unit.kind,
            UnitKind::Dense(_) | UnitKind::Conv2D(_) | UnitKind::DepthwiseConv2D(_)
        );
        if !fusable {
            return Err(unsupported(
                "only dense and convolution units carry fused epilogues",
            ));
        }
    }
    Ok(())
}
