//! The compiled network handle: owns the arena, exposes the network's
//! input and output tensors, and runs the generated code.
//!
//! Inputs are not cleared between calls to [`CompiledNetwork::apply`]; a
//! value written once stays in place until overwritten.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codegen::{check_host, compile_network, CodeArtifact, CodegenOptions, ExecutableMemory};
use crate::graph::{build_graph, ComputationGraph};
use crate::model::Model;
use crate::optimizer::{optimize, FusionPlan};
use crate::planner::{assign_buffers, BufferAssignment};
use crate::tensor::TensorShape;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("{kind} index {index} out of range (network has {count})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        count: usize,
    },
}

/// Where one network input or output lives in the arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorDescriptor {
    pub shape: TensorShape,
    /// Byte offset in the arena.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileMetadata {
    /// Wall-clock time from graph construction to executable code.
    pub compile_time: Duration,
    pub units: usize,
    pub arena_bytes: usize,
    pub code_bytes: usize,
    pub pool_bytes: usize,
}

#[derive(Clone, Copy)]
#[repr(C, align(16))]
struct Block([u32; 4]);

const GUARD_BLOCKS: usize = 4;
const GUARD: Block = Block([0xDEAD_BEEF; 4]);

type Entry = unsafe extern "sysv64" fn(*mut f32, *const f32);

pub struct CompiledNetwork {
    plan: FusionPlan,
    assignment: BufferAssignment,
    artifact: CodeArtifact,
    code: ExecutableMemory,
    /// Guard blocks on both sides of the arena proper.
    arena: Vec<Block>,
    pool: Vec<Block>,
    inputs: Vec<TensorDescriptor>,
    outputs: Vec<TensorDescriptor>,
    metadata: CompileMetadata,
}

impl std::fmt::Debug for CompiledNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompiledNetwork")
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

impl CompiledNetwork {
    pub fn compile(model: &Model, options: &CodegenOptions) -> Result<Self, crate::Error> {
        let start = Instant::now();
        let graph = build_graph(&model.manifest, &model.weights)?;
        Self::finish(&graph, options, start)
    }

    pub fn from_graph(
        graph: &ComputationGraph,
        options: &CodegenOptions,
    ) -> Result<Self, crate::Error> {
        Self::finish(graph, options, Instant::now())
    }

    fn finish(
        graph: &ComputationGraph,
        options: &CodegenOptions,
        start: Instant,
    ) -> Result<Self, crate::Error> {
        check_host()?;
        let plan = optimize(graph)?;
        let assignment = assign_buffers(&plan);
        let artifact = compile_network(&plan, &assignment, options)?;
        let code = ExecutableMemory::new(&artifact.code)?;
        let compile_time = start.elapsed();

        let blocks = assignment.arena_bytes.div_ceil(16);
        let mut arena = vec![GUARD; blocks + 2 * GUARD_BLOCKS];
        for b in &mut arena[GUARD_BLOCKS..GUARD_BLOCKS + blocks] {
            *b = Block([0; 4]);
        }
        let pool = artifact
            .pool
            .chunks(4)
            .map(|c| {
                let mut b = Block([0; 4]);
                for (dst, v) in b.0.iter_mut().zip(c) {
                    *dst = v.to_bits();
                }
                b
            })
            .collect();
        let describe = |t, shape| TensorDescriptor {
            shape,
            offset: assignment.offset(t),
        };
        let inputs = plan
            .inputs
            .iter()
            .map(|&t| describe(t, plan.shape(t)))
            .collect();
        let outputs = plan
            .outputs
            .iter()
            .zip(&plan.output_shapes)
            .map(|(&t, &shape)| describe(t, shape))
            .collect();
        let metadata = CompileMetadata {
            compile_time,
            units: plan.units.len(),
            arena_bytes: assignment.arena_bytes,
            code_bytes: artifact.code.len(),
            pool_bytes: artifact.pool.len() * 4,
        };
        Ok(CompiledNetwork {
            plan,
            assignment,
            artifact,
            code,
            arena,
            pool,
            inputs,
            outputs,
            metadata,
        })
    }

    pub fn inputs(&self) -> &[TensorDescriptor] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[TensorDescriptor] {
        &self.outputs
    }

    fn floats(&self, d: &TensorDescriptor) -> std::ops::Range<usize> {
        let start = GUARD_BLOCKS * 4 + d.offset / 4;
        start..start + d.shape.element_count()
    }

    fn arena_floats(&self) -> &[f32] {
        // SAFETY: `Block` is 16 bytes of plain data; any bit pattern is a
        // valid f32.
        unsafe { std::slice::from_raw_parts(self.arena.as_ptr().cast(), self.arena.len() * 4) }
    }

    fn arena_floats_mut(&mut self) -> &mut [f32] {
        // SAFETY: as in `arena_floats`, with unique access through `&mut self`.
        unsafe {
            std::slice::from_raw_parts_mut(self.arena.as_mut_ptr().cast(), self.arena.len() * 4)
        }
    }

    /// Writable storage of network input `i`.
    pub fn input_view(&mut self, i: usize) -> Result<&mut [f32], RuntimeError> {
        let d = *self.inputs.get(i).ok_or(RuntimeError::IndexOutOfRange {
            kind: "input",
            index: i,
            count: self.inputs.len(),
        })?;
        let range = self.floats(&d);
        Ok(&mut self.arena_floats_mut()[range])
    }

    /// Storage of network output `i` as of the last [`apply`](Self::apply).
    pub fn output_view(&self, i: usize) -> Result<&[f32], RuntimeError> {
        let d = self.outputs.get(i).ok_or(RuntimeError::IndexOutOfRange {
            kind: "output",
            index: i,
            count: self.outputs.len(),
        })?;
        Ok(&self.arena_floats()[self.floats(d)])
    }

    /// Runs the forward pass. Never allocates.
    pub fn apply(&mut self) {
        // SAFETY: `code` was generated for exactly this arena layout and
        // pool; both pointers are 16-byte aligned and the code touches
        // only `arena_bytes` bytes past the arena pointer and the pool.
        unsafe {
            let entry: Entry = std::mem::transmute(self.code.as_ptr());
            let arena = self.arena.as_mut_ptr().add(GUARD_BLOCKS).cast::<f32>();
            entry(arena, self.pool.as_ptr().cast());
        }
    }

    /// Whether the guard blocks around the arena are untouched.
    pub fn guard_intact(&self) -> bool {
        let n = self.arena.len();
        self.arena[..GUARD_BLOCKS]
            .iter()
            .chain(&self.arena[n - GUARD_BLOCKS..])
            .all(|b| b.0 == GUARD.0)
    }

    pub fn metadata(&self) -> &CompileMetadata {
        &self.metadata
    }

    pub fn artifact(&self) -> &CodeArtifact {
        &self.artifact
    }

    pub fn plan(&self) -> &FusionPlan {
        &self.plan
    }

    pub fn assignment(&self) -> &BufferAssignment {
        &self.assignment
    }

    /// Address range of the executable code.
    pub fn code_region(&self) -> (usize, usize) {
        (self.code.as_ptr() as usize, self.code.len())
    }
}
