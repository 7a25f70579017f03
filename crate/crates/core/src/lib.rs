//! Compiles small convolutional networks into x86-64 SSE machine code at
//! run time, with an exact reference interpreter to check against.
//!
//! The pipeline is [`model`] → [`graph`] → [`optimizer`] → [`planner`] →
//! [`codegen`], wrapped up by [`runtime::CompiledNetwork`].

use std::path::PathBuf;

pub mod approx;
pub mod codegen;
pub mod graph;
pub mod interp;
pub mod model;
pub mod optimizer;
pub mod planner;
pub mod runtime;
pub mod tensor;

pub use approx::{ActivationMode, ApproximationOptions, SoftmaxExp};
pub use codegen::{CodegenError, CodegenOptions, RegisterBudget};
pub use graph::{build_graph, ComputationGraph, GraphError, TensorId};
pub use interp::{interpret, InterpretError};
pub use model::{FormatError, Model};
pub use optimizer::{optimize, FusionPlan, OptimizeError};
pub use runtime::{CompiledNetwork, RuntimeError};
pub use tensor::{Tensor, TensorShape};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}
