//! A from-scratch CNN micro-framework built around cheap convolutions
//! (group, depthwise, shift + pointwise), an exact parameter/FLOP cost
//! model, and knowledge distillation — dark knowledge, attention transfer,
//! and online distillation with a multi-branch online teacher.
//!
//! Start with the runnable examples (`cargo run --example cost_table`) or
//! the `cheapconv` binary (`analyze`, `transform`, `train`, `eval`).

pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{parse_arch, substitute_conv, ArchDescriptor, NetworkInstance};
pub use layers::{ConvKind, ConvSpec, ShiftSpec};
pub use tape::{Tape, Var};
pub use tensor::{ParamSet, Parameter, Scalar, Tensor};
