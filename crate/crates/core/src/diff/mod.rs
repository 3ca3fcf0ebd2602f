//! Automatic differentiation: forward-mode dual numbers, scalar programs over
//! a fixed primitive set, and a reverse-mode tape over dense tensors.

pub mod dual;
pub mod program;
pub mod tape;
pub mod tensor;

pub use dual::{Dual, Real};
pub use program::{forward_with_tangent, program_gradient, NodeId, Prim, Program, ProgramBuilder};
pub use tape::{DualVar, Fault, GradientVector, Tape, Var};
pub use tensor::Tensor;
