//! Dense reverse-mode differentiation: matrices, named parameter vectors, a
//! gradient tape and a finite-difference checker.

mod check;
mod matrix;
mod params;
mod tape;

pub use check::{evaluate, finite_difference_check, record, FdEntry, FdReport, Program};
pub use matrix::Matrix;
pub use params::{Layout, LayoutBuilder, ParameterVector, Segment};
pub use tape::{std_normal_cdf, std_normal_pdf, ParamVars, Tape, Var};
