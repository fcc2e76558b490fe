//! Dense 64-bit array numerics with recorded-graph reverse differentiation.
//!
//! The engine is a Wengert tape: every primitive applied to a [`Var`] is
//! recorded on a [`Tape`] together with its eagerly computed value, and
//! [`gradient`] replays the record backwards to accumulate adjoints.
//! Forward tangents ([`forward_tangents`]) are propagated *onto the same
//! tape*, which is what makes the log-det-Jacobian entropy term
//! differentiable: [`jacobian_on`] emits the Jacobian of a recorded map as
//! ordinary tape nodes, so a later reverse pass sees straight through it.
//!
//! Everything is `f64` and desk-scale by design; there is no GPU path, no
//! sparsity and no stochastic trace estimation.

mod linalg;
mod tape;
mod tensor;

pub use linalg::{cholesky_lower, lu_inverse, lu_logabsdet, sym_eig};
pub use tape::{
    batched_logabsdet_values, forward_tangents, gradient, gradient_fn, jacobian_columns,
    jacobian_on, jacobian_tensor, logabsdet, Activation, Op, Tape, Var,
};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by graph recording and differentiation.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value at graph node {node}")]
    NonFinite { node: usize },
    #[error("expected a scalar output, found shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is singular: {0}")]
    Singular(String),
    #[error("no forward-tangent rule for op at node {node}")]
    UnsupportedTangent { node: usize },
}
