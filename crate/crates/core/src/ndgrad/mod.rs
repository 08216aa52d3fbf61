//! A small differentiable array engine with second-order support.
//!
//! Arrays are 64-bit, row-major, and only broadcast scalar-to-tensor through
//! the explicit [`OpKind::BroadcastScalar`]. Bias rows are expanded with a
//! ones-column matmul rather than implicit broadcasting.

mod adam;
mod array;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use params::{ParamSet, CONTAINER_MAGIC};
pub use tape::{forward_op, grad, OpKind, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not fit {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite result in {op}")]
    NonFiniteResult { op: &'static str },
    #[error("tensor is not recorded on the output's tape")]
    NotOnTape,
    #[error("inputs are recorded on different tapes")]
    TapeMismatch,
    #[error("gradient output must hold a single value, got shape {0:?}")]
    NotScalarOutput(Vec<usize>),
    #[error("parameter mismatch: {0}")]
    NameMismatch(String),
    #[error("malformed parameter container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Puts every parameter on `tape` as a leaf, in set order.
pub fn bind(tape: &Tape, params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|(_, a)| tape.leaf(a.clone())).collect()
}

/// Packs gradients computed for [`bind`]-ed leaves back into a named set.
pub fn collect_grads(params: &ParamSet, grads: Vec<Tensor>) -> Result<ParamSet, GradError> {
    let mut out = ParamSet::new();
    for ((name, _), g) in params.iter().zip(grads) {
        out.insert(name, g.value().clone())?;
    }
    Ok(out)
}
