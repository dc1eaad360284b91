//! Dense arrays, a reverse-mode tape, parameters with Adam, and a
//! finite-difference gradient checker.
//!
//! All arithmetic is `f64`. A [`Tape`] lives for one forward pass and borrows
//! the [`ParamStore`] read-only, so disjoint examples can be evaluated from
//! several threads against the same parameter snapshot.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::{
    log_sum_exp, matmul, matmul_nt, matmul_tn, row_softmax, sigmoid_scalar, softplus_scalar, DenseArray,
};
pub use gradcheck::{difference_quantum, grad_check, relative_error, resolved_relative_error, GradCheckReport};
pub use params::{adam_step, AdamConfig, ParamEntry, ParamGrads, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

/// Elementwise softplus of a whole array.
pub fn softplus(x: &DenseArray) -> DenseArray {
    x.map(softplus_scalar)
}

/// `-ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> crate::Result<f64> {
    if label >= logits.len() {
        return Err(crate::Error::Index {
            what: "cross_entropy label",
            index: label,
            limit: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}
