//! Differentiable tensor math, closed-form Gaussian quantities, optimization
//! and the finite-difference gradient oracle.

pub mod gaussian;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gaussian::{
    clamp_exp_ratio, clipped_surrogate, gaussian_kl_diag, gaussian_logprob_normalized, standardize_group,
    DiagGaussian,
};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Bind, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
