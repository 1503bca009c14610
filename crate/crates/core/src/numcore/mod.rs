//! Dense numerical core shared by every trainable model: a row-major
//! [`Matrix`], named parameter stores, a reproducible RNG, stable activation
//! functions and a central-difference gradient checker.

mod check;
mod matrix;
mod ops;
mod params;
mod rng;

pub use check::{check_gradient, check_model_gradient, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{
    axpy, dot, l2_norm, log_softmax, relu, relu_grad, sigmoid, sigmoid_grad_from_output,
    stable_softmax, tanh_grad_from_output, unit_normalize, unit_normalize_with_norm, NORM_EPS,
};
pub use params::{load_store, sgd_step, to_store, zero_params, ParamEntry, ParamStore, Parameters};
pub use rng::SeededRng;
