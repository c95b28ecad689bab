//! Dense linear algebra, loss primitives, gradient bookkeeping and optimizers.

mod gradcheck;
mod linalg;
mod loss;
mod optim;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use linalg::{axpy, check_finite, check_len, dot, norm, normalize, sub, Matrix};
pub use loss::{cosine_backward_into, cosine_sim, cross_entropy, softmax, softmax_cross_entropy, PROB_FLOOR};
pub use optim::{AdamConfig, AdamState, Sgd};
pub use tape::{GradTape, LeafId};
