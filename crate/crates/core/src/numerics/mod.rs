//! Minimal dense-tensor numerics with reverse-mode autodiff.
//!
//! Float64 everywhere, row-major storage, no broadcasting beyond what the
//! transformer needs. The independent gradient oracle lives in [`gradcheck`].

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_difference_grad;
pub use optim::{Adam, AdamConfig};
pub use params::{GradMap, Param, ParamId, ParamStore};
pub use rng::CounterRng;
pub use tape::{log_softmax, logsumexp, NodeId, Reduction, RowSel, Tape, MASK_NEG};
pub use tensor::{max_rel_err, rel_err, Tensor};
