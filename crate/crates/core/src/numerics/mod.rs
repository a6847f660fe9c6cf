//! Dense `f64` tensors and reverse-mode differentiation.

mod dd;
mod rng;
mod tape;
mod tensor;

pub use dd::Dd;
pub use rng::{derived, seeded, SeededRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{cosine_raw, logsumexp_raw};
