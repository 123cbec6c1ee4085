//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! The crate is deliberately small: a [`Tape`] records matrix operations,
//! [`Tape::backward`] returns parameter gradients, and [`Adam`] applies them
//! to a [`ParamStore`]. Everything is generic over [`Scalar`] (`f32`/`f64`).

pub mod init;
mod optim;
mod params;
mod scalar;
mod tape;

pub use optim::Adam;
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{softmax_rows, SparseMatrix, Tape, Var};

pub type TapeF32 = Tape<f32>;
pub type TapeF64 = Tape<f64>;
pub type ParamStoreF32 = ParamStore<f32>;
pub type ParamStoreF64 = ParamStore<f64>;
