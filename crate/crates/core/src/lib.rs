//! Knowledge injection into transformer feed-forward layers.
//!
//! Retrieved knowledge texts are embedded, projected and appended as extra
//! key-value slots to the FFN of selected encoder layers. The crate holds
//! the numeric core, the encoder, the injection operators, a BM25 + dense
//! retriever, a synthetic multiple-choice harness and the `kffn` CLI.

pub mod cli;
pub mod encoder;
pub mod harness;
pub mod injection;
pub mod numeric;
pub mod retrieval;
pub mod text;

pub type TensorF64 = numeric::Tensor<f64>;
pub type TensorF32 = numeric::Tensor<f32>;
pub type ModelF64 = encoder::Model<f64>;
pub type ModelF32 = encoder::Model<f32>;
pub type TapeF64<'p> = numeric::Tape<'p, f64>;
pub type TapeF32<'p> = numeric::Tape<'p, f32>;
