//! Minimal neural-network toolkit: a reverse-mode tape, parameter storage,
//! layers and the AdamW optimizer.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{Conv3x3, LayerNorm, Linear, TransformerBlock};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Grads, Mat, RowMix, Tape, Var};
