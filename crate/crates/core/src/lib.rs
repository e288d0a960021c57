//! Gaze target estimation with eye-contact gating.
//!
//! A frame goes through head detection, an eye-contact classifier per head,
//! and, for heads not looking at the camera, a gaze decoder that predicts
//! whether the target is in frame and where.

pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod eyecontact;
pub mod frame;
pub mod gazenet;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use frame::FrameImage;
pub use types::*;
