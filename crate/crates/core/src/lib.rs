//! Vision safety stack for robotic telesurgery.
//!
//! A conditional GAN (U-Net generator, patch discriminator) segments robot
//! arms in endoscopic-style frames. Around it sit the data-preparation
//! pipeline, a subtraction/histogram evaluation, a latency harness and a
//! fail-closed safety interlock.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod guard;
pub mod nets;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
