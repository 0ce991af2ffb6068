//! Physics-informed bird's-eye-view world model.
//!
//! The crate covers the whole loop: a kinematic highway simulator
//! ([`sim`]), MCTS data collection ([`collect`]), soft/hard vehicle masks
//! ([`mask`]), a small EDM-preconditioned denoiser with its own reverse-mode
//! autodiff ([`nn`]), training ([`train`]), warm-start autoregressive
//! sampling ([`sample`]), physical-consistency metrics ([`eval`]), a latency
//! harness ([`bench`]) and an interactive session server ([`service`]).

pub mod bench;
pub mod collect;
pub mod eval;
pub mod frame;
pub mod mask;
pub mod nn;
pub mod sample;
pub mod service;
pub mod sim;
pub mod train;

pub use frame::BevFrame;
pub use mask::{MaskField, MaskMode, MaskParams};
pub use sim::{Action, SimConfig, SimWorld};
