//! Verifier-gated, tool-augmented visual reasoning.
//!
//! A reasoner proposes a planning text with an action directive, the toolbox
//! executes it, and a verifier built from a preference-tuned model and its
//! reference decides whether another step is worth taking. Alongside the
//! runtime live a toy-scale training lab that realizes the training
//! objectives exactly, and the dataset pipeline that builds SFT and
//! preference data from generated trajectories.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod engine;
pub mod gateway;
pub mod image;
pub mod lab;
pub mod pipeline;
pub mod toolbox;
pub mod trajectory;
mod util;
pub mod verifier;

pub use util::sha256_hex;
