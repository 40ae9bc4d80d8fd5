//! Continual-learning benchmark for histopathology-style image classification.
//!
//! The crate covers the whole pipeline: stain-based domain augmentation
//! ([`stain`]), dataset handling ([`data`]), a small trainable CNN ([`nn`]),
//! incremental scenario construction ([`scenario`]), continual-learning
//! strategies ([`strategy`]) and experiment orchestration ([`harness`]).

pub mod data;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod stain;
pub mod strategy;
