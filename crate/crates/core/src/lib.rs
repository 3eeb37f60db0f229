//! Deterministic simulator and library for personalized federated
//! intrusion-detection training with dual-model clients.
//!
//! Each client trains a private teacher and a shared lightweight student
//! under a class-balanced task loss, agreement-gated bidirectional
//! knowledge distillation and multi-component feature alignment; the
//! server aggregates unit-normalized student pseudo-gradients with equal
//! weight and a momentum buffer. Everything is seed-deterministic,
//! including the non-IID Dirichlet partitioning and the report files.

pub mod bank;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod run;
pub mod server;
pub mod tensor;

pub use error::{Result, SentinelError};
