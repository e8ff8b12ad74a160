//! Lock-free asynchronous SGD: a real-thread engine, a deterministic
//! adversarial simulator, closed-form convergence bounds, and an
//! experiment harness that checks the bounds empirically.

pub mod config;
pub mod engine;
pub mod harness;
pub mod problems;
pub mod report;
pub mod rng;
pub mod shared_model;
pub mod sim;
pub mod theory;
pub mod trace;
pub mod verdict;
