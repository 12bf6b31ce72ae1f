//! Fusion of pretrained bottleneck adapters.
//!
//! Several adapters trained on different tasks are combined into a single
//! adapter of the same size, either by summing or averaging their tensors
//! position by position, or by first aligning their bottleneck neurons with
//! optimal transport (on weights or on activations) and then averaging.
//!
//! Module map:
//!
//! * [`linalg`] dense matrices and kernels
//! * [`adapter`] adapter types, forward pass, parameter counts
//! * [`ot`] exact and entropic transport solvers
//! * [`align`] ground costs and neuron alignment
//! * [`merge`] the four merge strategies and the merge report
//! * [`store`] binary containers and report JSON
//! * [`synth`] fixtures and the directional experiment harness

pub mod adapter;
pub mod align;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod ot;
pub mod par;
pub mod store;
pub mod synth;

pub use adapter::{AdapterConfig, AdapterLayer, AdapterStack, Nonlinearity, ProbeBatch, StackMetadata};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use merge::{MergeKind, MergeReport, MergeStrategy};
