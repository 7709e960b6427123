//! Cell-based differentiable architecture search with an attack and
//! diagnostics suite for studying how searched architectures behave under
//! adversarial pressure.
//!
//! The crate is organized as a pipeline:
//!
//! * [`search_space`] — cells as small DAGs, mixture (supernet) parameters,
//!   discrete genotypes and their text format, topology metrics, rewiring.
//! * [`nas`] — the bi-level search loop, random-search baseline, and the
//!   mitigation variants layered on top of it.
//! * [`trainer`] — SGD training of supernets / discretized networks /
//!   reference CNNs, label poisoning, adversarial training, checkpoints.
//! * [`attacks`] — white-box and black-box evasion, backdoor implantation,
//!   functionality stealing, and label-only membership inference, all
//!   reporting per-input records plus recomputable aggregates.
//! * [`diagnostics`] — loss contours, gradient variance, input-Lipschitz and
//!   convergence probes, vulnerability overlap.
//! * [`harness`] — experiment specs, cached stage execution, result store,
//!   CSV/PNG emission, and zero-tolerance verification.
//!
//! Numerics are `f64` end to end, every stochastic step takes an explicit
//! seed, and runs are bit-reproducible on one thread.

pub mod attacks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nas;
pub mod nn;
pub mod rng;
pub mod search_space;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::{ModelArch, Network, RefArch};
pub use tensor::Tensor;
