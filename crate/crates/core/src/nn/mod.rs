//! Minimal `f64` neural-network stack: kernels, named parameters, reverse-mode
//! tape, and the model builders used by the search and training pipelines.

pub mod kernels;
pub mod net;
pub mod params;
pub mod tape;

pub use kernels::ConvCfg;
pub use net::{ModelArch, Network, RefArch};
pub use params::{Grads, ParamSet};
pub use tape::{BackwardResult, NodeId, Tape};
