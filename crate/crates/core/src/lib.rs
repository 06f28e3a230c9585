//! Layer- and timestep-routed conditioning for cross-attention diffusion
//! denoisers, multi-attribute token inversion, attention probing and
//! evaluation.

pub mod backend;
pub mod conditioning;
pub mod eval;
pub mod prompt;
pub mod router;
pub mod util;
pub mod attributes;
pub mod inversion;
pub mod npy;
pub mod palette;
pub mod probe;
