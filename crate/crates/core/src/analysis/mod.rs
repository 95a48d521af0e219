//! Runtime overhead benchmark, kernel-trajectory extraction and `ω` sweeps.

mod bench;
mod sweep;
mod trajectory;

pub use bench::*;
pub use sweep::*;
pub use trajectory::*;
