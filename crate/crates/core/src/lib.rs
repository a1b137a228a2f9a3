//! Block-based conditional permutation importance (BCPI).

pub mod baselines;
pub mod bench;
pub mod cli;
pub mod conditional;
pub mod error;
pub mod inference;
pub mod io;
pub mod learners;
pub mod matrix;
pub mod model_io;
pub mod report;
pub mod simulation;
pub mod types;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use types::{derive_seed, rng_for, Dataset, GroupSpec, ProjectionSet, SplitPlan, Task};
