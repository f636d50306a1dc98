//! Fully coupled two-scale systems: a small-noise diffusion `X` whose
//! coefficients are modulated by a fast finite-state jump process `Y`.
//!
//! The crate covers
//! - problem instances and assumption checks ([`model`]),
//! - the fast chain at frozen slow state: generators, stationary laws,
//!   jump geometry ([`fastchain`]),
//! - the averaged dynamics and law-of-large-numbers diagnostics ([`averaging`]),
//! - exact-in-law simulation by Poisson thinning, with feedback controls and
//!   reproducible parallel ensembles ([`simulator`]),
//! - the large-deviation local rate and path rate ([`ratefn`]),
//! - the perturbation of near-optimal controls into ones with a unique
//!   closed-loop solution ([`perturb`]),
//! - rare-event Monte Carlo and rate comparisons ([`experiments`]).
//!
//! State indices are 0-based in the Rust API and 1-based in every external
//! file format.

pub mod averaging;
pub mod error;
pub mod fastchain;
pub mod experiments;
pub mod fixtures;
pub mod io;
mod linalg;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod ratefn;
pub mod rng;
pub mod simulator;

pub use averaging::Path;
pub use error::{Error, Result};
pub use fastchain::{JumpGeometry, RateMatrix};
pub use model::{CoefficientSpec, Model, ModelBounds, ModelConfig};
pub use perturb::{ControlTable, PerturbResult};
pub use ratefn::{ControlTriple, LocalRateResult};
pub use rng::StreamId;
pub use simulator::{FeedbackControls, SimSpec, Trajectory};

/// Runs `f` on a dedicated rayon pool with `threads` workers (`None` uses the
/// global pool). Results of every parallel routine in this crate are
/// independent of the worker count.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
