//! Anytime certified lower/upper bounds on maximal reachability
//! probabilities in Markov decision processes with continuous state and
//! action spaces.
//!
//! The solver keeps a finite set of sampled state-action values and extends
//! them to the whole space through Lipschitz envelopes, updating the sampled
//! values by certified backups until the bounds at the initial state close to
//! the requested precision.

pub mod approx;
pub mod error;
pub mod model;
pub mod models;
pub mod oracle;
pub mod persist;
pub mod sampler;
pub mod solver;
pub mod space;
pub mod store;

pub use error::{ApproxError, ModelError, PersistError, SolverError, StoreError};
pub use model::{ActionSet, Kernel, MdpModel, Partition, TagRegion};
pub use space::{ActionPoint, BoxBounds, StatePoint};
