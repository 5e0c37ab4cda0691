pub mod belief;
pub mod campaign;
pub mod congestion;
pub mod consensus;
pub mod ep;
pub mod error;
pub mod inner;
pub mod meanfield;
pub mod metrics;
pub mod orchestrator;
mod quadrature;
pub mod topology;

pub use belief::{GaussianNatural, LognormalBelief};
pub use error::{Error, Result};
pub use quadrature::sigmoid;
