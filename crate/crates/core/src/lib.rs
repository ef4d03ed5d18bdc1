//! Simulation of volatility modulated Volterra processes as the boundary of a
//! hyperbolic stochastic PDE, solved by an explicit upwind scheme.

pub mod config;
pub mod drivers;
pub mod error;
pub mod kernels;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod scheme;
pub mod validation;
pub mod volatility;

pub use drivers::{Driver, IncrementStream, JumpLaw};
pub use error::{Error, Result};
pub use kernels::Kernel;
pub use scheme::{BoundaryMode, Field, GridSpec, Model, Realization, Retention, SolveOptions};
pub use volatility::VolatilityModel;
