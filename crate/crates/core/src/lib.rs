//! Penalized maximum likelihood estimation for mixtures of von Mises-Fisher
//! distributions.

pub mod degeneracy;
pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod rng;
pub mod sim;
pub mod special;
pub mod sphere;

pub use error::{Error, Result};
pub use model::{PenaltyConfig, PenaltyRule, PenaltySpec, VmfComponent, VmfMixture};
pub use sphere::{SphericalCap, UnitVector};
