//! Training and certification of neural-network feedback controllers with
//! guaranteed disk stability margins.
//!
//! The library combines four pieces:
//!
//! - [`plant`]: state-space plant models, disk-margin arithmetic, and the
//!   rewrite of an uncertain plant as an LTI system in feedback with a
//!   norm-bounded uncertainty;
//! - [`controller`]: recurrent implicit neural network (RINN) controllers,
//!   an LTI system in feedback with sector-bounded activations;
//! - [`certify`] / [`synthesis`]: LMI-based certification of a disk margin
//!   for a fixed controller, and the convex projection machinery that maps
//!   trained parameters back into the certified set;
//! - [`sim`] / [`train`]: continuous-time rollouts of the closed loop and
//!   the alternating train/enforce loop built on them.

// Forces the link against the system BLAS/LAPACK used by the SDP backend.
extern crate openblas_src as _openblas_src;

pub mod certify;
pub mod controller;
pub mod error;
pub mod plant;
pub mod sdp;
pub mod sim;
pub mod synthesis;
pub mod train;

pub use error::{Error, Result};
