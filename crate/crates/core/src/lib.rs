//! Distributionally robust system level synthesis for linear time-invariant
//! plants in innovation form.
//!
//! The crate is organized bottom-up: [`lti`] builds the lifted operators of a
//! plant, [`sls`] maps between closed-loop parameters and causal affine
//! policies, [`lp`] is the linear-programming layer, [`synthesis`] assembles
//! the robust and nominal programs, [`harness`] runs Monte-Carlo studies and
//! [`validate`] bundles the property suites used as a self-check.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod lp;
pub mod lti;
pub mod sls;
pub mod synthesis;
pub mod validate;

pub use error::{Error, Result};
