//! Pixelated antenna synthesis: port-reduction topology search followed by
//! trust-region tuning of the continuous geometry.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod geometry;
pub mod impm;
pub mod pipeline;
pub mod response;
pub mod search;
pub mod trust_region;

mod linalg;
