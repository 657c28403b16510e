//! Gradient, KL and normalisation checks on miniature models.

#[macro_use]
mod common;
#[path = "suites/numerics.rs"]
mod numerics;
