//! Shared machinery for the property, gradient, and acceptance targets.

pub mod checks;
pub mod gradcases;
