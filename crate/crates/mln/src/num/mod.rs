//! Numeric core: matrices, seeded RNG, decompositions, and reverse-mode
//! differentiation.

pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tape;
