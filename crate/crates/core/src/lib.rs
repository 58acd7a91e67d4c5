//! Perturbative series, Melnikov analysis, small-divisor scales, tree
//! expansions and self-energy checks for quasi-periodically forced
//! one-dimensional systems.

pub mod model;
pub mod smalldiv;
pub mod lindstedt;
pub mod trees;
pub mod selfenergy;
pub mod verify;
pub mod cli;
