//! Numerical KAM iteration for elliptic lower-dimensional invariant tori.

pub mod fourier;
pub mod jet;
pub mod homological;
pub mod greens;
pub mod multiscale;
pub mod atlas;
pub mod driver;
pub mod stability;
pub mod audit;
