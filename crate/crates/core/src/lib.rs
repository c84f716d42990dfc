pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod pairwise;
pub mod synth;
pub mod train;
pub mod visualize;
