//! Physics-informed soft sensors for concentrate gold grade in froth
//! flotation cells, with the synthetic plant simulator, preprocessing, and
//! data-driven baselines needed to benchmark them.

pub mod autodiff;
pub mod data;
pub mod nn;
pub mod physics;
pub mod simulator;
pub mod preprocess;
pub mod baselines;
pub mod train;
