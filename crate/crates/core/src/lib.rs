//! Fog-robust crowd counting: differentiable atmospheric physics, spline
//! feature transforms and weather-aware graph reasoning.

pub mod ablation;
pub mod atmos;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fogbench;
pub mod gradsuite;
pub mod io;
pub mod kan;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod wgcn;

pub use error::{Error, Result};
