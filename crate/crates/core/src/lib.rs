//! Graph-network surrogates for endothelial cell activation potential (ECAP)
//! on triangle meshes.
//!
//! The pipeline runs bottom-up: [`mesh`] parses and validates surfaces,
//! [`graph`] turns them into feature graphs, [`spline`] and [`model`] build
//! the spline-convolution network on the [`autodiff`] tape, and [`train`]
//! fits and evaluates it. [`hemo`] computes ground truth from wall shear
//! stress and [`synth`] generates whole datasets.

pub mod autodiff;
pub mod geom;
pub mod graph;
pub mod hemo;
pub mod mesh;
pub mod optim;
pub mod spline;
pub mod synth;
pub mod tensor;
pub mod model;
pub mod train;
