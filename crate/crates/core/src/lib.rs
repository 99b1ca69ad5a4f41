//! Sparse-view 3D Gaussian splatting for street scenes, regularized by
//! guidance images rendered at sampled pseudo views.
//!
//! The crate is organised along the pipeline:
//! [`scene_io`] loads datasets and checkpoints, [`lidar`] builds the
//! colorized initialization cloud and depth targets, [`gaussians`] holds the
//! scene representation, [`rasterizer`] renders it differentiably,
//! [`losses`] scores renders, [`guidance`] produces pseudo-view targets, and
//! [`trainer`] runs the optimization.

pub mod binfmt;
pub mod gaussians;
pub mod geometry;
pub mod guidance;
pub mod lidar;
pub mod losses;
pub mod pixels;
pub mod rasterizer;
pub mod scene_io;
pub mod sh;
pub mod synthetic;
pub mod trainer;
