//! Edge-side 3D object detection from 2D instance masks and LiDAR point
//! clouds, with tracking, cloud offloading and evaluation.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod report;
pub mod scheduler;
pub mod synth;
pub mod tracking;
pub mod transform;
