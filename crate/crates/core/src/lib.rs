// `!(x > y)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod config;
pub mod dataset_io;
pub mod ekf;
pub mod eval;
pub mod geometry;
pub mod kdtree;
pub mod mapping;
pub mod pipeline;
pub mod pointcloud;
pub mod preintegration;
pub mod scan_matching;
pub mod simulator;
