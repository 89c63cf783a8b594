//! Tactile surface reconstruction from sequences of vision-based tactile
//! sensor presses.

pub mod correction;
pub mod geometry;
pub mod gradient_model;
pub mod io;
pub mod loop_closure;
pub mod metrics;
pub mod object;
pub mod pipeline;
pub mod poisson;
pub mod pose_graph;
pub mod registration;
pub mod seed;
pub mod sim;
pub mod spatial;
