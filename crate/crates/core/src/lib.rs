pub mod cli;
pub mod error;
pub mod formats;
pub mod harness;
pub mod image;
pub mod losses;
pub mod map;
pub mod medium;
pub mod pose_graph;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod tracker;
