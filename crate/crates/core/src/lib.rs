pub mod app;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod train;
pub mod weights;
