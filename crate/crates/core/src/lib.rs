//! Region-constrained text-to-image retrieval over static image grids.

pub mod api;
pub mod dataset;
pub mod embed;
pub mod eval;
pub mod geometry;
pub mod retrieval;
pub mod store;
pub mod vector;
