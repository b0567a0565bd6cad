//! On-disk formats: the `MLAW1` weight container and PNM/PNG rasters.

pub mod pnm;
pub mod weights;

pub use weights::{load_weights, save_weights};
