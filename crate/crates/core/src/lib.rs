//! Street-view crop ground referencing and satellite crop-type mapping.
//!
//! The crate turns a road network, a land-cover raster and per-window crop
//! predictions for street-level images into geolocated ground references,
//! fits harmonic features to satellite time series, trains a random forest and
//! renders a crop-type map.

pub mod geodesy;
pub mod landcover;
pub mod roadnet;
pub mod labeling;
pub mod svclient;
pub mod features;
pub mod forest;
pub mod pipeline;
pub mod synth;
