//! Post-processing toolkit for 3D cell instance segmentation.
//!
//! Detects suspected oversegmentations in a label volume by combining
//! layer-to-layer shape divergence (earthmover's distance between mask
//! distributions), overlap-trend shape analysis, and a small pre-trained
//! binary classifier; confirmed splits are repaired by optimal-transport
//! mask interpolation and label merging.

pub mod classifier;
pub mod cli;
pub mod features;
pub mod interpolate;
pub mod metrics;
pub mod ot;
pub mod testkit;
pub mod tilted;
pub mod volume;

pub use volume::{AdjacencyGraph, CellIndex, CellRecord, LabelVolume, Mask2D};
