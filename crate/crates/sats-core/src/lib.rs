//! Siamese semantic-asymmetry segmentation on synthetic symmetric phantoms.
//!
//! The crate provides the full desk-scale pipeline: volume and mask types
//! with a portable on-disk format ([`volume`]), symmetric phantom generation
//! ([`phantom`]), asymmetrical-region selection ([`asymmetry`]), a minimal
//! reverse-mode autodiff engine ([`autodiff`]), the shared-weight
//! encoder-decoder with projection head ([`network`]), the segmentation and
//! voxel-wise margin losses ([`losses`]), surface-distance evaluation
//! metrics ([`metrics`]), and the two-stage trainer with sliding-window
//! inference ([`trainer`]).

pub mod asymmetry;
pub mod autodiff;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod util;
pub mod volume;
