//! Longitudinal virtual contrast enhancement for 3D T1-weighted MRI.
//!
//! The crate covers the whole study workflow at desk scale:
//!
//! * [`volume`]: the 3D [`Volume`] type, NIfTI-1 I/O and preprocessing
//!   (resampling, cropping, joint min-max normalization, augmentation transforms).
//! * [`phantom`]: reproducible synthetic two-session cohorts with evolving lesions.
//! * [`dosesim`]: parametric low-dose post-contrast simulation.
//! * [`register`]: rigid multi-resolution registration on masked MSE.
//! * [`nn`]: a small reverse-mode autodiff engine and the 3D V-Net.
//! * [`train`]: Adam, the plateau scheduler, augmentation and the training loop.
//! * [`evalstat`]: MSE/PSNR/SSIM and the paired statistical comparison protocol.
//! * [`study`]: the staged pipeline driven by the `lvce` binary.

pub mod dosesim;
pub mod error;
pub mod evalstat;
pub mod nn;
pub mod phantom;
pub mod register;
pub mod rng;
pub mod study;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BoundingBox, ChannelLayout, MultiChannelVolume, Volume};

/// Toolkit version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
