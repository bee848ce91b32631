//! Blind super-resolution laboratory.
//!
//! * [`kernels`] – blur kernel families and samplers
//! * [`degrade`] – the multi-order degradation model and its parameter codec
//! * [`autodiff`] – a small reverse-mode tensor engine with Adam
//! * [`dan`] – the unfolded restorer/estimator network
//! * [`train`] – dataset synthesis, training loop and checkpoints
//! * [`metrics`] – PSNR/SSIM on luminance, kernel accuracy, evaluation reports

pub mod autodiff;
pub mod dan;
pub mod degrade;
pub mod error;
pub mod image;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod rng;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
