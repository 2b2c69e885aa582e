//! Inverse design of grating-flanked slits.
//!
//! A cheap Lorentzian transmission model generates paired (device, spectrum)
//! data; a conditional invertible network and a conditional VAE are trained to
//! map a target spectrum back to the full set of devices that produce it.

pub mod cinn;
pub mod cvae;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod error;
pub mod model;
pub mod optics;
pub mod pipeline;
pub mod preprocess;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelKind, PosteriorSample, PosteriorSampler, Trainable};
pub use optics::{DeviceParams, OpticsConfig, Spectrum};
