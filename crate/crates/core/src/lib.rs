//! Simulation and reconstruction toolkit for blip-up/down 3D-EPI with
//! CAIPI sampling, structured low-rank reconstruction and T2* mapping.

pub mod encode;
pub mod error;
pub mod exec;
pub mod fft;
pub mod fieldmap;
pub mod linalg;
pub mod phantom;
pub mod pipeline;
pub mod protocol;
pub mod quant;
pub mod slr;
pub mod volumes;

pub use error::{Error, Result};
