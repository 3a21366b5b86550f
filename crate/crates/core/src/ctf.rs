//! Radially symmetric contrast transfer function.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Microscope filter parameters. Lengths are in the same unit as the voxel
/// size (Angstrom by convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub defocus: f64,
    pub spherical_aberration: f64,
    pub amplitude_contrast: f64,
    pub wavelength: f64,
    /// When set the filter is 1 everywhere.
    pub identity: bool,
}

impl Default for CtfParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl CtfParams {
    pub fn identity() -> Self {
        Self {
            defocus: 0.0,
            spherical_aberration: 0.0,
            amplitude_contrast: 0.0,
            wavelength: 0.0,
            identity: true,
        }
    }

    /// 300 kV electrons, Cs = 2.7 mm, 10% amplitude contrast.
    pub fn typical(defocus: f64) -> Self {
        Self {
            defocus,
            spherical_aberration: 2.7e7,
            amplitude_contrast: 0.1,
            wavelength: 0.019_687,
            identity: false,
        }
    }

    /// Filter value at a radius given in frequency-index units of an
    /// `n`-pixel grid.
    pub fn value(&self, radius: f64, n: usize, voxel_size: f64) -> f64 {
        if self.identity {
            return 1.0;
        }
        let s = radius / (n as f64 * voxel_size);
        let s2 = s * s;
        let lambda = self.wavelength;
        let gamma = PI * lambda * self.defocus * s2
            - 0.5 * PI * self.spherical_aberration * lambda.powi(3) * s2 * s2;
        let a = self.amplitude_contrast;
        -((1.0 - a * a).sqrt() * gamma.sin() + a * gamma.cos())
    }
}
