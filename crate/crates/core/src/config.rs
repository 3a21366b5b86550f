//! Run configuration: optimizer settings with their defaults, synthetic data
//! settings, and the TOML run file read by the binary.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::projection::{InterpolationKind, InterpolationScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub objective: ObjectiveKind,
    pub rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial lowpass cutoff in radians.
    pub initial_cutoff: f64,
    /// Epochs between cutoff doublings.
    pub cutoff_period: usize,
    pub mean_refresh_period: usize,
    /// Epochs between regularizer rebuilds; stage boundaries always rebuild.
    pub reg_refresh_period: usize,
    pub offset_refresh_period: usize,
    pub newton_iterations: usize,
    pub pose_opt: bool,
    pub rotation_lr: f64,
    pub interp: InterpolationKind,
    pub oversample: usize,
    /// Factors kept from the shell regularizer matrix.
    pub reg_rank: usize,
    /// Preconditioned conjugate-gradient iterations in mean refreshes.
    pub mean_cg_iterations: usize,
    /// RMS of the initial component entries relative to the mean's.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Ml,
            rank: 10,
            epochs: 160,
            batch_size: 1024,
            learning_rate: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            initial_cutoff: PI / 4.0,
            cutoff_period: 40,
            mean_refresh_period: 5,
            reg_refresh_period: 5,
            offset_refresh_period: 5,
            newton_iterations: 10,
            pose_opt: false,
            rotation_lr: 1e-3,
            interp: InterpolationKind::Trilinear,
            oversample: 2,
            reg_rank: crate::regularization::DEFAULT_RANK,
            mean_cg_iterations: 10,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn scheme(&self) -> InterpolationScheme {
        match self.interp {
            InterpolationKind::Nearest => InterpolationScheme { kind: InterpolationKind::Nearest, oversampling: self.oversample },
            InterpolationKind::Trilinear => InterpolationScheme::trilinear(self.oversample),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.rotation_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam parameters out of range");
        }
        if !(self.initial_cutoff > 0.0) || self.cutoff_period == 0 {
            return bad("frequency marching needs a positive cutoff and period");
        }
        if self.mean_refresh_period == 0 || self.offset_refresh_period == 0 || self.reg_refresh_period == 0 {
            return bad("refresh periods must be at least 1");
        }
        if self.oversample == 0 {
            return bad("oversample must be at least 1");
        }
        if self.reg_rank == 0 {
            return bad("reg_rank must be at least 1");
        }
        if self.pose_opt && self.objective == ObjectiveKind::Ls {
            return bad("pose refinement requires the ml objective");
        }
        if self.pose_opt && self.interp == InterpolationKind::Nearest {
            return bad("pose refinement requires trilinear interpolation");
        }
        Ok(())
    }

    /// Lowpass cutoff in effect during `epoch` (0-based), capped at pi.
    pub fn cutoff_at(&self, epoch: usize) -> f64 {
        let doublings = (epoch / self.cutoff_period).min(64) as i32;
        (self.initial_cutoff * 2f64.powi(doublings)).min(PI)
    }

    /// Distinct cutoffs visited over the configured epochs.
    pub fn cutoff_schedule(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for e in 0..self.epochs {
            let c = self.cutoff_at(e);
            if out.last() != Some(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Parse a `key = value` document. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Synthetic dataset settings used by `lrh simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub images: usize,
    /// Grid side `N`.
    pub grid: usize,
    /// Number of true components.
    pub rank: usize,
    pub snr: f64,
    /// Latent standard deviation of the first component relative to the
    /// mean's norm; later components decay by 0.7 each.
    pub heterogeneity: f64,
    /// Draw one of `rank` discrete states per image instead of Gaussian
    /// latents, displaced by `heterogeneity` times the mean's norm.
    pub discrete: bool,
    /// Offsets uniform in `[-max_offset, max_offset]^2` pixels.
    pub max_offset: f64,
    /// Contrast drawn from `N(1, contrast_std^2)`; 0 keeps it at 1.
    pub contrast_std: f64,
    /// Defocus range in Angstrom; absent means no CTF.
    pub defocus: Option<[f64; 2]>,
    /// Mean rotation error (degrees) of the poses stored with the stack.
    pub rotation_error_deg: f64,
    /// Offset error bound (pixels) of the poses stored with the stack.
    pub offset_error_px: f64,
    pub seed: u64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            images: 2000,
            grid: 16,
            rank: 2,
            snr: 1.0,
            heterogeneity: 0.3,
            discrete: false,
            max_offset: 0.0,
            contrast_std: 0.0,
            defocus: None,
            rotation_error_deg: 0.0,
            offset_error_px: 0.0,
            seed: 0,
        }
    }
}

impl SimulateSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid < 4 {
            return bad("grid must be at least 4");
        }
        if self.rank == 0 || self.rank > 4 {
            return bad("simulated rank must be between 1 and 4");
        }
        if !(self.snr > 0.0) {
            return bad("snr must be positive");
        }
        if !(self.heterogeneity >= 0.0) || !(self.max_offset >= 0.0) || !(self.contrast_std >= 0.0) {
            return bad("heterogeneity, max_offset and contrast_std must be nonnegative");
        }
        if !(self.rotation_error_deg >= 0.0) || !(self.offset_error_px >= 0.0) {
            return bad("pose perturbations must be nonnegative");
        }
        if let Some([lo, hi]) = self.defocus {
            if !(lo > 0.0 && hi >= lo) {
                return bad("defocus range must be positive and ordered");
            }
        }
        Ok(())
    }
}

/// Contents of a `--config` file: optional `[simulate]` and `[estimate]`
/// tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: SimulateSettings,
    pub estimate: OptimConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}
