//! Self-supervised slice-to-volume reconstruction.
//!
//! A slice network maps each slice's encoding to a rigid
//! pose plus an intensity scale σ and weight ω. The super-resolution network
//! maps normalized HR coordinates to one intensity per echo time (MC, MC_Reg)
//! or, in the SC variant, one network per echo predicts a single channel.
//! Slices are simulated through the PSF and compared to the measurements
//! with an ω-weighted L1 loss; MC_Reg adds `α·R_T2`, the mean squared
//! log-linear projection residual over HR coordinates.

mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::Grid;
use crate::neural::DEFAULT_OMEGA0;

pub use model::{
    data_loss, regularizer_batch, render_volume, simulate_slice_pixel, Evaluation, Gradients, ReconModel, Sample,
    SampleBatch, SliceCalibration, SliceInfo, SliceState,
};
pub use train::{train, EpochLoss, EstimatedSlice, ReconResult, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sc")]
    Sc,
    #[serde(rename = "mc")]
    Mc,
    #[serde(rename = "mc-reg")]
    McReg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sc, Variant::Mc, Variant::McReg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sc => "sc",
            Variant::Mc => "mc",
            Variant::McReg => "mc-reg",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Sc => "SC",
            Variant::Mc => "MC",
            Variant::McReg => "MC_Reg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sc" => Ok(Variant::Sc),
            "mc" => Ok(Variant::Mc),
            "mc-reg" | "mcreg" => Ok(Variant::McReg),
            other => config_err(format!("unknown variant `{other}` (expected sc, mc or mc-reg)")),
        }
    }
}

/// How a slice's `(stack, slice)` position is fed to the slice network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceEncoding {
    /// Raw integer indices.
    Index,
    /// Indices rescaled to [-1, 1].
    Unit,
    /// One input per slice, so the first layer holds a free embedding for
    /// every slice.
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub epochs: usize,
    /// Epochs at the start during which the slice network is frozen.
    pub warmup_epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over all pixels.
    pub steps_per_epoch: usize,
    /// Slice pixels per step, split evenly over echo times.
    pub batch_size: usize,
    /// Slices drawn per echo and step, each contributing an equal share of
    /// the pixels; 0 draws pixels uniformly over all slices.
    pub slices_per_step: usize,
    pub psf_samples: usize,
    /// HR coordinates per step for the decay regularizer.
    pub reg_batch: usize,
    pub lr_sr: f64,
    pub lr_slice: f64,
    /// ms
    pub tes: Vec<f64>,
    pub grid: Grid,
    pub seed: u64,
    pub sr_hidden: Vec<usize>,
    pub slice_hidden: Vec<usize>,
    pub omega0: f64,
    pub slice_omega0: f64,
    pub slice_encoding: SliceEncoding,
    /// Radians per unit of slice-network pose output.
    pub rotation_scale: f64,
    /// Millimetres per unit of slice-network pose output.
    pub translation_scale: f64,
}

impl ReconConfig {
    pub fn new(variant: Variant, tes: Vec<f64>, grid: Grid, seed: u64) -> Self {
        Self {
            variant,
            alpha: if variant == Variant::McReg { 0.5 } else { 0.0 },
            epochs: 50,
            warmup_epochs: 2,
            steps_per_epoch: 0,
            batch_size: 4096,
            slices_per_step: 0,
            psf_samples: 16,
            reg_batch: 4096,
            lr_sr: 1e-4,
            lr_slice: 1e-5,
            tes,
            grid,
            seed,
            sr_hidden: vec![128; 3],
            slice_hidden: vec![64; 2],
            omega0: DEFAULT_OMEGA0,
            slice_omega0: DEFAULT_OMEGA0,
            slice_encoding: SliceEncoding::Index,
            rotation_scale: 0.1,
            translation_scale: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return config_err("alpha must be a finite non-negative number");
        }
        if self.alpha != 0.0 && self.variant != Variant::McReg {
            return config_err(format!("alpha must be 0 for variant {}", self.variant));
        }
        if self.variant == Variant::McReg && self.tes.len() < 2 {
            return config_err("the decay regularizer needs at least two echo times");
        }
        if self.epochs == 0 {
            return config_err("epochs must be >= 1");
        }
        if self.psf_samples == 0 {
            return config_err("psf_samples must be >= 1");
        }
        if self.tes.is_empty() {
            return config_err("at least one echo time is required");
        }
        if self.batch_size < self.tes.len() {
            return config_err("batch_size must cover every echo time");
        }
        if self.variant == Variant::McReg && self.alpha > 0.0 && self.reg_batch == 0 {
            return config_err("reg_batch must be >= 1 when alpha > 0");
        }
        if !(self.lr_sr > 0.0 && self.lr_slice >= 0.0) {
            return config_err("learning rates must be positive");
        }
        if self.sr_hidden.is_empty() || self.slice_hidden.is_empty() {
            return config_err("networks need at least one hidden layer");
        }
        if !(self.rotation_scale > 0.0 && self.translation_scale > 0.0) {
            return config_err("pose output scales must be positive");
        }
        Ok(())
    }

    pub fn uses_regularizer(&self) -> bool {
        self.variant == Variant::McReg && self.alpha > 0.0
    }
}
