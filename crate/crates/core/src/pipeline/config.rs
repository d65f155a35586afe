use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, BurstSpec, DropoutSpec, MotionSpec};
use crate::error::{config_err, Error, Result};
use crate::geometry::Grid;
use crate::phantom::{default_shells, BiasField, PhantomSpec, Tissue, TissueSpec};
use crate::recon::{ReconConfig, SliceEncoding, Variant};

pub const TISSUE_KEYS: [(&str, Tissue); 4] =
    [("wm", Tissue::Wm), ("gm", Tissue::Gm), ("dgm", Tissue::Dgm), ("csf", Tissue::Csf)];

/// Whole-pipeline configuration, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub phantom: PhantomSection,
    pub acquisition: AcquisitionSection,
    pub reconstruction: ReconSection,
    pub fit: FitSection,
    pub ablation: Option<AblationSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// ms
    pub tes: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, tes: vec![220.0, 500.0, 690.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueEntry {
    /// ms
    pub t2: f64,
    pub m0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub grid_size: usize,
    /// mm
    pub spacing: f64,
    pub jitter: f64,
    /// All four of `wm`, `gm`, `dgm`, `csf` when given.
    pub tissues: Option<BTreeMap<String, TissueEntry>>,
    pub bias_field: Option<BiasField>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { grid_size: 64, spacing: 2.0, jitter: 0.02, tissues: None, bias_field: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionLevel {
    None,
    Mild,
    Moderate,
    Severe,
}

impl MotionLevel {
    pub fn spec(self) -> MotionSpec {
        match self {
            MotionLevel::None => MotionSpec::none(),
            MotionLevel::Mild => MotionSpec::mild(),
            MotionLevel::Moderate => MotionSpec::moderate(),
            MotionLevel::Severe => MotionSpec::severe(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    pub stacks_per_te: usize,
    /// mm
    pub in_plane: [f64; 2],
    /// mm
    pub thickness: f64,
    /// mm
    pub gap: f64,
    pub motion: MotionLevel,
    /// Overrides the level's rotation range.
    pub max_rotation_deg: Option<f64>,
    /// Overrides the level's translation range.
    pub max_translation_mm: Option<f64>,
    pub burst: Option<BurstSpec>,
    pub dropout_probability: f64,
    pub dropout_min: f64,
    pub dropout_max: f64,
    pub noise_sigma: f64,
    pub psf_samples: usize,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        let d = AcquisitionConfig::desk_default(0);
        Self {
            stacks_per_te: 3,
            in_plane: d.in_plane,
            thickness: d.thickness,
            gap: d.gap,
            motion: MotionLevel::Moderate,
            max_rotation_deg: None,
            max_translation_mm: None,
            burst: None,
            dropout_probability: d.dropout.probability,
            dropout_min: d.dropout.min_multiplier,
            dropout_max: d.dropout.max_multiplier,
            noise_sigma: d.noise_sigma,
            psf_samples: d.psf_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub variant: Variant,
    /// Defaults to every acquired stack.
    pub stacks_per_te: Option<usize>,
    /// Defaults to 0.5 for MC_Reg (10 at one stack per echo), 0 otherwise.
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub slices_per_step: usize,
    pub psf_samples: usize,
    pub reg_batch: usize,
    pub lr_sr: f64,
    pub lr_slice: f64,
    pub sr_hidden: Vec<usize>,
    pub slice_hidden: Vec<usize>,
    pub omega0: f64,
    pub slice_omega0: f64,
    pub slice_encoding: SliceEncoding,
    pub rotation_scale: f64,
    pub translation_scale: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            variant: Variant::McReg,
            stacks_per_te: None,
            alpha: None,
            epochs: 40,
            warmup_epochs: 2,
            steps_per_epoch: 100,
            batch_size: 512,
            slices_per_step: 4,
            psf_samples: 4,
            reg_batch: 512,
            lr_sr: 1e-4,
            lr_slice: 3e-5,
            sr_hidden: vec![64; 3],
            slice_hidden: vec![256],
            omega0: 15.0,
            slice_omega0: 30.0,
            slice_encoding: SliceEncoding::OneHot,
            rotation_scale: 0.1,
            translation_scale: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Intensities below this are treated as signal-free.
    pub floor: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self { floor: 1e-6 }
    }
}

/// Cross-product for the `custom` ablation preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
    pub stacks_per_te: Vec<usize>,
    pub seeds: Vec<u64>,
    pub motion: Option<MotionLevel>,
}

/// Command-line overrides for the reconstruction stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconOverrides {
    pub variant: Option<Variant>,
    pub stacks_per_te: Option<usize>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &ReconOverrides) -> Result<()> {
        let r = &mut self.reconstruction;
        if let Some(v) = o.variant {
            r.variant = v;
        }
        if let Some(s) = o.stacks_per_te {
            r.stacks_per_te = Some(s);
        }
        if let Some(a) = o.alpha {
            r.alpha = Some(a);
        }
        if let Some(e) = o.epochs {
            r.epochs = e;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let tes = &self.run.tes;
        if tes.is_empty() || tes.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return config_err("run.tes must be a non-empty list of positive echo times");
        }
        for i in 0..tes.len() {
            for j in 0..i {
                if tes[i] == tes[j] {
                    return config_err(format!("run.tes contains {} twice", tes[i]));
                }
            }
        }
        if let Some(map) = &self.phantom.tissues {
            for (key, _) in TISSUE_KEYS {
                if !map.contains_key(key) {
                    return config_err(format!("missing key `phantom.tissues.{key}`"));
                }
            }
            if let Some(extra) = map.keys().find(|k| !TISSUE_KEYS.iter().any(|(n, _)| n == k)) {
                return config_err(format!("unknown key `phantom.tissues.{extra}`"));
            }
        }
        self.phantom_spec()?.validate()?;
        if !(1..=3).contains(&self.acquisition.stacks_per_te) {
            return config_err("acquisition.stacks_per_te must be 1, 2 or 3");
        }
        self.acquisition_config()?.validate()?;
        let spt = self.recon_stacks_per_te();
        if !(1..=3).contains(&spt) {
            return config_err("reconstruction.stacks_per_te must be 1, 2 or 3");
        }
        if spt > self.acquisition.stacks_per_te {
            return config_err(format!(
                "reconstruction.stacks_per_te = {spt} exceeds the {} acquired stacks per echo",
                self.acquisition.stacks_per_te
            ));
        }
        if self.acquisition.stacks_per_te == 2 && spt == 1 {
            return config_err("one stack per echo needs an acquisition with 1 or 3 stacks per echo");
        }
        self.recon_config()?.validate()?;
        if !(self.fit.floor > 0.0) {
            return config_err("fit.floor must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::centered_cube(self.phantom.grid_size, self.phantom.spacing)
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let mut spec = PhantomSpec::desk_default(self.run.seed);
        spec.grid = self.grid()?;
        spec.jitter = self.phantom.jitter;
        spec.bias_field = self.phantom.bias_field;
        spec.shells = default_shells();
        if let Some(map) = &self.phantom.tissues {
            spec.tissues = TISSUE_KEYS
                .iter()
                .filter_map(|(k, label)| map.get(*k).map(|e| TissueSpec { label: *label, t2: e.t2, m0: e.m0 }))
                .collect();
        }
        Ok(spec)
    }

    pub fn acquisition_config(&self) -> Result<AcquisitionConfig> {
        let a = &self.acquisition;
        let mut motion = a.motion.spec();
        if let Some(r) = a.max_rotation_deg {
            motion.max_rotation_deg = r;
        }
        if let Some(t) = a.max_translation_mm {
            motion.max_translation_mm = t;
        }
        motion.burst = a.burst;
        Ok(AcquisitionConfig {
            in_plane: a.in_plane,
            thickness: a.thickness,
            gap: a.gap,
            motion,
            dropout: DropoutSpec {
                probability: a.dropout_probability,
                min_multiplier: a.dropout_min,
                max_multiplier: a.dropout_max,
            },
            noise_sigma: a.noise_sigma,
            psf_samples: a.psf_samples,
            seed: self.run.seed,
        })
    }

    pub fn recon_stacks_per_te(&self) -> usize {
        self.reconstruction.stacks_per_te.unwrap_or(self.acquisition.stacks_per_te)
    }

    pub fn recon_alpha(&self) -> f64 {
        let r = &self.reconstruction;
        match (r.alpha, r.variant) {
            (Some(a), _) => a,
            (None, Variant::McReg) if self.recon_stacks_per_te() == 1 => 10.0,
            (None, Variant::McReg) => 0.5,
            (None, _) => 0.0,
        }
    }

    pub fn recon_config(&self) -> Result<ReconConfig> {
        let r = &self.reconstruction;
        let mut c = ReconConfig::new(r.variant, self.run.tes.clone(), self.grid()?, self.run.seed);
        c.alpha = self.recon_alpha();
        c.epochs = r.epochs;
        c.warmup_epochs = r.warmup_epochs;
        c.steps_per_epoch = r.steps_per_epoch;
        c.batch_size = r.batch_size;
        c.slices_per_step = r.slices_per_step;
        c.psf_samples = r.psf_samples;
        c.reg_batch = r.reg_batch;
        c.lr_sr = r.lr_sr;
        c.lr_slice = r.lr_slice;
        c.sr_hidden = r.sr_hidden.clone();
        c.slice_hidden = r.slice_hidden.clone();
        c.omega0 = r.omega0;
        c.slice_omega0 = r.slice_omega0;
        c.slice_encoding = r.slice_encoding;
        c.rotation_scale = r.rotation_scale;
        c.translation_scale = r.translation_scale;
        Ok(c)
    }

    /// Directory name of the reconstruction run this config describes.
    pub fn recon_name(&self) -> String {
        format!("{}_spt{}", self.reconstruction.variant.name(), self.recon_stacks_per_te())
    }
}
