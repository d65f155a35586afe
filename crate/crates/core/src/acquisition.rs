//! Forward simulation of motion-corrupted thick-slice stacks.
//!
//! A slice pixel integrates the ground-truth volume through an anisotropic
//! Gaussian PSF (Monte Carlo), sampled at the motion-displaced position
//! `T_ψ(p) + R_slice·u`, then gets a slice-wide dropout multiplier and
//! additive Gaussian noise (clamped at 0). Poses rotate about the centre of
//! the ground-truth grid.
//!
//! The dropout model (per-slice Bernoulli selecting a uniform attenuation) is
//! a simple stand-in: the published dropout simulation is not specified in
//! enough detail to reproduce.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{Grid, Interp, Mat3, RigidPose, Semantics, Vec3, Volume};
use crate::rng::{self, domain};

/// 2·√(2·ln 2): FWHM of a Gaussian in units of its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Columns are the in-plane row axis, in-plane column axis and slice
    /// normal in world coordinates.
    pub fn frame(self) -> Mat3 {
        let (u, v, n) = match self {
            Orientation::Axial => (Vec3::x(), Vec3::y(), Vec3::z()),
            Orientation::Coronal => (Vec3::x(), Vec3::z(), -Vec3::y()),
            Orientation::Sagittal => (Vec3::y(), Vec3::z(), Vec3::x()),
        };
        Mat3::from_columns(&[u, v, n])
    }

    pub fn index(self) -> usize {
        match self {
            Orientation::Axial => 0,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }
}

/// Gaussian PSF; covariance in mm², expressed in the slice frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfModel {
    pub covariance: Mat3,
    cholesky: Mat3,
}

impl PsfModel {
    pub fn new(covariance: Mat3) -> Result<Self> {
        if (covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1e-300) {
            return config_err("PSF covariance must be symmetric");
        }
        let chol = nalgebra::Cholesky::new(covariance)
            .ok_or_else(|| Error::Config("PSF covariance must be positive definite".into()))?;
        Ok(Self { covariance, cholesky: chol.l() })
    }

    pub fn std_devs(&self) -> [f64; 3] {
        [self.covariance[(0, 0)].sqrt(), self.covariance[(1, 1)].sqrt(), self.covariance[(2, 2)].sqrt()]
    }
}

/// In-plane FWHM is 1.2× the pixel spacing; through-plane FWHM equals the
/// slice thickness.
pub fn psf_covariance(in_plane: [f64; 2], thickness: f64) -> Result<PsfModel> {
    if in_plane.iter().chain(std::iter::once(&thickness)).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return config_err(format!("PSF needs positive spacing and thickness, got {in_plane:?}, {thickness}"));
    }
    let s = [1.2 * in_plane[0] / FWHM_PER_SIGMA, 1.2 * in_plane[1] / FWHM_PER_SIGMA, thickness / FWHM_PER_SIGMA];
    PsfModel::new(Mat3::from_diagonal(&Vec3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2])))
}

/// I.i.d. draws from `N(0, Σ)` in the slice frame.
pub fn sample_psf_offsets<R: Rng + ?Sized>(psf: &PsfModel, count: usize, rng: &mut R) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            psf.cholesky * z
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub min_run: usize,
    pub max_run: usize,
    /// Per-slice jitter around the run pose, as a fraction of the ranges.
    pub jitter: f64,
}

/// Uniform per-slice motion within `±max_rotation_deg` on each Euler angle
/// and `±max_translation_mm` on each axis. With `burst`, contiguous runs of
/// slices share a drawn pose plus small jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    #[serde(default)]
    pub burst: Option<BurstSpec>,
}

impl MotionSpec {
    pub const fn none() -> Self {
        Self { max_rotation_deg: 0.0, max_translation_mm: 0.0, burst: None }
    }

    pub const fn mild() -> Self {
        Self { max_rotation_deg: 3.0, max_translation_mm: 2.0, burst: None }
    }

    pub const fn moderate() -> Self {
        Self { max_rotation_deg: 5.0, max_translation_mm: 3.0, burst: None }
    }

    pub const fn severe() -> Self {
        Self { max_rotation_deg: 8.0, max_translation_mm: 5.0, burst: None }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> RigidPose {
        let r = self.max_rotation_deg.to_radians() * scale;
        let t = self.max_translation_mm * scale;
        let mut u = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        RigidPose::new([u(r), u(r), u(r)], [u(t), u(t), u(t)])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_translation_mm >= 0.0) {
            return config_err("motion ranges must be non-negative");
        }
        if let Some(b) = self.burst {
            if b.min_run == 0 || b.max_run < b.min_run || !(b.jitter >= 0.0) {
                return config_err("invalid burst settings");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub probability: f64,
    pub min_multiplier: f64,
    pub max_multiplier: f64,
}

impl DropoutSpec {
    pub const fn none() -> Self {
        Self { probability: 0.0, min_multiplier: 1.0, max_multiplier: 1.0 }
    }

    pub const fn default_stand_in() -> Self {
        Self { probability: 0.1, min_multiplier: 0.0, max_multiplier: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probability)
            && (0.0..=1.0).contains(&self.min_multiplier)
            && (0.0..=1.0).contains(&self.max_multiplier)
            && self.min_multiplier <= self.max_multiplier;
        if !ok {
            return config_err("dropout probability and multipliers must lie in [0, 1] with min <= max");
        }
        Ok(())
    }
}

/// Placement of a stack of parallel slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackGeometry {
    pub orientation: Orientation,
    /// mm
    pub in_plane_spacing: [f64; 2],
    /// mm
    pub thickness: f64,
    /// mm
    pub gap: f64,
    /// pixels per slice along the two in-plane axes
    pub dims: [usize; 2],
    pub num_slices: usize,
    /// World position of the stack centre.
    pub center: [f64; 3],
}

impl StackGeometry {
    /// Slices covering the full extent of `grid` (axis-aligned grids).
    pub fn covering(grid: &Grid, orientation: Orientation, in_plane: [f64; 2], thickness: f64, gap: f64) -> Result<Self> {
        if in_plane.iter().any(|&v| !(v > 0.0)) || !(thickness > 0.0) || !(gap >= 0.0) {
            return config_err("stack spacing and thickness must be positive, gap non-negative");
        }
        let frame = orientation.frame();
        let ext = grid.extent();
        let along = |axis: Vec3| -> f64 {
            let w = grid.orientation.transpose() * axis;
            (0..3).map(|a| (w[a] * ext[a]).abs()).sum()
        };
        let nu = (along(frame.column(0).into()) / in_plane[0] - 1e-9).ceil().max(1.0) as usize;
        let nv = (along(frame.column(1).into()) / in_plane[1] - 1e-9).ceil().max(1.0) as usize;
        let ns = (along(frame.column(2).into()) / (thickness + gap) - 1e-9).ceil().max(1.0) as usize;
        let c = grid.center();
        Ok(Self {
            orientation,
            in_plane_spacing: in_plane,
            thickness,
            gap,
            dims: [nu, nv],
            num_slices: ns,
            center: [c.x, c.y, c.z],
        })
    }

    pub fn frame(&self) -> Mat3 {
        self.orientation.frame()
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice_step(&self) -> f64 {
        self.thickness + self.gap
    }

    /// Slice-frame coordinates (mm) of pixel `(i, j)` of slice `s`.
    pub fn local(&self, s: usize, i: usize, j: usize) -> Vec3 {
        Vec3::new(
            (i as f64 - (self.dims[0] as f64 - 1.0) / 2.0) * self.in_plane_spacing[0],
            (j as f64 - (self.dims[1] as f64 - 1.0) / 2.0) * self.in_plane_spacing[1],
            (s as f64 - (self.num_slices as f64 - 1.0) / 2.0) * self.slice_step(),
        )
    }

    pub fn pixel_world(&self, s: usize, i: usize, j: usize) -> Vec3 {
        Vec3::from(self.center) + self.frame() * self.local(s, i, j)
    }

    /// Pixel `p` in row-major (`i` fastest) order.
    pub fn pixel_world_flat(&self, s: usize, p: usize) -> Vec3 {
        self.pixel_world(s, p % self.dims[0], p / self.dims[0])
    }

    pub fn psf(&self) -> Result<PsfModel> {
        psf_covariance(self.in_plane_spacing, self.thickness)
    }

    /// Grid whose voxel `(i, j, s)` sits at pixel `(i, j)` of slice `s`.
    pub fn as_grid(&self) -> Result<Grid> {
        let frame = self.frame();
        let origin = self.pixel_world(0, 0, 0);
        Grid::new(
            [self.dims[0], self.dims[1], self.num_slices],
            [self.in_plane_spacing[0], self.in_plane_spacing[1], self.slice_step()],
            [origin.x, origin.y, origin.z],
            frame,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    /// Row-major, `i` fastest.
    pub pixels: Vec<f64>,
    pub index_in_stack: usize,
    pub stack_index: usize,
    /// Simulation ground truth; never read by the reconstruction.
    pub true_pose: RigidPose,
    /// Slice-wide intensity multiplier in [0, 1].
    pub dropout: f64,
    /// The slab missed the volume entirely.
    pub empty: bool,
}

impl Slice {
    /// Per-pixel view of the dropout multiplier.
    pub fn dropout_mask(&self) -> Vec<f64> {
        vec![self.dropout; self.pixels.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    /// ms
    pub te: f64,
    pub stack_index: usize,
    pub geometry: StackGeometry,
    pub slices: Vec<Slice>,
}

impl SliceStack {
    /// Pack the slices into a volume whose z-planes are the slices.
    pub fn to_volume(&self) -> Result<Volume> {
        let grid = self.geometry.as_grid()?;
        let data = self.slices.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        Volume::new(grid, data, Semantics::Intensity)
    }

    /// Rebuild a stack from its packed volume; poses and dropout are unknown.
    pub fn from_volume(vol: &Volume, te: f64, stack_index: usize, geometry: StackGeometry, empty: &[bool]) -> Result<Self> {
        let per = geometry.pixels_per_slice();
        if vol.data.len() != per * geometry.num_slices {
            return Err(Error::Data("stack volume does not match its geometry".into()));
        }
        let slices = vol
            .data
            .chunks(per)
            .enumerate()
            .map(|(s, px)| Slice {
                pixels: px.to_vec(),
                index_in_stack: s,
                stack_index,
                true_pose: RigidPose::identity(),
                dropout: 1.0,
                empty: empty.get(s).copied().unwrap_or(false),
            })
            .collect();
        Ok(Self { te, stack_index, geometry, slices })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// mm
    pub in_plane: [f64; 2],
    /// mm
    pub thickness: f64,
    /// mm
    pub gap: f64,
    pub motion: MotionSpec,
    pub dropout: DropoutSpec,
    /// Standard deviation of additive noise, signal units.
    pub noise_sigma: f64,
    pub psf_samples: usize,
    pub seed: u64,
}

impl AcquisitionConfig {
    /// 2×2×6 mm slices, moderate motion, stand-in dropout, σ = 1.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            in_plane: [2.0, 2.0],
            thickness: 6.0,
            gap: 0.0,
            motion: MotionSpec::moderate(),
            dropout: DropoutSpec::default_stand_in(),
            noise_sigma: 1.0,
            psf_samples: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.dropout.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return config_err("noise_sigma must be non-negative");
        }
        if self.psf_samples == 0 {
            return config_err("psf_samples must be >= 1");
        }
        psf_covariance(self.in_plane, self.thickness)?;
        if !(self.gap >= 0.0) {
            return config_err("slice gap must be non-negative");
        }
        Ok(())
    }
}

fn stack_poses(motion: &MotionSpec, seed: u64, stack_index: usize, num_slices: usize) -> Vec<Option<RigidPose>> {
    let Some(burst) = motion.burst else {
        return vec![None; num_slices];
    };
    let mut rng = rng::stream(seed, domain::ACQ_BURST, stack_index as u64, 0);
    let mut poses = Vec::with_capacity(num_slices);
    while poses.len() < num_slices {
        let run = rng.gen_range(burst.min_run..=burst.max_run);
        let base = motion.draw(&mut rng, 1.0);
        for _ in 0..run.min(num_slices - poses.len()) {
            let j = motion.draw(&mut rng, burst.jitter);
            poses.push(Some(RigidPose::new(
                [base.euler[0] + j.euler[0], base.euler[1] + j.euler[1], base.euler[2] + j.euler[2]],
                [
                    base.translation[0] + j.translation[0],
                    base.translation[1] + j.translation[1],
                    base.translation[2] + j.translation[2],
                ],
            )));
        }
    }
    poses
}

/// Simulate one stack from the ground-truth volume of echo `te`.
pub fn simulate_stack_with_psf(
    gt: &Volume,
    te: f64,
    orientation: Orientation,
    stack_index: usize,
    cfg: &AcquisitionConfig,
    psf: &PsfModel,
) -> Result<SliceStack> {
    cfg.validate()?;
    let geometry = StackGeometry::covering(&gt.grid, orientation, cfg.in_plane, cfg.thickness, cfg.gap)?;
    let frame = geometry.frame();
    let center = gt.grid.center();
    let preset = stack_poses(&cfg.motion, cfg.seed, stack_index, geometry.num_slices);
    let noise = if cfg.noise_sigma > 0.0 { Some(Normal::new(0.0, cfg.noise_sigma).expect("valid sigma")) } else { None };
    let k = cfg.psf_samples;

    let slices = (0..geometry.num_slices)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(cfg.seed, domain::ACQ_SLICE, stack_index as u64, s as u64);
            let drawn = cfg.motion.draw(&mut rng, 1.0);
            let pose = preset[s].unwrap_or(drawn);
            let dropped = cfg.dropout.probability > 0.0 && rng.gen_bool(cfg.dropout.probability);
            let dropout = if dropped {
                if cfg.dropout.max_multiplier > cfg.dropout.min_multiplier {
                    rng.gen_range(cfg.dropout.min_multiplier..=cfg.dropout.max_multiplier)
                } else {
                    cfg.dropout.min_multiplier
                }
            } else {
                1.0
            };
            let mut inside = false;
            let mut pixels = Vec::with_capacity(geometry.pixels_per_slice());
            for p in 0..geometry.pixels_per_slice() {
                let world = pose.apply_about(geometry.pixel_world_flat(s, p), center);
                let mut acc = 0.0;
                for off in sample_psf_offsets(psf, k, &mut rng) {
                    let q = world + frame * off;
                    if !inside {
                        let v = gt.grid.voxel_from_world(q);
                        inside = (0..3).all(|a| v[a] >= 0.0 && v[a] <= gt.grid.dims[a] as f64 - 1.0);
                    }
                    acc += gt.sample_world(q, Interp::Trilinear);
                }
                let mut value = dropout * acc / k as f64;
                if let Some(n) = &noise {
                    value += n.sample(&mut rng);
                }
                pixels.push(value.max(0.0));
            }
            Slice { pixels, index_in_stack: s, stack_index, true_pose: pose, dropout, empty: !inside }
        })
        .collect();
    Ok(SliceStack { te, stack_index, geometry, slices })
}

pub fn simulate_stack(
    gt: &Volume,
    te: f64,
    orientation: Orientation,
    stack_index: usize,
    cfg: &AcquisitionConfig,
) -> Result<SliceStack> {
    let psf = psf_covariance(cfg.in_plane, cfg.thickness)?;
    simulate_stack_with_psf(gt, te, orientation, stack_index, cfg, &psf)
}

/// Which `(echo index, orientation)` pairs are acquired.
///
/// Three stacks per echo use every orientation; two drop orientation
/// `i mod 3` for echo `i`; one keeps only orientation `i mod 3`.
pub fn study_layout(num_tes: usize, stacks_per_te: usize) -> Result<Vec<(usize, Orientation)>> {
    if !(1..=3).contains(&stacks_per_te) {
        return config_err(format!("stacks_per_te must be 1, 2 or 3, got {stacks_per_te}"));
    }
    let mut layout = Vec::new();
    for te in 0..num_tes {
        for (o, orient) in Orientation::ALL.iter().enumerate() {
            let keep = match stacks_per_te {
                3 => true,
                2 => o != te % 3,
                _ => o == te % 3,
            };
            if keep {
                layout.push((te, *orient));
            }
        }
    }
    Ok(layout)
}

/// Stack index of `(echo, orientation)`. It keys the stack's random
/// streams, so a sparser study acquires exactly a subset of the stacks of a
/// denser one.
pub fn stack_index(te: usize, orientation: Orientation) -> usize {
    3 * te + orientation.index()
}

/// Simulate every stack of a study, in [`study_layout`] order.
pub fn simulate_study(gt_volumes: &[Volume], tes: &[f64], stacks_per_te: usize, cfg: &AcquisitionConfig) -> Result<Vec<SliceStack>> {
    if gt_volumes.len() != tes.len() {
        return Err(Error::Data("one ground-truth volume per echo time is required".into()));
    }
    study_layout(tes.len(), stacks_per_te)?
        .into_iter()
        .map(|(te, orient)| simulate_stack(&gt_volumes[te], tes[te], orient, stack_index(te, orient), cfg))
        .collect()
}
