//! Nested-ellipsoid brain phantom and the monoexponential signal model.
//!
//! The phantom is a stack of tissue shells listed outermost first; a voxel
//! takes the label of the innermost shell that contains its centre. Deep gray
//! matter is a mirrored pair of blobs inside the white matter, so the centre
//! of the head is white matter. Shell radii can be modulated by one seeded
//! folding pattern shared by all shells, which gives cortex-like gyri and
//! breaks the rotational symmetry of plain ellipsoids.
//!
//! Default T2 values: WM 339 ms and DGM 246 ms follow reported mid-field
//! fetal values; GM 280 ms and CSF 1200 ms are synthetic choices.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{Grid, Semantics, Vec3, Volume};
use crate::rng::{self, domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Background,
    Wm,
    Gm,
    Dgm,
    Csf,
}

impl Tissue {
    pub const BRAIN: [Tissue; 4] = [Tissue::Wm, Tissue::Gm, Tissue::Dgm, Tissue::Csf];

    pub fn code(self) -> u8 {
        match self {
            Tissue::Background => 0,
            Tissue::Wm => 1,
            Tissue::Gm => 2,
            Tissue::Dgm => 3,
            Tissue::Csf => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Tissue::Background,
            1 => Tissue::Wm,
            2 => Tissue::Gm,
            3 => Tissue::Dgm,
            4 => Tissue::Csf,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Wm => "wm",
            Tissue::Gm => "gm",
            Tissue::Dgm => "dgm",
            Tissue::Csf => "csf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    pub label: Tissue,
    /// ms
    pub t2: f64,
    pub m0: f64,
}

/// One ellipsoidal shell. `mirror_x` duplicates it at `(-offset.x, offset.y,
/// offset.z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellShape {
    pub tissue: Tissue,
    /// mm
    pub semi_axes: [f64; 3],
    /// mm, relative to the grid centre
    pub offset: [f64; 3],
    pub mirror_x: bool,
    /// Relative radial amplitude of the folding pattern.
    #[serde(default)]
    pub fold: f64,
}

const FOLD_MODES: usize = 8;

/// Sum of plane waves over the unit sphere, scaled to roughly unit peak and
/// clamped to [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPattern {
    /// direction, spatial frequency, phase
    modes: Vec<(Vec3, f64, f64)>,
}

impl FoldPattern {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = rng::stream(seed, domain::PHANTOM, 1, 0);
        let modes = (0..FOLD_MODES)
            .map(|_| {
                let dir = loop {
                    let v = Vec3::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                (dir, rng.gen_range(4.0..8.0), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { modes }
    }

    pub fn value(&self, dir: Vec3) -> f64 {
        let sum: f64 = self.modes.iter().map(|(u, f, ph)| (std::f64::consts::PI * f * u.dot(&dir) + ph).sin()).sum();
        (sum / (2.0 * (self.modes.len() as f64 / 2.0).sqrt())).clamp(-1.0, 1.0)
    }
}

impl ShellShape {
    fn is_disabled(&self) -> bool {
        self.semi_axes.iter().all(|&a| a == 0.0)
    }

    fn centers(&self) -> Vec<Vec3> {
        let c = Vec3::from(self.offset);
        if self.mirror_x {
            vec![c, Vec3::new(-c.x, c.y, c.z)]
        } else {
            vec![c]
        }
    }

    fn radius_factor(&self, folds: &FoldPattern, unit: Vec3) -> f64 {
        if self.fold == 0.0 {
            1.0
        } else {
            1.0 + self.fold * folds.value(unit)
        }
    }

    fn contains(&self, folds: &FoldPattern, rel: Vec3) -> bool {
        self.centers().iter().any(|c| {
            let d = rel - c;
            let q = Vec3::new(d.x / self.semi_axes[0], d.y / self.semi_axes[1], d.z / self.semi_axes[2]);
            let r = q.norm();
            if r == 0.0 {
                return true;
            }
            r <= self.radius_factor(folds, q / r)
        })
    }
}

/// Smooth multiplicative M0 bias: `1 + Σ c·(normalized coordinate)` plus a
/// quadratic radial term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub linear: [f64; 3],
    pub quadratic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub grid: Grid,
    pub tissues: Vec<TissueSpec>,
    pub seed: u64,
    /// Outermost first.
    pub shells: Vec<ShellShape>,
    /// Relative seeded perturbation of every semi-axis.
    pub jitter: f64,
    pub bias_field: Option<BiasField>,
}

pub fn default_tissues() -> Vec<TissueSpec> {
    vec![
        TissueSpec { label: Tissue::Wm, t2: 339.0, m0: 100.0 },
        TissueSpec { label: Tissue::Gm, t2: 280.0, m0: 100.0 },
        TissueSpec { label: Tissue::Dgm, t2: 246.0, m0: 100.0 },
        TissueSpec { label: Tissue::Csf, t2: 1200.0, m0: 100.0 },
    ]
}

pub fn default_shells() -> Vec<ShellShape> {
    vec![
        ShellShape { tissue: Tissue::Csf, semi_axes: [58.0, 50.0, 52.0], offset: [0.0; 3], mirror_x: false, fold: 0.04 },
        ShellShape { tissue: Tissue::Gm, semi_axes: [53.0, 45.0, 47.0], offset: [0.0; 3], mirror_x: false, fold: 0.07 },
        ShellShape { tissue: Tissue::Wm, semi_axes: [47.0, 39.0, 41.0], offset: [0.0; 3], mirror_x: false, fold: 0.07 },
        ShellShape { tissue: Tissue::Dgm, semi_axes: [19.0, 28.0, 26.0], offset: [22.0, 0.0, 0.0], mirror_x: true, fold: 0.0 },
    ]
}

impl PhantomSpec {
    /// 64³ grid at 2 mm with the default tissues and shells.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            grid: Grid::centered_cube(64, 2.0).expect("valid default grid"),
            tissues: default_tissues(),
            seed,
            shells: default_shells(),
            jitter: 0.02,
            bias_field: None,
        }
    }

    pub fn tissue(&self, label: Tissue) -> Option<&TissueSpec> {
        self.tissues.iter().find(|t| t.label == label)
    }

    /// Shells after seeded jitter, disabled shells removed.
    pub fn realized_shells(&self) -> Vec<ShellShape> {
        let mut rng = rng::stream(self.seed, domain::PHANTOM, 0, 0);
        self.shells
            .iter()
            .filter(|s| !s.is_disabled())
            .map(|s| {
                let mut s = *s;
                for a in &mut s.semi_axes {
                    let f: f64 = if self.jitter > 0.0 { rng.gen_range(-self.jitter..=self.jitter) } else { 0.0 };
                    *a *= 1.0 + f;
                }
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tissues.iter().enumerate() {
            if self.tissues[..i].iter().any(|o| o.label == t.label) {
                return config_err(format!("duplicate tissue label {}", t.label.name()));
            }
            if t.label == Tissue::Background {
                if t.m0 != 0.0 {
                    return config_err("background tissue must have m0 = 0");
                }
                continue;
            }
            if !(t.t2 > 0.0) || !t.t2.is_finite() {
                return config_err(format!("tissue {} needs t2 > 0", t.label.name()));
            }
            if !(t.m0 >= 0.0) || !t.m0.is_finite() {
                return config_err(format!("tissue {} needs m0 >= 0", t.label.name()));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return config_err("phantom jitter must be in [0, 0.5)");
        }
        for (i, s) in self.shells.iter().enumerate() {
            if s.is_disabled() {
                continue;
            }
            if s.semi_axes.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
                return config_err(format!("degenerate shell {} ({}): semi-axes {:?}", i, s.tissue.name(), s.semi_axes));
            }
            if s.tissue == Tissue::Background {
                return config_err("background cannot be a shell");
            }
            if self.shells[..i].iter().any(|o| o.tissue == s.tissue && !o.is_disabled()) {
                return config_err(format!("tissue {} has more than one shell", s.tissue.name()));
            }
            if self.tissue(s.tissue).is_none() {
                return config_err(format!("shell references tissue {} with no spec", s.tissue.name()));
            }
        }
        if self.shells.iter().any(|s| !(0.0..0.5).contains(&s.fold)) {
            return config_err("shell fold amplitude must be in [0, 0.5)");
        }
        let shells = self.realized_shells();
        let folds = FoldPattern::seeded(self.seed);
        for pair in shells.windows(2) {
            if !shell_inside(&folds, &pair[1], &pair[0]) {
                return config_err(format!(
                    "shell {} is not strictly inside shell {}",
                    pair[1].tissue.name(),
                    pair[0].tissue.name()
                ));
            }
        }
        Ok(())
    }
}

/// Check by dense surface sampling that `inner` lies strictly inside `outer`.
fn shell_inside(folds: &FoldPattern, inner: &ShellShape, outer: &ShellShape) -> bool {
    let n = 48;
    for c in inner.centers() {
        for a in 0..n {
            let theta = std::f64::consts::PI * (a as f64 + 0.5) / n as f64;
            for b in 0..2 * n {
                let phi = std::f64::consts::PI * b as f64 / n as f64;
                let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                let p = c + Vec3::new(
                    dir.x * inner.semi_axes[0],
                    dir.y * inner.semi_axes[1],
                    dir.z * inner.semi_axes[2],
                ) * inner.radius_factor(folds, dir);
                let shrunk = ShellShape {
                    semi_axes: outer.semi_axes.map(|x| x * (1.0 - 1e-9)),
                    ..*outer
                };
                if !shrunk.contains(folds, p) {
                    return false;
                }
            }
        }
    }
    true
}

/// Label every voxel by the innermost containing shell.
pub fn build_label_map(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let shells = spec.realized_shells();
    let folds = FoldPattern::seeded(spec.seed);
    let center = spec.grid.center();
    let grid = &spec.grid;
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.ijk(idx);
            let rel = grid.world_from_voxel(Vec3::new(i as f64, j as f64, k as f64)) - center;
            shells
                .iter()
                .rev()
                .find(|s| s.contains(&folds, rel))
                .map_or(0.0, |s| s.tissue.code() as f64)
        })
        .collect();
    Volume::new(grid.clone(), data, Semantics::LabelMap)
}

/// `m0 · exp(−te/t2)`.
pub fn signal(m0: f64, t2: f64, te: f64) -> Result<f64> {
    if !(t2 > 0.0) {
        return Err(Error::Domain(format!("t2 must be positive, got {t2}")));
    }
    if !(te >= 0.0) {
        return Err(Error::Domain(format!("te must be non-negative, got {te}")));
    }
    Ok(m0 * (-te / t2).exp())
}

fn lookup(tissues: &[TissueSpec], code: f64) -> Result<Option<&TissueSpec>> {
    let tissue = Tissue::from_code(code as u8)
        .filter(|_| code >= 0.0 && code.fract() == 0.0)
        .ok_or_else(|| Error::Data(format!("unknown label value {code}")))?;
    if tissue == Tissue::Background {
        return Ok(None);
    }
    tissues
        .iter()
        .find(|t| t.label == tissue)
        .map(Some)
        .ok_or_else(|| Error::Data(format!("label {} has no tissue spec", tissue.name())))
}

/// One noise-free intensity volume per echo time.
pub fn synthesize_hr_volumes(labels: &Volume, tissues: &[TissueSpec], tes: &[f64]) -> Result<Vec<Volume>> {
    let (t2, m0) = parameter_maps(labels, tissues, None)?;
    synthesize_from_maps(&m0, &t2, labels, tes)
}

/// Ground-truth `(t2, m0)` maps; background voxels hold 0 in both.
pub fn parameter_maps(labels: &Volume, tissues: &[TissueSpec], bias: Option<&BiasField>) -> Result<(Volume, Volume)> {
    let grid = &labels.grid;
    let (lin, off) = grid.normalization();
    let mut t2 = vec![0.0; grid.len()];
    let mut m0 = vec![0.0; grid.len()];
    for (idx, &code) in labels.data.iter().enumerate() {
        if let Some(spec) = lookup(tissues, code)? {
            t2[idx] = spec.t2;
            let mut amp = spec.m0;
            if let Some(b) = bias {
                let [i, j, k] = grid.ijk(idx);
                let x = lin * grid.world_from_voxel(Vec3::new(i as f64, j as f64, k as f64)) + off;
                let factor = 1.0 + b.linear[0] * x.x + b.linear[1] * x.y + b.linear[2] * x.z + b.quadratic * x.norm_squared();
                amp *= factor.max(0.0);
            }
            m0[idx] = amp;
        }
    }
    Ok((
        Volume::new(grid.clone(), t2, Semantics::T2Map)?,
        Volume::new(grid.clone(), m0, Semantics::M0Map)?,
    ))
}

fn synthesize_from_maps(m0: &Volume, t2: &Volume, labels: &Volume, tes: &[f64]) -> Result<Vec<Volume>> {
    tes.iter()
        .map(|&te| {
            let data = labels
                .data
                .iter()
                .zip(m0.data.iter().zip(&t2.data))
                .map(|(&l, (&a, &t))| if l == 0.0 { Ok(0.0) } else { signal(a, t, te) })
                .collect::<Result<Vec<_>>>()?;
            Volume::new(labels.grid.clone(), data, Semantics::Intensity)
        })
        .collect()
}

/// Everything the downstream stages need from the phantom.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub labels: Volume,
    pub t2: Volume,
    pub m0: Volume,
}

impl Phantom {
    pub fn generate(spec: &PhantomSpec) -> Result<Self> {
        let labels = build_label_map(spec)?;
        let (t2, m0) = parameter_maps(&labels, &spec.tissues, spec.bias_field.as_ref())?;
        Ok(Self { labels, t2, m0 })
    }

    pub fn ground_truth(&self, tes: &[f64]) -> Result<Vec<Volume>> {
        synthesize_from_maps(&self.m0, &self.t2, &self.labels, tes)
    }

    /// Boolean brain mask (non-background labels).
    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.data.iter().map(|&l| l != 0.0).collect()
    }
}
