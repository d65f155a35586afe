//! Spatial types: voxel grids, volumes, rigid poses and resampling.
//!
//! World coordinates are millimetres. A [`Grid`] places voxel indices in the
//! world through `origin + orientation * (index ∘ spacing)`; volume data is
//! stored x-fastest.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{config_err, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Placement of a regular voxel lattice in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// World-from-voxel axes, one per column.
    pub orientation: Mat3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], orientation: Mat3) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return config_err(format!("grid dims must be >= 1, got {dims:?}"));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return config_err(format!("grid spacing must be positive, got {spacing:?}"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return config_err("grid origin must be finite");
        }
        let defect = orientation.transpose() * orientation - Mat3::identity();
        if defect.amax() >= 1e-10 {
            return config_err("grid orientation is not orthonormal");
        }
        Ok(Self { dims, spacing, origin, orientation })
    }

    /// Isotropic cube of `n` voxels per axis centred on the world origin.
    pub fn centered_cube(n: usize, spacing: f64) -> Result<Self> {
        let half = (n as f64 - 1.0) * spacing / 2.0;
        Self::new([n; 3], [spacing; 3], [-half; 3], Mat3::identity())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn world_from_voxel(&self, idx: Vec3) -> Vec3 {
        let scaled = Vec3::new(idx.x * self.spacing[0], idx.y * self.spacing[1], idx.z * self.spacing[2]);
        Vec3::from(self.origin) + self.orientation * scaled
    }

    #[inline]
    pub fn voxel_from_world(&self, p: Vec3) -> Vec3 {
        let local = self.orientation.transpose() * (p - Vec3::from(self.origin));
        Vec3::new(local.x / self.spacing[0], local.y / self.spacing[1], local.z / self.spacing[2])
    }

    /// World position of the geometric centre of the lattice.
    pub fn center(&self) -> Vec3 {
        let mid = Vec3::new(
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        );
        self.world_from_voxel(mid)
    }

    /// Physical extent along each grid axis, voxel edge to voxel edge.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Affine map sending the first voxel centre to -1 and the last to +1 on
    /// every axis; returned as `(linear, offset)` so `x = linear * p + offset`.
    pub fn normalization(&self) -> (Mat3, Vec3) {
        let mut scale = Mat3::zeros();
        for a in 0..3 {
            let span = (self.dims[a] as f64 - 1.0).max(1.0);
            scale[(a, a)] = 2.0 / (span * self.spacing[a]);
        }
        let linear = scale * self.orientation.transpose();
        let offset = -(linear * Vec3::from(self.origin)) - Vec3::repeat(1.0);
        (linear, offset)
    }

    /// Normalized coordinates of every voxel centre, in storage order.
    pub fn normalized_voxel_centers(&self) -> Vec<Vec3> {
        let (lin, off) = self.normalization();
        (0..self.len())
            .map(|idx| {
                let [i, j, k] = self.ijk(idx);
                lin * self.world_from_voxel(Vec3::new(i as f64, j as f64, k as f64)) + off
            })
            .collect()
    }
}

/// What the scalar values of a volume mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Semantics {
    Intensity,
    T2Map,
    M0Map,
    LabelMap,
}

impl Semantics {
    pub fn code(self) -> u8 {
        match self {
            Semantics::Intensity => 0,
            Semantics::T2Map => 1,
            Semantics::M0Map => 2,
            Semantics::LabelMap => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Semantics::Intensity,
            1 => Semantics::T2Map,
            2 => Semantics::M0Map,
            3 => Semantics::LabelMap,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Trilinear,
}

/// Dense scalar field on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
    pub semantics: Semantics,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>, semantics: Semantics) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Data(format!(
                "volume data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at voxel {bad}")));
        }
        if semantics == Semantics::Intensity {
            if let Some(bad) = data.iter().position(|&v| v < 0.0) {
                return Err(Error::Data(format!("negative intensity at voxel {bad}")));
            }
        }
        Ok(Self { grid, data, semantics })
    }

    pub fn zeros(grid: Grid, semantics: Semantics) -> Self {
        let n = grid.len();
        Self { grid, data: vec![0.0; n], semantics }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.linear_index(i, j, k)]
    }

    /// Trilinear sample at a continuous voxel coordinate. Points outside the
    /// lattice hull read as 0.
    pub fn sample_trilinear(&self, idx: Vec3) -> f64 {
        const TOL: f64 = 1e-9;
        let d = self.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = idx[a];
            let hi = d[a] as f64 - 1.0;
            if !(x >= -TOL && x <= hi + TOL) {
                return 0.0;
            }
            let x = x.clamp(0.0, hi);
            let f = x.floor();
            let mut b = f as usize;
            let mut t = x - f;
            if b + 1 >= d[a] {
                // on the last plane (or a single-voxel axis)
                b = d[a] - 1;
                t = 0.0;
            }
            base[a] = b;
            frac[a] = t;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * self.at(base[0] + dx, base[1] + dy, base[2] + dz);
                }
            }
        }
        acc
    }

    pub fn sample_nearest(&self, idx: Vec3) -> f64 {
        let d = self.grid.dims;
        let mut n = [0usize; 3];
        for a in 0..3 {
            let r = idx[a].round();
            if !(r >= 0.0 && r <= d[a] as f64 - 1.0) {
                return 0.0;
            }
            n[a] = r as usize;
        }
        self.at(n[0], n[1], n[2])
    }

    pub fn sample_world(&self, p: Vec3, interp: Interp) -> f64 {
        let idx = self.grid.voxel_from_world(p);
        match interp {
            Interp::Nearest => self.sample_nearest(idx),
            Interp::Trilinear => self.sample_trilinear(idx),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Resample `vol` onto `target`. Target voxels whose centre falls outside
/// the source lattice are 0.
pub fn resample(vol: &Volume, target: &Grid, interp: Interp) -> Volume {
    let plane = target.dims[0] * target.dims[1];
    let mut data = vec![0.0; target.len()];
    data.par_chunks_mut(plane).enumerate().for_each(|(k, out)| {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let p = target.world_from_voxel(Vec3::new(i as f64, j as f64, k as f64));
                out[i + target.dims[0] * j] = vol.sample_world(p, interp);
            }
        }
    });
    Volume { grid: target.clone(), data, semantics: vol.semantics }
}

/// Six-parameter rigid motion. Rotation is built as `Rz(θz)·Ry(θy)·Rx(θx)`
/// (intrinsic Z-Y-X), angles in radians, translation in mm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidPose {
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl RigidPose {
    pub fn new(euler: [f64; 3], translation: [f64; 3]) -> Self {
        Self { euler, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self { euler: [p[0], p[1], p[2]], translation: [p[3], p[4], p[5]] }
    }

    pub fn params(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn rotation(&self) -> Mat3 {
        let [x, y, z] = self.euler;
        rot_z(z) * rot_y(y) * rot_x(x)
    }

    /// Partial derivatives of [`rotation`](Self::rotation) with respect to
    /// θx, θy and θz.
    pub fn rotation_derivatives(&self) -> [Mat3; 3] {
        let [x, y, z] = self.euler;
        let (rx, ry, rz) = (rot_x(x), rot_y(y), rot_z(z));
        [rz * ry * drot_x(x), rz * drot_y(y) * rx, drot_z(z) * ry * rx]
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// `R·p + t`.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation() * p + self.translation_vec()
    }

    /// `R·(p − c) + c + t`: rotation about `center`.
    pub fn apply_about(&self, p: Vec3, center: Vec3) -> Vec3 {
        self.rotation() * (p - center) + center + self.translation_vec()
    }

    /// Recover Euler angles from a rotation matrix (away from gimbal lock).
    pub fn from_rotation_translation(r: &Mat3, t: Vec3) -> Self {
        let cy = r[(0, 0)].hypot(r[(1, 0)]);
        let theta_y = (-r[(2, 0)]).atan2(cy);
        let theta_x = r[(2, 1)].atan2(r[(2, 2)]);
        let theta_z = r[(1, 0)].atan2(r[(0, 0)]);
        Self { euler: [theta_x, theta_y, theta_z], translation: [t.x, t.y, t.z] }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_rotation_translation(&rt, -(rt * self.translation_vec()))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        let r1 = self.rotation();
        let r = r1 * other.rotation();
        let t = r1 * other.translation_vec() + self.translation_vec();
        Self::from_rotation_translation(&r, t)
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_distance(&self, other: &RigidPose) -> f64 {
        let rel = self.rotation().transpose() * other.rotation();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}
