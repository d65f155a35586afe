//! Voxel-wise T2/M0 estimation by log-linear least squares.
//!
//! With `y = log V(TE)` and the design `D = [1, TE]`, the decay model reads
//! `y = D·β` with `β = (log M0, −1/T2)`. The residual operator
//! `A = D(DᵀD)⁻¹Dᵀ − I` is independent of the voxel and is shared by the
//! fitter and by the reconstruction penalty.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::geometry::{Semantics, Volume};

/// Fits with T2 above this (ms) are treated as invalid.
pub const T2_MAX: f64 = 5000.0;

#[derive(Clone, Debug)]
pub struct T2FitSystem {
    tes: Vec<f64>,
    /// N×2
    design: DMatrix<f64>,
    /// 2×N, `(DᵀD)⁻¹Dᵀ`
    pseudo_inverse: DMatrix<f64>,
    projection: DMatrix<f64>,
    residual: DMatrix<f64>,
    det: f64,
}

impl T2FitSystem {
    pub fn tes(&self) -> &[f64] {
        &self.tes
    }

    pub fn len(&self) -> usize {
        self.tes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tes.is_empty()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    /// `A = P − I`.
    pub fn residual_matrix(&self) -> &DMatrix<f64> {
        &self.residual
    }

    /// Determinant of `DᵀD`, kept as a conditioning indicator.
    pub fn normal_determinant(&self) -> f64 {
        self.det
    }

    /// `β* = (DᵀD)⁻¹Dᵀ y`.
    pub fn solve(&self, y: &[f64]) -> [f64; 2] {
        let mut beta = [0.0; 2];
        for (r, b) in beta.iter_mut().enumerate() {
            *b = (0..self.tes.len()).map(|c| self.pseudo_inverse[(r, c)] * y[c]).sum();
        }
        beta
    }

    /// `A·y` written into `out`.
    pub fn apply_residual(&self, y: &[f64], out: &mut [f64]) {
        let n = self.tes.len();
        for (r, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|c| self.residual[(r, c)] * y[c]).sum();
        }
    }
}

/// Precompute `D`, `P` and `A` for the given echo times (ms).
pub fn build_system(tes: &[f64]) -> Result<T2FitSystem> {
    let n = tes.len();
    if n < 2 {
        return config_err(format!("T2 fitting needs at least 2 echo times, got {n}"));
    }
    if tes.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return config_err("echo times must be positive");
    }
    for (i, a) in tes.iter().enumerate() {
        if tes[..i].contains(a) {
            return config_err(format!("duplicate echo time {a} ms makes DᵀD singular"));
        }
    }
    let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { tes[r] });
    let s: f64 = tes.iter().sum();
    let q: f64 = tes.iter().map(|t| t * t).sum();
    let det = n as f64 * q - s * s;
    if det.abs() <= 1e-12 * q * n as f64 {
        return config_err("design matrix is rank deficient");
    }
    // closed-form 2×2 inverse of [[n, s], [s, q]]
    let inv = [[q / det, -s / det], [-s / det, n as f64 / det]];
    let pseudo_inverse = DMatrix::from_fn(2, n, |r, c| inv[r][0] + inv[r][1] * tes[c]);
    let projection = &design * &pseudo_inverse;
    let mut residual = &projection - DMatrix::identity(n, n);
    // exact symmetry; the product above is symmetric only to rounding
    for r in 0..n {
        for c in r + 1..n {
            let m = 0.5 * (residual[(r, c)] + residual[(c, r)]);
            residual[(r, c)] = m;
            residual[(c, r)] = m;
        }
    }
    if n == 2 {
        // D is square and invertible, so P = I
        residual.fill(0.0);
    }
    Ok(T2FitSystem { tes: tes.to_vec(), design, pseudo_inverse, projection, residual, det })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFit {
    pub m0: f64,
    pub t2: f64,
    pub valid: bool,
}

fn log_intensities(intensities: &[f64], n: usize) -> Result<Vec<f64>> {
    if intensities.len() != n {
        return Err(Error::Contract(format!("expected {n} intensities, got {}", intensities.len())));
    }
    intensities
        .iter()
        .map(|&v| {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::Domain(format!("intensity must be positive, got {v}")))
            }
        })
        .collect()
}

pub fn fit_voxel(sys: &T2FitSystem, intensities: &[f64]) -> Result<VoxelFit> {
    let y = log_intensities(intensities, sys.len())?;
    let [b0, b1] = sys.solve(&y);
    let m0 = b0.exp();
    if b1 < 0.0 {
        let t2 = -1.0 / b1;
        Ok(VoxelFit { m0, t2, valid: t2 <= T2_MAX })
    } else {
        Ok(VoxelFit { m0, t2: f64::INFINITY, valid: false })
    }
}

/// `‖A·log(intensities)‖²`, the squared OLS residual of the log signal.
pub fn residual_energy(sys: &T2FitSystem, intensities: &[f64]) -> Result<f64> {
    let y = log_intensities(intensities, sys.len())?;
    let mut ay = vec![0.0; y.len()];
    sys.apply_residual(&y, &mut ay);
    Ok(ay.iter().map(|v| v * v).sum())
}

#[derive(Clone, Debug)]
pub struct ParameterMap {
    pub m0: Volume,
    pub t2: Volume,
    /// 1 where the fit is valid.
    pub mask: Volume,
}

impl ParameterMap {
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.data[idx] == 1.0
    }

    pub fn valid_fraction(&self) -> f64 {
        self.mask.data.iter().filter(|&&m| m == 1.0).count() as f64 / self.mask.data.len() as f64
    }
}

/// Voxel-wise fit of co-registered echo volumes. Intensities are clamped to
/// `floor`; voxels where every echo is at or below the floor are background.
pub fn fit_volume(sys: &T2FitSystem, volumes: &[Volume], floor: f64) -> Result<ParameterMap> {
    if volumes.len() != sys.len() {
        return Err(Error::Data(format!("{} volumes for {} echo times", volumes.len(), sys.len())));
    }
    if !(floor > 0.0) {
        return config_err("fit floor must be positive");
    }
    let grid = &volumes[0].grid;
    if volumes.iter().any(|v| v.grid != *grid) {
        return Err(Error::Data("echo volumes are on different grids".into()));
    }
    let fits: Vec<(f64, f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let raw: Vec<f64> = volumes.iter().map(|v| v.data[idx]).collect();
            if raw.iter().all(|&v| v <= floor) {
                return (0.0, 0.0, 0.0);
            }
            let clamped: Vec<f64> = raw.iter().map(|&v| v.max(floor)).collect();
            match fit_voxel(sys, &clamped) {
                Ok(f) if f.valid => (f.m0, f.t2, 1.0),
                _ => (0.0, 0.0, 0.0),
            }
        })
        .collect();
    let m0 = fits.iter().map(|f| f.0).collect();
    let t2 = fits.iter().map(|f| f.1).collect();
    let mask = fits.iter().map(|f| f.2).collect();
    Ok(ParameterMap {
        m0: Volume::new(grid.clone(), m0, Semantics::M0Map)?,
        t2: Volume::new(grid.clone(), t2, Semantics::T2Map)?,
        mask: Volume::new(grid.clone(), mask, Semantics::LabelMap)?,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegionStats {
    pub region: String,
    pub mean: f64,
    pub std: f64,
    pub voxels: usize,
    /// Fraction of the region's voxels dropped because the fit was invalid.
    pub excluded_fraction: f64,
}

/// Mean ± std of valid T2 per label value.
pub fn region_stats(map: &ParameterMap, labels: &Volume, regions: &[(String, f64)]) -> Vec<RegionStats> {
    regions
        .iter()
        .map(|(name, code)| {
            let mut vals = Vec::new();
            let mut total = 0usize;
            for idx in 0..labels.data.len() {
                if labels.data[idx] == *code {
                    total += 1;
                    if map.is_valid(idx) {
                        vals.push(map.t2.data[idx]);
                    }
                }
            }
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let excluded_fraction = if total > 0 { 1.0 - n as f64 / total as f64 } else { 0.0 };
            RegionStats { region: name.clone(), mean, std, voxels: n, excluded_fraction }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use crate::phantom::signal;
    use proptest::prelude::*;

    const FETAL_TES: [f64; 3] = [300.0, 397.0, 600.0];

    #[test]
    fn residual_matrix_algebra() {
        let sys = build_system(&[220.0, 500.0, 690.0]).unwrap();
        let a = sys.residual_matrix();
        assert!((a * a + a).amax() < 1e-10);
        assert!((a * sys.design()).amax() < 1e-10);
        assert_eq!(a, &a.transpose());
        // eigenvalues of −A: one 1 (N − 2 = 1) and two 0
        let eig = (-a.clone()).symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-10 && e[1].abs() < 1e-10 && (e[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_echo_system_has_zero_residual() {
        let sys = build_system(&[80.0, 160.0]).unwrap();
        assert!(sys.residual_matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_systems_are_rejected() {
        assert!(matches!(build_system(&[100.0, 100.0]), Err(Error::Config(_))));
        assert!(matches!(build_system(&[100.0]), Err(Error::Config(_))));
        assert!(matches!(build_system(&[0.0, 100.0]), Err(Error::Config(_))));
    }

    #[test]
    fn fit_recovers_wm_decay() {
        let sys = build_system(&FETAL_TES).unwrap();
        let v: Vec<f64> = FETAL_TES.iter().map(|&te| signal(100.0, 339.0, te).unwrap()).collect();
        let f = fit_voxel(&sys, &v).unwrap();
        assert!(f.valid);
        assert!((f.m0 / 100.0 - 1.0).abs() < 1e-9);
        assert!((f.t2 / 339.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_or_growing_signal_is_invalid() {
        let sys = build_system(&FETAL_TES).unwrap();
        assert!(!fit_voxel(&sys, &[5.0, 5.0, 5.0]).unwrap().valid);
        assert!(!fit_voxel(&sys, &[5.0, 6.0, 7.0]).unwrap().valid);
        assert!(matches!(fit_voxel(&sys, &[5.0, 0.0, 7.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn residual_energy_matches_ols_residual() {
        let sys = build_system(&[114.0, 200.0, 299.0, 410.0]).unwrap();
        let v = [90.0, 51.0, 40.0, 17.0];
        let y: Vec<f64> = v.iter().map(|x: &f64| x.ln()).collect();
        let beta = sys.solve(&y);
        let direct: f64 = sys
            .tes()
            .iter()
            .zip(&y)
            .map(|(te, yi)| (beta[0] + beta[1] * te - yi).powi(2))
            .sum();
        assert!((residual_energy(&sys, &v).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn residual_energy_vanishes_on_exact_decay() {
        let sys = build_system(&[220.0, 500.0, 690.0]).unwrap();
        let v: Vec<f64> = sys.tes().iter().map(|&te| signal(42.0, 123.0, te).unwrap()).collect();
        assert!(residual_energy(&sys, &v).unwrap() < 1e-12);
    }

    #[test]
    fn fit_volume_closure_and_background() {
        let g = Grid::centered_cube(3, 1.0).unwrap();
        let tes = [220.0, 500.0, 690.0];
        let sys = build_system(&tes).unwrap();
        let t2s: Vec<f64> = (0..g.len()).map(|i| 100.0 + 30.0 * i as f64).collect();
        let vols: Vec<Volume> = tes
            .iter()
            .map(|&te| {
                let d = t2s.iter().map(|&t| signal(80.0, t, te).unwrap()).collect();
                Volume::new(g.clone(), d, Semantics::Intensity).unwrap()
            })
            .collect();
        let map = fit_volume(&sys, &vols, 1e-6).unwrap();
        for i in 0..g.len() {
            assert!(map.is_valid(i));
            assert!((map.t2.data[i] / t2s[i] - 1.0).abs() < 1e-9);
        }
        let zeros: Vec<Volume> = tes.iter().map(|_| Volume::zeros(g.clone(), Semantics::Intensity)).collect();
        let map = fit_volume(&sys, &zeros, 1e-6).unwrap();
        assert_eq!(map.valid_fraction(), 0.0);

        let other = Grid::centered_cube(4, 1.0).unwrap();
        let mut mixed = vols.clone();
        mixed[1] = Volume::zeros(other, Semantics::Intensity);
        assert!(matches!(fit_volume(&sys, &mixed, 1e-6), Err(Error::Data(_))));
    }

    #[test]
    fn perturbation_stays_within_first_order_bound() {
        let sys = build_system(&[220.0, 500.0, 690.0]).unwrap();
        let t2 = 339.0;
        let clean: Vec<f64> = sys.tes().iter().map(|&te| signal(100.0, t2, te).unwrap()).collect();
        // d(−1/T2) = H₁·δy, so |ΔT2|/T2 ≈ T2·|H₁·δy|
        let h1_norm: f64 = (0..3).map(|c| sys.pseudo_inverse[(1, c)].abs()).fold(0.0, f64::max);
        for which in 0..3 {
            let mut noisy = clean.clone();
            noisy[which] *= 1.01;
            let f = fit_voxel(&sys, &noisy).unwrap();
            let rel = (f.t2 - t2).abs() / t2;
            let bound = t2 * h1_norm * (1.01f64).ln() * 1.05;
            assert!(rel <= bound, "echo {which}: {rel} > {bound}");
        }
    }

    proptest! {
        #[test]
        fn residual_invariant_under_decay_component(
            y in proptest::collection::vec(-3.0..5.0f64, 4),
            b0 in -5.0..5.0f64,
            b1 in -0.01..0.01f64,
        ) {
            let sys = build_system(&[50.0, 120.0, 260.0, 400.0]).unwrap();
            let v: Vec<f64> = y.iter().map(|x| x.exp()).collect();
            let shifted: Vec<f64> = y.iter().zip(sys.tes()).map(|(x, te)| (x + b0 + b1 * te).exp()).collect();
            let a = residual_energy(&sys, &v).unwrap();
            let b = residual_energy(&sys, &shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn fit_inverts_signal(m0 in 1.0..200.0f64, t2 in 20.0..2000.0f64, te0 in 10.0..100.0f64, dte in 5.0..200.0f64) {
            let tes = [te0, te0 + dte];
            let sys = build_system(&tes).unwrap();
            let v: Vec<f64> = tes.iter().map(|&te| signal(m0, t2, te).unwrap()).collect();
            let f = fit_voxel(&sys, &v).unwrap();
            prop_assert!((f.m0 / m0 - 1.0).abs() < 1e-9);
            prop_assert!((f.t2 / t2 - 1.0).abs() < 1e-9);
        }
    }
}
