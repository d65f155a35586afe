//! Image-quality and quantitative error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimOptions {
    /// Window side length (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Intensity range mapped to [0, 1] before comparison. `None` uses the
    /// min/max of the reference volume.
    pub range: Option<(f64, f64)>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { window: 7, sigma: 1.5, k1: 0.01, k2: 0.03, range: None }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filter along one axis; kernel weights are renormalised where
/// the window leaves the volume.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx / stride) % n;
        let base = idx - pos * stride;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(n - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for q in lo..=hi {
            let w = kernel[q + r - pos];
            acc += w * data[base + q * stride];
            wsum += w;
        }
        *o = acc / wsum;
    }
    out
}

fn smooth(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let a = filter_axis(data, dims, 0, kernel);
    let b = filter_axis(&a, dims, 1, kernel);
    filter_axis(&b, dims, 2, kernel)
}

/// Per-voxel SSIM map of `test` against `reference`.
pub fn ssim_map(reference: &Volume, test: &Volume, opts: &SsimOptions) -> Result<Vec<f64>> {
    if reference.grid.dims != test.grid.dims {
        return Err(Error::Data(format!(
            "SSIM inputs differ in shape: {:?} vs {:?}",
            reference.grid.dims, test.grid.dims
        )));
    }
    if opts.window % 2 == 0 || opts.window == 0 || !(opts.sigma > 0.0) {
        return Err(Error::Config("SSIM window must be odd and sigma positive".into()));
    }
    let (lo, hi) = opts.range.unwrap_or((reference.min(), reference.max()));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x: Vec<f64> = reference.data.iter().map(|v| (v - lo) / span).collect();
    let y: Vec<f64> = test.data.iter().map(|v| (v - lo) / span).collect();
    let dims = reference.grid.dims;
    let kernel = gaussian_kernel(opts.window, opts.sigma);
    let mx = smooth(&x, dims, &kernel);
    let my = smooth(&y, dims, &kernel);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mxx = smooth(&sq(&x, &x), dims, &kernel);
    let myy = smooth(&sq(&y, &y), dims, &kernel);
    let mxy = smooth(&sq(&x, &y), dims, &kernel);
    let c1 = (opts.k1 * 1.0).powi(2);
    let c2 = (opts.k2 * 1.0).powi(2);
    Ok((0..x.len())
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cov = mxy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean SSIM, restricted to `mask` when given.
pub fn ssim3d(reference: &Volume, test: &Volume, mask: Option<&[bool]>, opts: &SsimOptions) -> Result<f64> {
    let map = ssim_map(reference, test, opts)?;
    masked_mean(&map, mask, |_| true)
}

fn masked_mean(values: &[f64], mask: Option<&[bool]>, extra: impl Fn(usize) -> bool) -> Result<f64> {
    if let Some(m) = mask {
        if m.len() != values.len() {
            return Err(Error::Data("mask length does not match volume".into()));
        }
    }
    let (sum, n) = values
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]) && extra(*i))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Data("no voxels selected for the metric".into()));
    }
    Ok(sum / n as f64)
}

/// Mean absolute T2 error (ms) over `mask`, skipping voxels where `valid`
/// is false (failed fits).
pub fn t2_mae(estimate: &Volume, truth: &Volume, mask: &[bool], valid: Option<&[bool]>) -> Result<f64> {
    if estimate.grid.dims != truth.grid.dims {
        return Err(Error::Data("T2 maps differ in shape".into()));
    }
    let diff: Vec<f64> = estimate.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).collect();
    masked_mean(&diff, Some(mask), |i| valid.map_or(true, |v| v[i]))
}

/// T2 error within one labelled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionError {
    pub tissue: String,
    /// `None` when no voxel of the region has a valid fit.
    pub mae_ms: Option<f64>,
    /// Voxels that entered the mean.
    pub voxels: usize,
    /// Fraction of the region excluded because the fit failed.
    pub excluded_fraction: f64,
}

/// [`t2_mae`] for every `(name, label code)` region.
pub fn region_t2_errors(
    estimate: &Volume,
    valid: &[bool],
    truth: &Volume,
    labels: &Volume,
    regions: &[(String, f64)],
) -> Result<Vec<RegionError>> {
    regions
        .iter()
        .map(|(name, code)| {
            let mask: Vec<bool> = labels.data.iter().map(|l| l == code).collect();
            let total = mask.iter().filter(|&&m| m).count();
            if total == 0 {
                return Err(Error::Data(format!("region `{name}` is empty")));
            }
            let used = mask.iter().zip(valid).filter(|(m, v)| **m && **v).count();
            let mae_ms = if used > 0 { Some(t2_mae(estimate, truth, &mask, Some(valid))?) } else { None };
            Ok(RegionError {
                tissue: name.clone(),
                mae_ms,
                voxels: used,
                excluded_fraction: 1.0 - used as f64 / total as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoSsim {
    pub te: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub stacks_per_te: usize,
    pub seed: u64,
    pub per_echo: Vec<EchoSsim>,
    pub mean_ssim: f64,
    pub regions: Vec<RegionError>,
    /// Resolved configuration that produced this report.
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn mae(&self, tissue: &str) -> Option<f64> {
        self.regions.iter().find(|r| r.tissue == tissue).and_then(|r| r.mae_ms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
