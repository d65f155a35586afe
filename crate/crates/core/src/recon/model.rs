use ndarray::Array2;
use rayon::prelude::*;

use super::{ReconConfig, SliceEncoding, Variant};
use crate::error::{Error, Result};
use crate::geometry::{Grid, Mat3, RigidPose, Semantics, Vec3, Volume};
use crate::neural::{sigmoid, softplus, OutputActivation, SirenNetwork, Tape};
use crate::relaxometry::T2FitSystem;
use crate::rng::{self, domain};

/// Pixels per work item in the data term. Fixed so the floating-point
/// reduction order, and therefore the result, does not depend on the number
/// of threads.
const DATA_CHUNK: usize = 64;
const REG_CHUNK: usize = 256;
const RENDER_CHUNK: usize = 4096;

/// softplus⁻¹(1)
const SIGMA_BIAS: f64 = 0.541_324_854_612_918_1;
const OMEGA_BIAS: f64 = 2.0;

/// Relative offset added before the log in the regularizer, scaled by the
/// per-echo median prediction.
const LOG_EPS_REL: f64 = 1e-6;

const SLICE_OUTPUTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceCalibration {
    pub sigma: f64,
    pub omega: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceState {
    pub pose: RigidPose,
    pub calib: SliceCalibration,
}

/// Static description of one acquired slice as seen by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceInfo {
    pub stack: usize,
    pub index_in_stack: usize,
    pub te: usize,
    /// Which slice network predicts this slice, and its row in that
    /// network's input batch.
    pub net: usize,
    pub row: usize,
    pub encoding: Vec<f64>,
    /// World point the network's rotation acts about (the slice centre);
    /// decoded poses are re-expressed about the grid centre.
    pub pivot: Vec3,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index into the slice table.
    pub slice: usize,
    /// Nominal world position of the pixel (mm).
    pub world: Vec3,
    /// Measured intensity, already divided by the model's intensity scale.
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
    /// `psf_samples` world-frame PSF offsets per sample, sample-major.
    pub offsets: Vec<Vec3>,
    pub psf_samples: usize,
    /// Normalized HR coordinates for the decay regularizer.
    pub reg_coords: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub sr: Vec<Vec<f64>>,
    pub slice: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.sr.iter().chain(&self.slice).flatten().all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub grads: Option<Gradients>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconModel {
    pub variant: Variant,
    pub num_tes: usize,
    /// MC / MC_Reg: one network with an output per echo. SC: one
    /// single-output network per echo.
    pub sr_nets: Vec<SirenNetwork>,
    pub slice_nets: Vec<SirenNetwork>,
    pub grid: Grid,
    /// Measured intensities are divided by this before training; rendering
    /// multiplies it back.
    pub intensity_scale: f64,
    pub rotation_scale: f64,
    pub translation_scale: f64,
}

struct SliceForward {
    states: Vec<SliceState>,
    passes: Vec<(Array2<f64>, Tape)>,
    /// Per echo: the median raw σ.
    sigma_ref: Vec<f64>,
    /// Per slice: its weight in its echo's median (1, 1/2 or 0).
    median_weight: Vec<f64>,
}

struct ChunkOut {
    pred: Vec<f64>,
    grad: Vec<f64>,
    zgrad: Option<Array2<f64>>,
}

impl ReconModel {
    /// Slice networks take 2-dimensional encodings.
    pub fn new(config: &ReconConfig, num_slice_nets: usize, intensity_scale: f64) -> Result<Self> {
        Self::with_slice_inputs(config, &vec![2; num_slice_nets], intensity_scale)
    }

    /// One slice network per entry of `slice_inputs`, with that input width.
    pub fn with_slice_inputs(config: &ReconConfig, slice_inputs: &[usize], intensity_scale: f64) -> Result<Self> {
        if !(intensity_scale > 0.0 && intensity_scale.is_finite()) {
            return Err(Error::Data("intensity scale must be positive".into()));
        }
        let n = config.tes.len();
        let (count, outputs) = match config.variant {
            Variant::Sc => (n, 1),
            Variant::Mc | Variant::McReg => (1, n),
        };
        let mut sr_nets = Vec::with_capacity(count);
        for i in 0..count {
            let mut dims = vec![3];
            dims.extend(&config.sr_hidden);
            dims.push(outputs);
            let mut rng = rng::stream(config.seed, domain::NET_INIT, 0, i as u64);
            sr_nets.push(SirenNetwork::new(&dims, config.omega0, OutputActivation::Softplus, &mut rng)?);
        }
        let mut slice_nets = Vec::with_capacity(slice_inputs.len());
        for (i, &width) in slice_inputs.iter().enumerate() {
            let mut dims = vec![width];
            dims.extend(&config.slice_hidden);
            dims.push(SLICE_OUTPUTS);
            let mut rng = rng::stream(config.seed, domain::NET_INIT, 1, i as u64);
            let mut net = SirenNetwork::new(&dims, config.slice_omega0, OutputActivation::None, &mut rng)?;
            if config.slice_encoding == SliceEncoding::OneHot {
                // one embedding column per slice with phases spread over a full period
                let scale = width as f64 * std::f64::consts::PI / config.slice_omega0;
                for w in net.input_weights_mut() {
                    *w *= scale;
                }
            }
            // start from the identity pose, σ = 1 and a uniform ω
            net.zero_output_layer();
            let bias = net.output_bias_mut();
            bias[6] = SIGMA_BIAS;
            bias[7] = OMEGA_BIAS;
            slice_nets.push(net);
        }
        Ok(Self {
            variant: config.variant,
            num_tes: n,
            sr_nets,
            slice_nets,
            grid: config.grid.clone(),
            intensity_scale,
            rotation_scale: config.rotation_scale,
            translation_scale: config.translation_scale,
        })
    }

    /// `(network, output channel)` that predicts echo `te`.
    pub fn sr_route(&self, te: usize) -> (usize, usize) {
        match self.variant {
            Variant::Sc => (te, 0),
            Variant::Mc | Variant::McReg => (0, te),
        }
    }

    pub fn normalization(&self) -> (Mat3, Vec3) {
        self.grid.normalization()
    }

    pub fn rotation_center(&self) -> Vec3 {
        self.grid.center()
    }

    fn decode(&self, o: &[f64], pivot: Vec3) -> SliceState {
        let (r, t) = (self.rotation_scale, self.translation_scale);
        let euler = [r * o[0], r * o[1], r * o[2]];
        let arm = pivot - self.rotation_center();
        let shift = RigidPose::new(euler, [0.0; 3]).rotation() * arm - arm;
        SliceState {
            pose: RigidPose::new(euler, [t * o[3] - shift.x, t * o[4] - shift.y, t * o[5] - shift.z]),
            calib: SliceCalibration { sigma: softplus(o[6]), omega: sigmoid(o[7]) },
        }
    }

    fn slice_inputs(&self, slices: &[SliceInfo]) -> Vec<Array2<f64>> {
        let mut rows = vec![0usize; self.slice_nets.len()];
        for s in slices {
            rows[s.net] = rows[s.net].max(s.row + 1);
        }
        let mut inputs: Vec<Array2<f64>> =
            rows.iter().zip(&self.slice_nets).map(|(&r, net)| Array2::zeros((r, net.input_dim()))).collect();
        for s in slices {
            for (a, &e) in s.encoding.iter().enumerate() {
                inputs[s.net][(s.row, a)] = e;
            }
        }
        inputs
    }

    /// Raw scales are divided by their median over the non-empty slices of
    /// the same echo; otherwise σ and the network output share a free global
    /// factor per echo, which would leak into the T2 estimate. The median
    /// keeps dropout-darkened slices from shifting that reference.
    fn slice_forward(&self, slices: &[SliceInfo]) -> Result<SliceForward> {
        let passes = self
            .slice_inputs(slices)
            .iter()
            .zip(&self.slice_nets)
            .map(|(x, net)| net.forward(x.view()))
            .collect::<Result<Vec<_>>>()?;
        let mut states: Vec<SliceState> =
            slices.iter().map(|s| self.decode(passes[s.net].0.row(s.row).as_slice().unwrap(), s.pivot)).collect();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.num_tes];
        for (i, s) in slices.iter().enumerate() {
            if !s.empty {
                groups[s.te].push(i);
            }
        }
        let mut sigma_ref = vec![1.0; self.num_tes];
        let mut median_weight = vec![0.0; slices.len()];
        for (te, members) in groups.iter_mut().enumerate() {
            if members.is_empty() {
                continue;
            }
            members.sort_by(|&a, &b| states[a].calib.sigma.total_cmp(&states[b].calib.sigma).then(a.cmp(&b)));
            let n = members.len();
            let middle: &[usize] = if n % 2 == 1 { &members[n / 2..=n / 2] } else { &members[n / 2 - 1..=n / 2] };
            let w = 1.0 / middle.len() as f64;
            sigma_ref[te] = middle.iter().map(|&i| w * states[i].calib.sigma).sum();
            for &i in middle {
                median_weight[i] = w;
            }
        }
        for (s, st) in slices.iter().zip(&mut states) {
            st.calib.sigma /= sigma_ref[s.te];
        }
        Ok(SliceForward { states, passes, sigma_ref, median_weight })
    }

    /// Current pose and calibration of every slice.
    pub fn slice_states(&self, slices: &[SliceInfo]) -> Result<Vec<SliceState>> {
        Ok(self.slice_forward(slices)?.states)
    }

    #[allow(clippy::too_many_arguments)]
    fn data_chunk(
        &self,
        net: &SirenNetwork,
        idxs: &[usize],
        te_of: &[usize],
        batch: &SampleBatch,
        states: &[SliceState],
        coef: Option<&[f64]>,
    ) -> Result<ChunkOut> {
        let k = batch.psf_samples;
        let (lin, off) = self.normalization();
        let center = self.rotation_center();
        let mut x = Array2::zeros((idxs.len() * k, 3));
        for (r, &s) in idxs.iter().enumerate() {
            let smp = &batch.samples[s];
            let base = states[smp.slice].pose.apply_about(smp.world, center);
            for j in 0..k {
                let z = lin * (base + batch.offsets[s * k + j]) + off;
                let row = r * k + j;
                x[(row, 0)] = z.x;
                x[(row, 1)] = z.y;
                x[(row, 2)] = z.z;
            }
        }
        let (out, tape) = net.forward(x.view())?;
        let pred: Vec<f64> = idxs
            .iter()
            .enumerate()
            .map(|(r, &s)| {
                let sigma = states[batch.samples[s].slice].calib.sigma;
                let channel = self.sr_route(te_of[s]).1;
                sigma * (0..k).map(|j| out[(r * k + j, channel)]).sum::<f64>() / k as f64
            })
            .collect();
        let Some(coef) = coef else {
            return Ok(ChunkOut { pred, grad: Vec::new(), zgrad: None });
        };
        let mut cot = Array2::zeros(out.dim());
        for (r, &s) in idxs.iter().enumerate() {
            let smp = &batch.samples[s];
            let st = &states[smp.slice];
            let g = coef[s] * st.calib.omega * sign(pred[r] - smp.target) * st.calib.sigma / k as f64;
            let channel = self.sr_route(te_of[s]).1;
            for j in 0..k {
                cot[(r * k + j, channel)] = g;
            }
        }
        let mut grad = vec![0.0; net.num_params()];
        let zgrad = net.backward_into(&tape, cot.view(), &mut grad)?;
        Ok(ChunkOut { pred, grad, zgrad: Some(zgrad) })
    }

    /// Loss (and optionally gradients) on a fixed batch. With
    /// `slice_grads == false` the slice network receives no gradient.
    pub fn evaluate(
        &self,
        slices: &[SliceInfo],
        batch: &SampleBatch,
        fit: Option<(&T2FitSystem, f64)>,
        with_grads: bool,
        slice_grads: bool,
    ) -> Result<Evaluation> {
        let SliceForward { states, passes: slice_passes, sigma_ref, median_weight } = self.slice_forward(slices)?;
        let b = batch.samples.len();
        let k = batch.psf_samples;
        if batch.offsets.len() != b * k {
            return Err(Error::Contract("batch offsets do not match samples × psf_samples".into()));
        }
        let te_of: Vec<usize> = batch.samples.iter().map(|s| slices[s.slice].te).collect();
        let omega: Vec<f64> = batch.samples.iter().map(|s| states[s.slice].calib.omega).collect();
        let (inv, _) = te_normalizers(&te_of, &omega, self.num_tes);
        let coef: Vec<f64> = te_of.iter().map(|&t| inv[t]).collect();

        let mut pred = vec![0.0; b];
        let mut sr_grads: Vec<Vec<f64>> = self.sr_nets.iter().map(|n| vec![0.0; n.num_params()]).collect();
        let mut zgrads: Vec<Option<Array2<f64>>> = Vec::new();
        let mut zgrad_of: Vec<(usize, usize)> = vec![(usize::MAX, 0); b];
        for (ni, net) in self.sr_nets.iter().enumerate() {
            let mine: Vec<usize> = (0..b).filter(|&s| self.sr_route(te_of[s]).0 == ni).collect();
            let outs = mine
                .par_chunks(DATA_CHUNK)
                .map(|idxs| self.data_chunk(net, idxs, &te_of, batch, &states, with_grads.then_some(&coef[..])))
                .collect::<Vec<_>>();
            for (idxs, out) in mine.chunks(DATA_CHUNK).zip(outs) {
                let out = out?;
                for (r, &s) in idxs.iter().enumerate() {
                    pred[s] = out.pred[r];
                    zgrad_of[s] = (zgrads.len(), r);
                }
                if with_grads {
                    for (g, v) in sr_grads[ni].iter_mut().zip(&out.grad) {
                        *g += v;
                    }
                }
                zgrads.push(out.zgrad);
            }
        }

        let targets: Vec<f64> = batch.samples.iter().map(|s| s.target).collect();
        let data = data_loss(&te_of, &omega, &pred, &targets, self.num_tes);

        let mut reg = 0.0;
        if let Some((sys, alpha)) = fit {
            let grad = if with_grads { Some(&mut sr_grads[0]) } else { None };
            reg = self.regularize(&batch.reg_coords, sys, alpha, grad)?;
        }
        let alpha = fit.map_or(0.0, |f| f.1);
        let total = data + alpha * reg;

        let mut slice_grad: Vec<Vec<f64>> = self.slice_nets.iter().map(|n| vec![0.0; n.num_params()]).collect();
        if with_grads && slice_grads {
            let (lin, _) = self.normalization();
            let lin_t = lin.transpose();
            let per_te_loss: Vec<f64> = te_mean_losses(&te_of, &omega, &pred, &targets, self.num_tes);
            let mut d_out = vec![[0.0f64; SLICE_OUTPUTS]; slices.len()];
            for (s, smp) in batch.samples.iter().enumerate() {
                let st = &states[smp.slice];
                let t = te_of[s];
                let resid = pred[s] - smp.target;
                let g = coef[s] * st.calib.omega * sign(resid);
                let d = &mut d_out[smp.slice];
                // σ and ω
                d[6] += g * pred[s] / st.calib.sigma;
                d[7] += coef[s] * (resid.abs() - per_te_loss[t]);
                // pose, through the sampling positions
                let (chunk, row) = zgrad_of[s];
                let zg = zgrads[chunk].as_ref().expect("gradients requested");
                let rel = smp.world - slices[smp.slice].pivot;
                let drs = st.pose.rotation_derivatives();
                let lever = [drs[0] * rel, drs[1] * rel, drs[2] * rel];
                for j in 0..k {
                    let r = row * k + j;
                    let dq = lin_t * Vec3::new(zg[(r, 0)], zg[(r, 1)], zg[(r, 2)]);
                    for a in 0..3 {
                        d[a] += dq.dot(&lever[a]);
                        d[3 + a] += dq[a];
                    }
                }
            }
            // through the per-echo median normalization of σ
            let mut weighted = vec![0.0; self.num_tes];
            for (si, info) in slices.iter().enumerate() {
                if !info.empty {
                    weighted[info.te] += d_out[si][6] * states[si].calib.sigma;
                }
            }
            for (si, info) in slices.iter().enumerate() {
                let t = info.te;
                d_out[si][6] = (d_out[si][6] - median_weight[si] * weighted[t]) / sigma_ref[t];
            }
            let mut cots: Vec<Array2<f64>> = slice_passes.iter().map(|(o, _)| Array2::zeros(o.dim())).collect();
            for (si, info) in slices.iter().enumerate() {
                let st = &states[si];
                let d = &d_out[si];
                let o = slice_passes[info.net].0.row(info.row);
                let c = &mut cots[info.net];
                for a in 0..3 {
                    c[(info.row, a)] = d[a] * self.rotation_scale;
                    c[(info.row, 3 + a)] = d[3 + a] * self.translation_scale;
                }
                c[(info.row, 6)] = d[6] * sigmoid(o[6]);
                c[(info.row, 7)] = d[7] * st.calib.omega * (1.0 - st.calib.omega);
            }
            for (ni, ((_, tape), cot)) in slice_passes.iter().zip(&cots).enumerate() {
                self.slice_nets[ni].backward_into(tape, cot.view(), &mut slice_grad[ni])?;
            }
        }
        Ok(Evaluation {
            data_loss: data,
            reg_loss: reg,
            total,
            grads: with_grads.then_some(Gradients { sr: sr_grads, slice: slice_grad }),
        })
    }

    /// `α·R_T2` gradient is accumulated into `grad` when given; returns R_T2.
    fn regularize(&self, coords: &[Vec3], sys: &T2FitSystem, alpha: f64, grad: Option<&mut Vec<f64>>) -> Result<f64> {
        regularizer_impl(&self.sr_nets[0], coords, sys, alpha, grad)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-echo `1 / (N_present · Σω)` and the number of echoes present.
fn te_normalizers(te_of: &[usize], omega: &[f64], num_tes: usize) -> (Vec<f64>, usize) {
    let mut w = vec![0.0; num_tes];
    for (&t, &o) in te_of.iter().zip(omega) {
        w[t] += o;
    }
    let present = w.iter().filter(|&&v| v > 0.0).count();
    let inv = w.iter().map(|&v| if v > 0.0 { 1.0 / (present as f64 * v) } else { 0.0 }).collect();
    (inv, present)
}

fn te_mean_losses(te_of: &[usize], omega: &[f64], pred: &[f64], targets: &[f64], num_tes: usize) -> Vec<f64> {
    let mut s = vec![0.0; num_tes];
    let mut w = vec![0.0; num_tes];
    for i in 0..te_of.len() {
        s[te_of[i]] += omega[i] * (pred[i] - targets[i]).abs();
        w[te_of[i]] += omega[i];
    }
    s.iter().zip(&w).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect()
}

/// ω-weighted mean absolute error per echo, averaged over the echoes that
/// appear in the batch.
pub fn data_loss(te_of: &[usize], omega: &[f64], predictions: &[f64], targets: &[f64], num_tes: usize) -> f64 {
    let (_, present) = te_normalizers(te_of, omega, num_tes);
    if present == 0 {
        return 0.0;
    }
    let per_te = te_mean_losses(te_of, omega, predictions, targets, num_tes);
    let mut w = vec![0.0; num_tes];
    for (&t, &o) in te_of.iter().zip(omega) {
        w[t] += o;
    }
    per_te.iter().zip(&w).filter(|(_, w)| **w > 0.0).map(|(l, _)| l).sum::<f64>() / present as f64
}

/// Predicted slice intensity `σ·mean_j f(normalize(T_ψ(p) + u_j))[channel]`.
pub fn simulate_slice_pixel(
    net: &SirenNetwork,
    channel: usize,
    state: &SliceState,
    pixel_world: Vec3,
    offsets: &[Vec3],
    grid: &Grid,
) -> Result<f64> {
    if offsets.is_empty() {
        return Err(Error::Contract("at least one PSF offset is required".into()));
    }
    let (lin, off) = grid.normalization();
    let base = state.pose.apply_about(pixel_world, grid.center());
    let mut x = Array2::zeros((offsets.len(), 3));
    for (r, u) in offsets.iter().enumerate() {
        let z = lin * (base + u) + off;
        x[(r, 0)] = z.x;
        x[(r, 1)] = z.y;
        x[(r, 2)] = z.z;
    }
    let out = net.predict(x.view())?;
    Ok(state.calib.sigma * out.column(channel).sum() / offsets.len() as f64)
}

fn coords_matrix(coords: &[Vec3]) -> Array2<f64> {
    let mut x = Array2::zeros((coords.len(), 3));
    for (r, c) in coords.iter().enumerate() {
        x[(r, 0)] = c.x;
        x[(r, 1)] = c.y;
        x[(r, 2)] = c.z;
    }
    x
}

fn median(mut v: Vec<f64>) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn regularizer_impl(
    net: &SirenNetwork,
    coords: &[Vec3],
    sys: &T2FitSystem,
    alpha: f64,
    grad: Option<&mut Vec<f64>>,
) -> Result<f64> {
    let n = sys.len();
    if n < 2 {
        return Err(Error::Config("the decay regularizer needs at least two echo times".into()));
    }
    if net.output_dim() != n {
        return Err(Error::Contract("network outputs do not match the echo count".into()));
    }
    if coords.is_empty() {
        return Ok(0.0);
    }
    let m = coords.len() as f64;
    let passes = coords
        .par_chunks(REG_CHUNK)
        .map(|c| net.forward(coords_matrix(c).view()))
        .collect::<Result<Vec<_>>>()?;
    let eps: Vec<f64> = (0..n)
        .map(|i| LOG_EPS_REL * median(passes.iter().flat_map(|(o, _)| o.column(i).to_vec()).collect()))
        .collect();
    let a = sys.residual_matrix();
    let want_grad = grad.is_some();
    let parts = passes
        .par_iter()
        .map(|(out, tape)| -> Result<(f64, Vec<f64>)> {
            let mut sum = 0.0;
            let mut cot = Array2::zeros(out.dim());
            let mut y = vec![0.0; n];
            let mut ay = vec![0.0; n];
            for r in 0..out.nrows() {
                for i in 0..n {
                    y[i] = (out[(r, i)] + eps[i]).ln();
                }
                sys.apply_residual(&y, &mut ay);
                sum += ay.iter().map(|v| v * v).sum::<f64>();
                if want_grad {
                    for i in 0..n {
                        let dy: f64 = (0..n).map(|q| a[(q, i)] * ay[q]).sum::<f64>() * 2.0 / m;
                        cot[(r, i)] = alpha * dy / (out[(r, i)] + eps[i]);
                    }
                }
            }
            let mut g = Vec::new();
            if want_grad {
                g = vec![0.0; net.num_params()];
                net.backward_into(tape, cot.view(), &mut g)?;
            }
            Ok((sum, g))
        })
        .collect::<Vec<_>>();
    let mut total = 0.0;
    let mut grad = grad;
    for p in parts {
        let (s, g) = p?;
        total += s;
        if let Some(acc) = grad.as_deref_mut() {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }
    Ok(total / m)
}

/// `R_T2`: mean over `coords` (normalized) of `‖A·log(f(x) + ε)‖²`.
pub fn regularizer_batch(net: &SirenNetwork, coords: &[Vec3], sys: &T2FitSystem) -> Result<f64> {
    regularizer_impl(net, coords, sys, 0.0, None)
}

/// Evaluate the echo `te` at every voxel centre of `grid`.
pub fn render_volume(model: &ReconModel, grid: &Grid, te: usize) -> Result<Volume> {
    if te >= model.num_tes {
        return Err(Error::Contract(format!("echo index {te} out of range")));
    }
    let (ni, ch) = model.sr_route(te);
    let net = &model.sr_nets[ni];
    let (lin, off) = model.normalization();
    let coords: Vec<Vec3> = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.ijk(idx);
            lin * grid.world_from_voxel(Vec3::new(i as f64, j as f64, k as f64)) + off
        })
        .collect();
    let parts = coords
        .par_chunks(RENDER_CHUNK)
        .map(|c| net.predict(coords_matrix(c).view()).map(|o| o.column(ch).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let data = parts.into_iter().flatten().map(|v| (v * model.intensity_scale).max(f64::MIN_POSITIVE)).collect();
    Volume::new(grid.clone(), data, Semantics::Intensity)
}
