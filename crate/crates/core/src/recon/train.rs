use rand::Rng;

use super::model::{ReconModel, Sample, SampleBatch, SliceCalibration, SliceInfo};
use super::{render_volume, Evaluation, ReconConfig, SliceEncoding, Variant};
use crate::acquisition::{sample_psf_offsets, PsfModel, SliceStack, StackGeometry};
use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3, Volume};
use crate::neural::Adam;
use crate::relaxometry::{build_system, T2FitSystem};
use crate::rng::{self, domain};

/// Intensities are normalized by this quantile of all measured pixels.
const SCALE_QUANTILE: f64 = 0.999;
/// Pixels brighter than this fraction of the scale outline the foreground
/// box used for regularizer coordinates.
const FOREGROUND_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub data: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedSlice {
    pub stack: usize,
    pub index_in_stack: usize,
    pub te: usize,
    pub pose: RigidPose,
    pub calib: SliceCalibration,
    pub empty: bool,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    /// One HR volume per echo time, on the configured grid.
    pub volumes: Vec<Volume>,
    pub slices: Vec<EstimatedSlice>,
    pub history: Vec<EpochLoss>,
    pub model: ReconModel,
}

pub struct Trainer {
    config: ReconConfig,
    stacks: Vec<SliceStack>,
    model: ReconModel,
    slices: Vec<SliceInfo>,
    /// Per echo: every `(slice, pixel)` available for sampling.
    pools: Vec<Vec<(u32, u32)>>,
    /// Per echo: the non-empty slices.
    slice_pools: Vec<Vec<u32>>,
    psfs: Vec<PsfModel>,
    fit: Option<T2FitSystem>,
    /// Normalized-coordinate box for regularizer samples.
    reg_box: (Vec3, Vec3),
    adam_sr: Vec<Adam>,
    adam_slice: Vec<Adam>,
    history: Vec<EpochLoss>,
    steps_per_epoch: usize,
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    *v.select_nth_unstable_by(k, f64::total_cmp).1
}

impl Trainer {
    pub fn new(stacks: &[SliceStack], config: ReconConfig) -> Result<Self> {
        config.validate()?;
        let n = config.tes.len();
        let mut stack_te = Vec::with_capacity(stacks.len());
        for st in stacks {
            let te = config
                .tes
                .iter()
                .position(|&t| (t - st.te).abs() <= 1e-6 * t.abs().max(1.0))
                .ok_or_else(|| Error::Data(format!("stack {} has TE {} ms, not a configured echo time", st.stack_index, st.te)))?;
            stack_te.push(te);
        }

        // one slice network overall, or one per echo for SC
        let num_slice_nets = if config.variant == Variant::Sc { n } else { 1 };
        let net_of_stack: Vec<usize> =
            stack_te.iter().map(|&te| if config.variant == Variant::Sc { te } else { 0 }).collect();
        let mut slices_of_net = vec![0usize; num_slice_nets];
        for (s, st) in stacks.iter().enumerate() {
            slices_of_net[net_of_stack[s]] += st.slices.len();
        }
        let mut slices = Vec::new();
        let mut rows = vec![0usize; num_slice_nets];
        for net in 0..num_slice_nets {
            let mine: Vec<usize> = (0..stacks.len()).filter(|&s| net_of_stack[s] == net).collect();
            for (local, &s) in mine.iter().enumerate() {
                let st = &stacks[s];
                let ns = st.slices.len();
                for sl in &st.slices {
                    let unit = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
                    let encoding = match config.slice_encoding {
                        SliceEncoding::Index => vec![local as f64, sl.index_in_stack as f64],
                        SliceEncoding::Unit => vec![unit(local, mine.len()), unit(sl.index_in_stack, ns)],
                        SliceEncoding::OneHot => {
                            let mut e = vec![0.0; slices_of_net[net]];
                            e[rows[net]] = 1.0;
                            e
                        }
                    };
                    slices.push(SliceInfo {
                        stack: s,
                        index_in_stack: sl.index_in_stack,
                        te: stack_te[s],
                        net,
                        row: rows[net],
                        encoding,
                        pivot: slice_center(&st.geometry, sl.index_in_stack),
                        empty: sl.empty,
                    });
                    rows[net] += 1;
                }
            }
        }

        let all: Vec<f64> = slices
            .iter()
            .filter(|s| !s.empty)
            .flat_map(|s| stacks[s.stack].slices[s.index_in_stack].pixels.iter().copied())
            .collect();
        let scale = quantile(all, SCALE_QUANTILE);
        if !(scale > 0.0) {
            return Err(Error::Data("measured slices carry no signal".into()));
        }

        let mut pools = vec![Vec::new(); n];
        let mut slice_pools = vec![Vec::new(); n];
        for (k, s) in slices.iter().enumerate() {
            if s.empty {
                continue;
            }
            slice_pools[s.te].push(k as u32);
            let count = stacks[s.stack].slices[s.index_in_stack].pixels.len();
            pools[s.te].extend((0..count as u32).map(|p| (k as u32, p)));
        }
        if let Some(te) = pools.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("no usable slices for TE {} ms", config.tes[te])));
        }
        let psfs = stacks.iter().map(|s| s.geometry.psf()).collect::<Result<Vec<_>>>()?;
        let fit = if config.uses_regularizer() { Some(build_system(&config.tes)?) } else { None };

        let slice_inputs: Vec<usize> = match config.slice_encoding {
            SliceEncoding::OneHot => slices_of_net,
            SliceEncoding::Index | SliceEncoding::Unit => vec![2; num_slice_nets],
        };
        let model = ReconModel::with_slice_inputs(&config, &slice_inputs, scale)?;
        let reg_box = foreground_box(&model, stacks, &slices, scale);
        let total: usize = pools.iter().map(Vec::len).sum();
        let steps_per_epoch =
            if config.steps_per_epoch > 0 { config.steps_per_epoch } else { total.div_ceil(config.batch_size) };
        let adam_sr = model.sr_nets.iter().map(|m| Adam::new(m.num_params())).collect();
        let adam_slice = model.slice_nets.iter().map(|m| Adam::new(m.num_params())).collect();
        Ok(Self {
            config,
            stacks: stacks.to_vec(),
            model,
            slices,
            pools,
            slice_pools,
            psfs,
            fit,
            reg_box,
            adam_sr,
            adam_slice,
            history: Vec::new(),
            steps_per_epoch,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn model(&self) -> &ReconModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ReconModel {
        &mut self.model
    }

    pub fn slices(&self) -> &[SliceInfo] {
        &self.slices
    }

    pub fn history(&self) -> &[EpochLoss] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn fit_system(&self) -> Option<&T2FitSystem> {
        self.fit.as_ref()
    }

    /// The batch drawn at `(epoch, step)`; a pure function of the seed.
    pub fn sample_batch(&self, epoch: usize, step: usize) -> SampleBatch {
        let cfg = &self.config;
        let n = cfg.tes.len();
        let k = cfg.psf_samples;
        let mut rng = rng::stream(cfg.seed, domain::BATCH, epoch as u64, step as u64);
        let mut samples = Vec::with_capacity(cfg.batch_size);
        let push = |slice: usize, pixel: usize, samples: &mut Vec<Sample>| {
            let info = &self.slices[slice];
            let stack = &self.stacks[info.stack];
            samples.push(Sample {
                slice,
                world: stack.geometry.pixel_world_flat(info.index_in_stack, pixel),
                target: stack.slices[info.index_in_stack].pixels[pixel] / self.model.intensity_scale,
            });
        };
        for (te, pool) in self.pools.iter().enumerate() {
            let count = cfg.batch_size / n + usize::from(te < cfg.batch_size % n);
            if cfg.slices_per_step == 0 {
                for _ in 0..count {
                    let (slice, pixel) = pool[rng.gen_range(0..pool.len())];
                    push(slice as usize, pixel as usize, &mut samples);
                }
                continue;
            }
            // a few whole-slice groups per step give each chosen pose a
            // coherent gradient
            let group = cfg.slices_per_step.min(count);
            let candidates = &self.slice_pools[te];
            for g in 0..group {
                let slice = candidates[rng.gen_range(0..candidates.len())] as usize;
                let info = &self.slices[slice];
                let npx = self.stacks[info.stack].slices[info.index_in_stack].pixels.len();
                for _ in 0..count / group + usize::from(g < count % group) {
                    push(slice, rng.gen_range(0..npx), &mut samples);
                }
            }
        }
        let mut prng = rng::stream(cfg.seed, domain::PSF, epoch as u64, step as u64);
        let mut offsets = Vec::with_capacity(samples.len() * k);
        for s in &samples {
            let stack = self.slices[s.slice].stack;
            let frame = self.stacks[stack].geometry.frame();
            offsets.extend(sample_psf_offsets(&self.psfs[stack], k, &mut prng).into_iter().map(|u| frame * u));
        }
        let mut reg_coords = Vec::new();
        if self.fit.is_some() {
            let mut rrng = rng::stream(cfg.seed, domain::REG_COORDS, epoch as u64, step as u64);
            let (lo, hi) = self.reg_box;
            reg_coords = (0..cfg.reg_batch)
                .map(|_| Vec3::from_fn(|a, _| if hi[a] > lo[a] { rrng.gen_range(lo[a]..hi[a]) } else { lo[a] }))
                .collect();
        }
        SampleBatch { samples, offsets, psf_samples: k, reg_coords }
    }

    pub fn evaluate(&self, batch: &SampleBatch, with_grads: bool, slice_grads: bool) -> Result<Evaluation> {
        let fit = self.fit.as_ref().map(|f| (f, self.config.alpha));
        self.model.evaluate(&self.slices, batch, fit, with_grads, slice_grads)
    }

    fn slice_trainable(&self, epoch: usize) -> bool {
        epoch >= self.config.warmup_epochs && self.config.lr_slice > 0.0
    }

    /// One optimizer step. On a non-finite loss or gradient nothing is
    /// updated, so the model keeps its last finite state.
    pub fn step(&mut self, epoch: usize, step: usize) -> Result<(f64, f64)> {
        let batch = self.sample_batch(epoch, step);
        let slice_on = self.slice_trainable(epoch);
        let ev = self.evaluate(&batch, true, slice_on)?;
        let grads = ev.grads.expect("gradients requested");
        if !ev.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("data loss {}, regularizer {}", ev.data_loss, ev.reg_loss),
            });
        }
        for ((net, adam), g) in self.model.sr_nets.iter_mut().zip(&mut self.adam_sr).zip(&grads.sr) {
            adam.step(net.params_mut(), g, self.config.lr_sr)?;
        }
        if slice_on {
            for ((net, adam), g) in self.model.slice_nets.iter_mut().zip(&mut self.adam_slice).zip(&grads.slice) {
                adam.step(net.params_mut(), g, self.config.lr_slice)?;
            }
        }
        Ok((ev.data_loss, ev.reg_loss))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.history.len();
        let (mut data, mut reg) = (0.0, 0.0);
        for step in 0..self.steps_per_epoch {
            let (d, r) = self.step(epoch, step)?;
            data += d;
            reg += r;
        }
        let m = self.steps_per_epoch as f64;
        let rec = EpochLoss { epoch, data: data / m, reg: reg / m };
        log::info!("epoch {epoch}: data {:.6} reg {:.6}", rec.data, rec.reg);
        self.history.push(rec);
        Ok(rec)
    }

    /// Run the remaining configured epochs.
    pub fn train(&mut self) -> Result<()> {
        while self.history.len() < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn estimated_slices(&self) -> Result<Vec<EstimatedSlice>> {
        let states = self.model.slice_states(&self.slices)?;
        Ok(self
            .slices
            .iter()
            .zip(states)
            .map(|(s, st)| EstimatedSlice {
                stack: s.stack,
                index_in_stack: s.index_in_stack,
                te: s.te,
                pose: st.pose,
                calib: st.calib,
                empty: s.empty,
            })
            .collect())
    }

    pub fn render(&self) -> Result<Vec<Volume>> {
        (0..self.config.tes.len()).map(|te| render_volume(&self.model, &self.config.grid, te)).collect()
    }

    pub fn finish(self) -> Result<ReconResult> {
        Ok(ReconResult {
            volumes: self.render()?,
            slices: self.estimated_slices()?,
            history: self.history,
            model: self.model,
        })
    }
}

fn foreground_box(model: &ReconModel, stacks: &[SliceStack], slices: &[SliceInfo], scale: f64) -> (Vec3, Vec3) {
    let (lin, off) = model.normalization();
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for s in slices.iter().filter(|s| !s.empty) {
        let st = &stacks[s.stack];
        for (p, &v) in st.slices[s.index_in_stack].pixels.iter().enumerate() {
            if v > FOREGROUND_FRACTION * scale {
                let z = lin * st.geometry.pixel_world_flat(s.index_in_stack, p) + off;
                lo = lo.inf(&z);
                hi = hi.sup(&z);
            }
        }
    }
    if !lo.iter().all(|v| v.is_finite()) {
        return (Vec3::repeat(-1.0), Vec3::repeat(1.0));
    }
    let g = &model.grid;
    let pad = Vec3::from_fn(|a, _| 2.0 / (g.dims[a] as f64 - 1.0).max(1.0));
    ((lo - pad).sup(&Vec3::repeat(-1.0)), (hi + pad).inf(&Vec3::repeat(1.0)))
}

/// Build a trainer, run every epoch and render the result.
pub fn train(stacks: &[SliceStack], config: ReconConfig) -> Result<ReconResult> {
    let mut t = Trainer::new(stacks, config)?;
    t.train()?;
    t.finish()
}

fn slice_center(geometry: &StackGeometry, s: usize) -> Vec3 {
    let [nu, nv] = geometry.dims;
    (geometry.pixel_world(s, 0, 0) + geometry.pixel_world(s, nu - 1, nv - 1)) / 2.0
}
