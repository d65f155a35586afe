#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2forge::geometry::{Grid, Vec3};
use t2forge::recon::{ReconConfig, ReconModel, Sample, SampleBatch, SliceInfo, Variant};
use t2forge::relaxometry::T2FitSystem;

/// Small model plus one 8×8 slice per entry of `slice_te`, with perturbed
/// weights so poses, σ and ω are all away from their initial values.
pub fn toy_problem(variant: Variant, tes: &[f64], slice_te: &[usize], seed: u64) -> (ReconModel, Vec<SliceInfo>, SampleBatch) {
    let grid = Grid::centered_cube(8, 2.0).unwrap();
    let mut cfg = ReconConfig::new(variant, tes.to_vec(), grid, seed);
    cfg.sr_hidden = vec![12, 12];
    cfg.slice_hidden = vec![6];
    cfg.omega0 = 3.0;
    let mut model = ReconModel::new(&cfg, 1, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for p in model.slice_nets[0].params_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    let n = slice_te.len();
    let slices: Vec<SliceInfo> = slice_te
        .iter()
        .enumerate()
        .map(|(i, &te)| SliceInfo {
            stack: i,
            index_in_stack: 0,
            te,
            net: 0,
            row: i,
            encoding: vec![i as f64 / n as f64 - 0.5, 0.3 * i as f64 - 0.2],
            pivot: Vec3::new(3.0 * i as f64 - 2.0, 1.5, -2.5),
            empty: false,
        })
        .collect();
    let k = 2;
    let mut samples = Vec::new();
    let mut offsets = Vec::new();
    for (s, _) in slices.iter().enumerate() {
        let z = -3.0 + 2.0 * s as f64;
        for j in 0..8 {
            for i in 0..8 {
                samples.push(Sample {
                    slice: s,
                    world: Vec3::new(-5.0 + 1.4 * i as f64, -5.0 + 1.4 * j as f64, z),
                    target: rng.gen_range(0.2..1.5),
                });
                for _ in 0..k {
                    offsets.push(Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)));
                }
            }
        }
    }
    let reg_coords = (0..24)
        .map(|_| Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)))
        .collect();
    (model, slices, SampleBatch { samples, offsets, psf_samples: k, reg_coords })
}

/// Largest relative deviation between the analytic gradient of the total
/// loss and central differences, over every SR and slice parameter.
pub fn max_gradient_error(model: &ReconModel, slices: &[SliceInfo], batch: &SampleBatch, fit: Option<(&T2FitSystem, f64)>) -> f64 {
    let eval = model.evaluate(slices, batch, fit, true, true).unwrap();
    let grads = eval.grads.unwrap();
    let h = 1e-6;
    let total = |m: &ReconModel| m.evaluate(slices, batch, fit, false, false).unwrap().total;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, fd: f64| {
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    };
    for ni in 0..model.sr_nets.len() {
        for p in 0..model.sr_nets[ni].num_params() {
            let mut up = model.clone();
            up.sr_nets[ni].params_mut()[p] += h;
            let mut down = model.clone();
            down.sr_nets[ni].params_mut()[p] -= h;
            check(grads.sr[ni][p], (total(&up) - total(&down)) / (2.0 * h));
        }
    }
    for ni in 0..model.slice_nets.len() {
        for p in 0..model.slice_nets[ni].num_params() {
            let mut up = model.clone();
            up.slice_nets[ni].params_mut()[p] += h;
            let mut down = model.clone();
            down.slice_nets[ni].params_mut()[p] -= h;
            check(grads.slice[ni][p], (total(&up) - total(&down)) / (2.0 * h));
        }
    }
    worst
}
