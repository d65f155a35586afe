mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2forge::acquisition::{simulate_study, AcquisitionConfig, DropoutSpec, MotionSpec};
use t2forge::error::Error;
use t2forge::geometry::{Grid, RigidPose, Vec3};
use t2forge::neural::{OutputActivation, SirenNetwork};
use t2forge::phantom::{Phantom, PhantomSpec};
use t2forge::recon::{
    data_loss, regularizer_batch, render_volume, simulate_slice_pixel, train, ReconConfig, ReconModel,
    SliceCalibration, SliceState, Variant,
};
use t2forge::relaxometry::build_system;

fn ln_softplus_inverse(v: f64) -> f64 {
    (v.exp() - 1.0).ln()
}

/// Network whose every output channel is the constant `values[c]`.
fn constant_net(values: &[f64]) -> SirenNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = SirenNetwork::new(&[3, 8, values.len()], 30.0, OutputActivation::Softplus, &mut rng).unwrap();
    net.zero_output_layer();
    for (b, v) in net.output_bias_mut().iter_mut().zip(values) {
        *b = ln_softplus_inverse(*v);
    }
    net
}

fn random_net(outputs: usize, seed: u64) -> SirenNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SirenNetwork::new(&[3, 16, 16, outputs], 30.0, OutputActivation::Softplus, &mut rng).unwrap()
}

fn coords(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            Vec3::new((7.0 * t).sin() * 0.9, (11.0 * t).cos() * 0.9, 2.0 * t - 1.0)
        })
        .collect()
}

#[test]
fn data_loss_worked_examples() {
    assert_eq!(data_loss(&[0, 1], &[1.0, 1.0], &[2.0, 3.0], &[2.0, 3.0], 2), 0.0);
    assert_eq!(data_loss(&[0, 0], &[1.0, 1.0], &[1.0, 3.0], &[0.0, 0.0], 1), 2.0);
    // echo 0 mean error 1, echo 1 mean error 3
    assert_eq!(data_loss(&[0, 0, 1], &[1.0, 1.0, 1.0], &[1.0, -1.0, 3.0], &[0.0, 0.0, 0.0], 2), 2.0);
    // ω-weighted: (1·1 + 3·5) / 4
    assert_eq!(data_loss(&[0, 0], &[1.0, 3.0], &[1.0, 5.0], &[0.0, 0.0], 1), 4.0);
    // echoes absent from the batch do not dilute the mean
    assert_eq!(data_loss(&[2, 2], &[1.0, 1.0], &[1.0, 3.0], &[0.0, 0.0], 3), 2.0);
}

proptest! {
    #[test]
    fn data_loss_ignores_sample_order(
        rows in prop::collection::vec((0usize..3, 0.01f64..1.0, -5.0f64..5.0, -5.0f64..5.0), 1..40),
        rot in 0usize..40,
    ) {
        let split = |r: &[(usize, f64, f64, f64)]| {
            (r.iter().map(|x| x.0).collect::<Vec<_>>(), r.iter().map(|x| x.1).collect::<Vec<_>>(),
             r.iter().map(|x| x.2).collect::<Vec<_>>(), r.iter().map(|x| x.3).collect::<Vec<_>>())
        };
        let (t, w, p, y) = split(&rows);
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        let (t2, w2, p2, y2) = split(&shuffled);
        let a = data_loss(&t, &w, &p, &y, 3);
        let b = data_loss(&t2, &w2, &p2, &y2, 3);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn data_loss_scales_with_residuals(
        rows in prop::collection::vec((0usize..2, 0.01f64..1.0, -5.0f64..5.0), 1..30),
        c in 0.1f64..10.0,
    ) {
        let t: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let pc: Vec<f64> = p.iter().map(|v| v * c).collect();
        let zero = vec![0.0; rows.len()];
        let a = data_loss(&t, &w, &p, &zero, 2);
        let b = data_loss(&t, &w, &pc, &zero, 2);
        prop_assert!((b - c * a).abs() <= 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn slice_pixel_of_constant_volume() {
    let grid = Grid::centered_cube(8, 2.0).unwrap();
    let net = constant_net(&[0.7, 1.9]);
    let offsets = [Vec3::new(0.3, -0.2, 1.0), Vec3::new(-0.5, 0.1, -2.0), Vec3::zeros()];
    let mut state = SliceState {
        pose: RigidPose::new([0.1, -0.05, 0.2], [1.0, 0.0, -2.0]),
        calib: SliceCalibration { sigma: 1.0, omega: 0.5 },
    };
    let p = Vec3::new(1.0, 2.0, -3.0);
    let v = simulate_slice_pixel(&net, 1, &state, p, &offsets, &grid).unwrap();
    assert!((v - 1.9).abs() < 1e-12);
    state.calib.sigma = 2.0;
    let v2 = simulate_slice_pixel(&net, 1, &state, p, &offsets, &grid).unwrap();
    assert!((v2 - 2.0 * v).abs() < 1e-12);
    assert!(matches!(simulate_slice_pixel(&net, 0, &state, p, &[], &grid), Err(Error::Contract(_))));
}

#[test]
fn slice_pixel_averages_psf_samples() {
    let grid = Grid::centered_cube(8, 2.0).unwrap();
    let net = random_net(1, 4);
    let state = SliceState { pose: RigidPose::identity(), calib: SliceCalibration { sigma: 1.0, omega: 1.0 } };
    let p = Vec3::new(0.5, -1.0, 2.0);
    let offsets = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -1.5)];
    let pair = simulate_slice_pixel(&net, 0, &state, p, &offsets, &grid).unwrap();
    let a = simulate_slice_pixel(&net, 0, &state, p, &offsets[..1], &grid).unwrap();
    let b = simulate_slice_pixel(&net, 0, &state, p, &offsets[1..], &grid).unwrap();
    assert!((pair - 0.5 * (a + b)).abs() < 1e-12);
    // a pure translation of the slice equals shifting every PSF sample
    let moved = SliceState { pose: RigidPose::new([0.0; 3], [0.4, 0.0, -0.6]), ..state };
    let shifted: Vec<Vec3> = offsets.iter().map(|u| u + Vec3::new(0.4, 0.0, -0.6)).collect();
    let m = simulate_slice_pixel(&net, 0, &moved, p, &offsets, &grid).unwrap();
    let s = simulate_slice_pixel(&net, 0, &state, p, &shifted, &grid).unwrap();
    assert!((m - s).abs() < 1e-12);
}

#[test]
fn regularizer_vanishes_on_exact_decay() {
    let tes = [220.0, 500.0, 690.0];
    let sys = build_system(&tes).unwrap();
    let values: Vec<f64> = tes.iter().map(|te| 87.0 * (-te / 310.0f64).exp()).collect();
    let r = regularizer_batch(&constant_net(&values), &coords(50), &sys).unwrap();
    assert!(r.abs() < 1e-10, "{r}");
}

#[test]
fn regularizer_is_zero_for_two_echoes() {
    let sys = build_system(&[100.0, 300.0]).unwrap();
    let r = regularizer_batch(&random_net(2, 5), &coords(40), &sys).unwrap();
    assert!(r.abs() < 1e-20, "{r}");
}

#[test]
fn regularizer_ignores_decay_shaped_rescaling() {
    let tes = [114.0, 200.0, 299.0, 400.0];
    let sys = build_system(&tes).unwrap();
    let base = [3.0, 1.0, 2.5, 0.4];
    let r0 = regularizer_batch(&constant_net(&base), &coords(10), &sys).unwrap();
    assert!(r0 > 1e-3);
    for (b0, b1) in [(0.3, -0.002), (-1.0, 0.004), (2.0, 0.0)] {
        let scaled: Vec<f64> = base.iter().zip(&tes).map(|(v, te)| v * (b0 + b1 * te).exp()).collect();
        let r = regularizer_batch(&constant_net(&scaled), &coords(10), &sys).unwrap();
        assert!((r - r0).abs() < 1e-10, "{r} vs {r0}");
    }
}

#[test]
fn regularizer_checks_channel_count() {
    let sys = build_system(&[100.0, 200.0, 300.0]).unwrap();
    assert!(matches!(regularizer_batch(&random_net(2, 1), &coords(4), &sys), Err(Error::Contract(_))));
}

#[test]
fn regularized_variant_needs_two_echoes() {
    let grid = Grid::centered_cube(8, 2.0).unwrap();
    let cfg = ReconConfig::new(Variant::McReg, vec![100.0], grid.clone(), 1);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut mc = ReconConfig::new(Variant::Mc, vec![100.0, 200.0], grid, 1);
    mc.alpha = 0.5;
    assert!(matches!(mc.validate(), Err(Error::Config(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let tes = [220.0, 500.0, 690.0];
    let sys = build_system(&tes).unwrap();
    let (model, slices, batch) = common::toy_problem(Variant::McReg, &tes, &[0, 1], 3);
    let err = common::max_gradient_error(&model, &slices, &batch, Some((&sys, 0.7)));
    assert!(err < 1e-3, "relative gradient error {err}");
}

#[test]
fn gradients_through_sigma_normalization() {
    // σ of slices sharing an echo are coupled through its median: an odd
    // group (one median slice) and an even group (two averaged)
    let tes = [100.0, 300.0];
    for pattern in [&[0, 0, 0, 1][..], &[0, 0, 1, 1, 1, 1]] {
        let (model, slices, batch) = common::toy_problem(Variant::Mc, &tes, pattern, 11);
        let err = common::max_gradient_error(&model, &slices, &batch, None);
        assert!(err < 1e-3, "{pattern:?}: relative gradient error {err}");
    }
}

#[test]
fn gradients_single_contrast() {
    let tes = [100.0, 300.0];
    let (model, slices, batch) = common::toy_problem(Variant::Sc, &tes, &[0, 1, 1], 5);
    assert_eq!(model.sr_nets.len(), 2);
    let err = common::max_gradient_error(&model, &slices, &batch, None);
    assert!(err < 1e-3, "relative gradient error {err}");
}

#[test]
fn slice_states_are_median_normalized_per_echo() {
    let tes = [100.0, 300.0];
    let (model, slices, _) = common::toy_problem(Variant::Mc, &tes, &[0, 0, 1, 1, 1], 2);
    let states = model.slice_states(&slices).unwrap();
    for te in 0..2 {
        let mut s: Vec<f64> =
            slices.iter().zip(&states).filter(|(i, _)| i.te == te).map(|(_, s)| s.calib.sigma).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        assert!((median - 1.0).abs() < 1e-12);
        assert!(s.iter().any(|v| (v - 1.0).abs() > 1e-6));
    }
}

#[test]
fn fresh_slice_network_starts_at_identity() {
    let grid = Grid::centered_cube(8, 2.0).unwrap();
    let cfg = ReconConfig::new(Variant::Mc, vec![100.0, 200.0], grid, 1);
    let model = ReconModel::new(&cfg, 1, 1.0).unwrap();
    let (_, slices, _) = common::toy_problem(Variant::Mc, &[100.0, 200.0], &[0, 1], 1);
    for st in model.slice_states(&slices).unwrap() {
        assert_eq!(st.pose, RigidPose::new([0.0; 3], [0.0; 3]));
        assert!((st.calib.sigma - 1.0).abs() < 1e-12);
        assert!((st.calib.omega - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }
}

#[test]
fn render_is_deterministic_and_scaled() {
    let grid = Grid::centered_cube(6, 3.0).unwrap();
    let cfg = ReconConfig::new(Variant::Mc, vec![100.0, 200.0], grid.clone(), 4);
    let mut model = ReconModel::new(&cfg, 1, 250.0).unwrap();
    let a = render_volume(&model, &grid, 1).unwrap();
    let b = render_volume(&model, &grid, 1).unwrap();
    assert_eq!(a.data, b.data);
    model.sr_nets[0] = constant_net(&[0.2, 0.6]);
    let c = render_volume(&model, &grid, 1).unwrap();
    assert!(c.data.iter().all(|v| (v - 150.0).abs() < 1e-9));
    assert!(matches!(render_volume(&model, &grid, 2), Err(Error::Contract(_))));
}

fn tiny_study(seed: u64) -> (Vec<t2forge::acquisition::SliceStack>, Grid) {
    let mut spec = PhantomSpec::desk_default(seed);
    spec.grid = Grid::centered_cube(16, 8.0).unwrap();
    let ph = Phantom::generate(&spec).unwrap();
    let tes = [220.0, 500.0, 690.0];
    let gt = ph.ground_truth(&tes).unwrap();
    let acq = AcquisitionConfig {
        in_plane: [8.0, 8.0],
        thickness: 16.0,
        motion: MotionSpec::mild(),
        dropout: DropoutSpec::default_stand_in(),
        psf_samples: 4,
        ..AcquisitionConfig::desk_default(seed)
    };
    (simulate_study(&gt, &tes, 2, &acq).unwrap(), spec.grid)
}

fn tiny_config(variant: Variant, grid: Grid) -> ReconConfig {
    let mut c = ReconConfig::new(variant, vec![220.0, 500.0, 690.0], grid, 8);
    c.epochs = 3;
    c.warmup_epochs = 1;
    c.steps_per_epoch = 3;
    c.batch_size = 96;
    c.psf_samples = 2;
    c.reg_batch = 64;
    c.sr_hidden = vec![16, 16];
    c.slice_hidden = vec![8];
    c
}

#[test]
fn unweighted_regularizer_reproduces_multi_contrast_bitwise() {
    let (stacks, grid) = tiny_study(2);
    let mc = train(&stacks, tiny_config(Variant::Mc, grid.clone())).unwrap();
    let mut cfg = tiny_config(Variant::McReg, grid);
    cfg.alpha = 0.0;
    let reg = train(&stacks, cfg).unwrap();
    for (a, b) in mc.volumes.iter().zip(&reg.volumes) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(mc.model.sr_nets[0].params(), reg.model.sr_nets[0].params());
    assert_eq!(mc.model.slice_nets[0].params(), reg.model.slice_nets[0].params());
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let (stacks, grid) = tiny_study(3);
    let mut cfg = tiny_config(Variant::McReg, grid);
    cfg.epochs = 6;
    let a = train(&stacks, cfg.clone()).unwrap();
    let b = train(&stacks, cfg).unwrap();
    assert_eq!(a.volumes, b.volumes);
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|h| h.data.is_finite() && h.reg.is_finite()));
    assert!(a.history.last().unwrap().data < a.history[0].data);
}

#[test]
fn single_contrast_uses_one_network_per_echo() {
    let (stacks, grid) = tiny_study(4);
    let r = train(&stacks, tiny_config(Variant::Sc, grid)).unwrap();
    assert_eq!(r.model.sr_nets.len(), 3);
    assert_eq!(r.model.slice_nets.len(), 3);
    assert!(r.model.sr_nets.iter().all(|n| n.output_dim() == 1));
    assert_eq!(r.slices.len(), stacks.iter().map(|s| s.slices.len()).sum::<usize>());
}
