//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use t2forge::geometry::{RigidPose, Vec3};
use t2forge::neural::{OutputActivation, SirenNetwork};
use t2forge::phantom::signal;
use t2forge::pipeline::{
    load_stacks, load_truth_poses, read_poses, run_ablation, run_acquire, run_evaluate, run_fit, run_phantom,
    run_reconstruct, AblationPlan, MotionLevel, PipelineConfig, Workdir,
};
use t2forge::recon::{regularizer_batch, Variant};
use t2forge::relaxometry::{build_system, fit_voxel, residual_energy};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_abs(m: impl IntoIterator<Item = f64>) -> f64 {
    m.into_iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn projection_algebra() -> Outcome {
    let tes = [220.0, 500.0, 690.0];
    let sys = build_system(&tes).unwrap();
    let a = sys.residual_matrix().clone();
    let n = tes.len();
    let mut sq_plus = 0.0f64;
    let mut ad = 0.0f64;
    let mut asym = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let sq: f64 = (0..n).map(|k| a[(r, k)] * a[(k, c)]).sum();
            sq_plus = sq_plus.max((sq + a[(r, c)]).abs());
            asym = asym.max((a[(r, c)] - a[(c, r)]).abs());
        }
        // columns of the design: ones and the echo times
        ad = ad.max((0..n).map(|k| a[(r, k)]).sum::<f64>().abs());
        ad = ad.max((0..n).map(|k| a[(r, k)] * tes[k]).sum::<f64>().abs());
    }
    let two = build_system(&[220.0, 500.0]).unwrap();
    let two_max = max_abs(two.residual_matrix().iter().copied());
    let pass = sq_plus < 1e-10 && ad < 1e-10 && asym == 0.0 && two_max < 1e-10;
    outcome(pass, format!("|A²+A|={sq_plus:.1e} |AD|={ad:.1e} asym={asym:.1e} |A_2TE|={two_max:.1e}"))
}

fn ols_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 3 + i % 3;
        let mut tes: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..800.0)).collect();
        tes.sort_by(f64::total_cmp);
        tes.dedup_by(|a, b| (*a - *b).abs() < 1.0);
        if tes.len() < 3 {
            tes = vec![100.0, 300.0, 500.0];
        }
        let m0 = rng.gen_range(1.0..200.0);
        let t2 = rng.gen_range(50.0..1500.0);
        let sys = build_system(&tes).unwrap();
        let s: Vec<f64> = tes.iter().map(|&te| signal(m0, t2, te).unwrap()).collect();
        let fit = fit_voxel(&sys, &s).unwrap();
        worst = worst.max(((fit.m0 - m0) / m0).abs()).max(((fit.t2 - t2) / t2).abs());
    }
    outcome(worst < 1e-9, format!("worst relative error {worst:.2e} over 1000 voxels"))
}

/// Minimum of ‖β0 + β1·TE − y‖² found without matrices: for fixed β1 the
/// best β0 is the mean residual, and the profile in β1 is a parabola,
/// bracketed and narrowed by golden-section search.
fn brute_force_residual(tes: &[f64], y: &[f64]) -> f64 {
    let cost = |b1: f64| {
        let b0 = y.iter().zip(tes).map(|(y, t)| y - b1 * t).sum::<f64>() / y.len() as f64;
        y.iter().zip(tes).map(|(y, t)| (b0 + b1 * t - y).powi(2)).sum::<f64>()
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if cost(a) < cost(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    cost(0.5 * (lo + hi))
}

fn residual_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let tes = [220.0, 500.0, 690.0, 900.0];
    let sys = build_system(&tes).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s: Vec<f64> = (0..tes.len()).map(|_| rng.gen_range(0.5..150.0)).collect();
        let y: Vec<f64> = s.iter().map(|v| v.ln()).collect();
        let got = residual_energy(&sys, &s).unwrap();
        worst = worst.max((got - brute_force_residual(&tes, &y)).abs());
    }
    outcome(worst < 1e-6, format!("worst deviation {worst:.2e} over 100 signals"))
}

fn gradient_fidelity() -> Outcome {
    let tes = [220.0, 500.0, 690.0];
    let sys = build_system(&tes).unwrap();
    let (model, slices, batch) = common::toy_problem(Variant::McReg, &tes, &[0, 1], 3);
    let err = common::max_gradient_error(&model, &slices, &batch, Some((&sys, 0.7)));
    outcome(err < 1e-3, format!("max relative error {err:.2e} (two 8x8 slices, 2 TEs data, 3 TEs reg)"))
}

fn constant_net(values: &[f64]) -> SirenNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = SirenNetwork::new(&[3, 16, values.len()], 30.0, OutputActivation::Softplus, &mut rng).unwrap();
    net.zero_output_layer();
    for (b, v) in net.output_bias_mut().iter_mut().zip(values) {
        *b = (v.exp() - 1.0).ln();
    }
    net
}

fn regularizer_physics() -> Outcome {
    let tes = [220.0, 500.0, 690.0];
    let sys = build_system(&tes).unwrap();
    let coords: Vec<Vec3> = (0..64).map(|i| Vec3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.5)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0.0f64;
    let mut shift = 0.0f64;
    for _ in 0..20 {
        let m0 = rng.gen_range(1.0..200.0);
        let t2 = rng.gen_range(50.0..1500.0);
        let decay: Vec<f64> = tes.iter().map(|te| m0 * (-te / t2).exp()).collect();
        exact = exact.max(regularizer_batch(&constant_net(&decay), &coords, &sys).unwrap().abs());

        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let (b0, b1) = (rng.gen_range(-2.0..2.0), rng.gen_range(-0.004..0.004));
        let shifted: Vec<f64> = y.iter().zip(&tes).map(|(y, t)| y + b0 + b1 * t).collect();
        let base = regularizer_batch(&constant_net(&y.iter().map(|v| v.exp()).collect::<Vec<_>>()), &coords, &sys).unwrap();
        let moved =
            regularizer_batch(&constant_net(&shifted.iter().map(|v| v.exp()).collect::<Vec<_>>()), &coords, &sys).unwrap();
        shift = shift.max((base - moved).abs());
        let e0 = residual_energy(&sys, &y.iter().map(|v| v.exp()).collect::<Vec<_>>()).unwrap();
        let e1 = residual_energy(&sys, &shifted.iter().map(|v| v.exp()).collect::<Vec<_>>()).unwrap();
        shift = shift.max((e0 - e1).abs());
    }
    outcome(exact < 1e-10 && shift < 1e-10, format!("R_T2 on decays {exact:.1e}, shift change {shift:.1e}"))
}

fn desk_config(seed: u64, motion: MotionLevel, variant: Variant) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.run.seed = seed;
    c.acquisition.motion = motion;
    c.reconstruction.variant = variant;
    c
}

/// Fraction of non-empty slices whose estimated pose is within 2° and one
/// in-plane voxel of the truth.
fn pose_recovery(wd: &Workdir, cfg: &PipelineConfig) -> (usize, usize) {
    let truth: BTreeMap<(usize, usize), RigidPose> = load_truth_poses(wd)
        .unwrap()
        .into_iter()
        .map(|t| ((t.stack_index, t.slice), RigidPose::new(t.euler, t.translation)))
        .collect();
    let stacks = load_stacks(wd, &cfg.run.tes, cfg.recon_stacks_per_te()).unwrap();
    let rows = read_poses(&wd.recon_dir(&cfg.recon_name()).join("poses_est.txt")).unwrap();
    let (mut ok, mut total) = (0, 0);
    for r in rows.iter().filter(|r| !r.empty) {
        let t = truth[&(r.stack_index, r.slice)];
        let est = RigidPose::new(r.euler, r.translation);
        let geo = &stacks.iter().find(|s| s.stack_index == r.stack_index).unwrap().geometry;
        let frame = geo.frame();
        let d = est.translation_vec() - t.translation_vec();
        let du = frame.column(0).dot(&d).abs();
        let dv = frame.column(1).dot(&d).abs();
        total += 1;
        if est.rotation_distance(&t).to_degrees() < 2.0 && du < geo.in_plane_spacing[0] && dv < geo.in_plane_spacing[1] {
            ok += 1;
        }
    }
    (ok, total)
}

fn motion_recovery(root: &Path) -> Outcome {
    let mut mild = desk_config(1, MotionLevel::Mild, Variant::Mc);
    mild.acquisition.noise_sigma = 0.0;
    mild.acquisition.dropout_probability = 0.0;
    let wd = Workdir::new(root.join("mild"));
    let t = Instant::now();
    let mild_result = (|| {
        run_phantom(&mild, &wd)?;
        run_acquire(&mild, &wd)?;
        run_reconstruct(&mild, &wd)
    })();
    let mild_time = t.elapsed();
    let (ok, total) = match mild_result {
        Ok(_) => pose_recovery(&wd, &mild),
        Err(e) => return outcome(false, format!("mild run failed: {e}")),
    };
    let frac = ok as f64 / total.max(1) as f64;

    let severe = desk_config(1, MotionLevel::Severe, Variant::Mc);
    let wd = Workdir::new(root.join("severe"));
    let t = Instant::now();
    let severe_result = (|| {
        run_phantom(&severe, &wd)?;
        run_acquire(&severe, &wd)?;
        run_reconstruct(&severe, &wd)?;
        run_fit(&severe, &wd)?;
        run_evaluate(&severe, &wd)
    })();
    let severe_time = t.elapsed();
    let limit = Duration::from_secs(20 * 60);
    match severe_result {
        Ok(report) => outcome(
            frac >= 0.9 && report.mean_ssim >= 0.6 && mild_time <= limit && severe_time <= limit,
            format!(
                "mild: {ok}/{total} slices recovered ({:.1}%, {:.0}s); severe: finite, SSIM {:.3} ({:.0}s)",
                100.0 * frac,
                mild_time.as_secs_f64(),
                report.mean_ssim,
                severe_time.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("mild {ok}/{total}; severe run failed: {e}")),
    }
}

fn table2_ordering(root: &Path) -> Outcome {
    let base = PipelineConfig::default();
    let plan = AblationPlan::preset("table2-desk", &base).unwrap();
    let t = Instant::now();
    let report = match run_ablation(&base, &plan, root) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let chain = report.ordering("MAE_WM MC_Reg <= MC <= SC @ 3 stacks/TE").map_or(0, |o| o.holds);
    let ssim = report.ordering("SSIM MC_Reg >= SC @ 3 stacks/TE").map_or(0, |o| o.holds);
    let mean = |v: Variant, f: fn(&t2forge::pipeline::AblationRow) -> Option<f64>| {
        let vals = report.values(3, v, f);
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    outcome(
        chain >= 4 && ssim >= 4 && secs <= 3600.0,
        format!(
            "MAE_WM chain {chain}/5, SSIM MC_Reg>=SC {ssim}/5; mean MAE_WM SC {:.2} MC {:.2} MC_Reg {:.2} ({:.0}s)",
            mean(Variant::Sc, |r| r.mae_wm()),
            mean(Variant::Mc, |r| r.mae_wm()),
            mean(Variant::McReg, |r| r.mae_wm()),
            secs
        ),
    )
}

fn table3_sparse(root: &Path) -> Outcome {
    let base = PipelineConfig::default();
    let full = AblationPlan::preset("table3-desk", &base).unwrap();
    let plan = AblationPlan {
        name: "table3-sparse".into(),
        cells: vec![(1, Variant::Mc), (1, Variant::McReg)],
        ..full
    };
    let t = Instant::now();
    let report = match run_ablation(&base, &plan, root) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let mean = |v| {
        let s = report.values(1, v, |r| r.mean_ssim());
        (s.iter().sum::<f64>() / s.len().max(1) as f64, s.len())
    };
    let (reg, nr) = mean(Variant::McReg);
    let (mc, nm) = mean(Variant::Mc);
    let mae = report.ordering("MAE_WM MC_Reg < MC @ 1 stacks/TE").map_or(0, |o| o.holds);
    outcome(
        nr == 5 && nm == 5 && reg - mc >= 0.1 && mae >= 4 && secs <= 1800.0,
        format!("mean SSIM MC_Reg {reg:.3} vs MC {mc:.3} (gap {:.3}); MAE_WM MC_Reg<MC {mae}/5 ({secs:.0}s)", reg - mc),
    )
}

fn hash_files(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut todo = vec![dir.to_path_buf()];
    while let Some(d) = todo.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                todo.push(p);
            } else {
                let h = Sha256::digest(fs::read(&p).unwrap());
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), format!("{h:x}"));
            }
        }
    }
    out
}

fn reduction_identity(root: &Path) -> Outcome {
    let mut mc = desk_config(3, MotionLevel::Moderate, Variant::Mc);
    mc.reconstruction.epochs = 8;
    let mut reg = mc.clone();
    reg.reconstruction.variant = Variant::McReg;
    reg.reconstruction.alpha = Some(0.0);
    let wd = Workdir::new(root.join("identity"));
    let t = Instant::now();
    let run = || -> t2forge::error::Result<()> {
        run_phantom(&mc, &wd)?;
        run_acquire(&mc, &wd)?;
        run_reconstruct(&mc, &wd)?;
        run_reconstruct(&reg, &wd)?;
        Ok(())
    };
    if let Err(e) = run() {
        return outcome(false, format!("run failed: {e}"));
    }
    let a = hash_files(&wd.recon_dir(&mc.recon_name()));
    let b = hash_files(&wd.recon_dir(&reg.recon_name()));
    let compared: Vec<&String> = a.keys().filter(|k| !k.ends_with(".toml")).collect();
    let same = compared.iter().all(|k| b.get(*k) == a.get(*k));
    outcome(
        same && t.elapsed().as_secs() < 300,
        format!("{} output files compared, identical: {same} ({:.0}s)", compared.len(), t.elapsed().as_secs_f64()),
    )
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = desk_config(4, MotionLevel::Moderate, Variant::McReg);
    cfg.reconstruction.epochs = 8;
    let t = Instant::now();
    let mut trees = Vec::new();
    for name in ["det_a", "det_b"] {
        let wd = Workdir::new(root.join(name));
        let run = || -> t2forge::error::Result<()> {
            run_phantom(&cfg, &wd)?;
            run_acquire(&cfg, &wd)?;
            run_reconstruct(&cfg, &wd)?;
            run_fit(&cfg, &wd)?;
            run_evaluate(&cfg, &wd)?;
            Ok(())
        };
        if let Err(e) = run() {
            return outcome(false, format!("run failed: {e}"));
        }
        trees.push(hash_files(wd.root()));
    }
    let differing: Vec<&String> = trees[0].keys().filter(|k| trees[1].get(*k) != trees[0].get(*k)).collect();
    let pass = differing.is_empty() && trees[0].len() == trees[1].len() && t.elapsed().as_secs() < 600;
    outcome(
        pass,
        format!("{} files per run, {} differ ({:.0}s)", trees[0].len(), differing.len(), t.elapsed().as_secs_f64()),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from the libtest CLI are not
    // meaningful here; honour --list so tooling does not run everything.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("projection-operator algebra", Box::new(projection_algebra)),
        ("OLS closure", Box::new(ols_closure)),
        ("residual oracle", Box::new(residual_oracle)),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("regularizer physics", Box::new(regularizer_physics)),
        ("motion recovery", Box::new(|| motion_recovery(root))),
        ("3-stack ordering over 5 seeds", Box::new(|| table2_ordering(root))),
        ("1-stack sparse input over 5 seeds", Box::new(|| table3_sparse(root))),
        ("alpha = 0 reduction identity", Box::new(|| reduction_identity(root))),
        ("stage determinism", Box::new(|| determinism(root))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<36} {}  {} [{:.1}s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
