use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, TISSUE_KEYS};
use crate::acquisition::{simulate_stack, stack_index, study_layout, Orientation, SliceStack, StackGeometry};
use crate::error::{config_err, Error, Result};
use crate::geometry::Volume;
use crate::metrics::{region_t2_errors, ssim3d, EchoSsim, MetricReport, SsimOptions};
use crate::neural::SirenNetwork;
use crate::phantom::Phantom;
use crate::qvol;
use crate::recon::{EpochLoss, EstimatedSlice, ReconModel, Trainer};
use crate::relaxometry::{build_system, fit_volume, region_stats, ParameterMap, RegionStats};

/// `220` rather than `220.0`; non-integral echo times keep their decimals.
pub fn te_tag(te: f64) -> String {
    if te.fract() == 0.0 {
        format!("{}", te as i64)
    } else {
        format!("{te}").replace('.', "p")
    }
}

/// File layout under a working directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.root.join("phantom")
    }

    pub fn labels(&self) -> PathBuf {
        self.phantom_dir().join("labels.qvol")
    }

    pub fn gt_echo(&self, te: f64) -> PathBuf {
        self.phantom_dir().join(format!("gt_te{}.qvol", te_tag(te)))
    }

    pub fn gt_t2(&self) -> PathBuf {
        self.phantom_dir().join("gt_t2.qvol")
    }

    pub fn gt_m0(&self) -> PathBuf {
        self.phantom_dir().join("gt_m0.qvol")
    }

    pub fn acquisition_dir(&self) -> PathBuf {
        self.root.join("acquisition")
    }

    pub fn manifest(&self) -> PathBuf {
        self.acquisition_dir().join("manifest.json")
    }

    pub fn truth_poses(&self) -> PathBuf {
        self.acquisition_dir().join("truth_poses.json")
    }

    pub fn stack_stem(&self, index: usize, te: f64, orientation: Orientation) -> String {
        format!("stack{index:02}_te{}_{}", te_tag(te), orientation.name())
    }

    pub fn recon_dir(&self, name: &str) -> PathBuf {
        self.root.join("recon").join(name)
    }

    pub fn recon_echo(&self, name: &str, te: f64) -> PathBuf {
        self.recon_dir(name).join(format!("recon_te{}.qvol", te_tag(te)))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.recon_dir(name).join("metrics.json")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn read_volume(path: &Path) -> Result<Volume> {
    require(path)?;
    qvol::read(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require(path)?;
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn brain_regions() -> Vec<(String, f64)> {
    TISSUE_KEYS.iter().map(|(k, t)| (k.to_string(), t.code() as f64)).collect()
}

pub fn run_phantom(cfg: &PipelineConfig, wd: &Workdir) -> Result<Phantom> {
    let phantom = Phantom::generate(&cfg.phantom_spec()?)?;
    let gt = phantom.ground_truth(&cfg.run.tes)?;
    fs::create_dir_all(wd.phantom_dir())?;
    qvol::write(wd.labels(), &phantom.labels)?;
    qvol::write(wd.gt_t2(), &phantom.t2)?;
    qvol::write(wd.gt_m0(), &phantom.m0)?;
    for (te, vol) in cfg.run.tes.iter().zip(&gt) {
        qvol::write(wd.gt_echo(*te), vol)?;
    }
    log::info!("phantom written to {}", wd.phantom_dir().display());
    Ok(phantom)
}

/// Geometry and bookkeeping that the stack volume itself cannot carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub stack_index: usize,
    pub te_index: usize,
    /// ms
    pub te: f64,
    pub geometry: StackGeometry,
    pub empty: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackRecord {
    pub stack_index: usize,
    pub te_index: usize,
    pub orientation: Orientation,
    pub volume: String,
    pub sidecar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionManifest {
    pub tes: Vec<f64>,
    pub stacks_per_te: usize,
    pub stacks: Vec<StackRecord>,
}

/// Simulation ground truth for one slice. Only evaluation reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthPose {
    pub stack_index: usize,
    pub slice: usize,
    /// rad
    pub euler: [f64; 3],
    /// mm
    pub translation: [f64; 3],
    pub dropout: f64,
}

pub fn run_acquire(cfg: &PipelineConfig, wd: &Workdir) -> Result<Vec<SliceStack>> {
    let acq = cfg.acquisition_config()?;
    let gt = cfg.run.tes.iter().map(|&te| read_volume(&wd.gt_echo(te))).collect::<Result<Vec<_>>>()?;
    let dir = wd.acquisition_dir();
    fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut stacks = Vec::new();
    for (te_index, orientation) in study_layout(cfg.run.tes.len(), cfg.acquisition.stacks_per_te)? {
        let index = stack_index(te_index, orientation);
        let te = cfg.run.tes[te_index];
        let stack = simulate_stack(&gt[te_index], te, orientation, index, &acq)?;
        let stem = wd.stack_stem(index, te, orientation);
        qvol::write(dir.join(format!("{stem}.qvol")), &stack.to_volume()?)?;
        let sidecar = StackSidecar {
            stack_index: index,
            te_index,
            te,
            geometry: stack.geometry.clone(),
            empty: stack.slices.iter().map(|s| s.empty).collect(),
        };
        write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
        truth.extend(stack.slices.iter().map(|s| TruthPose {
            stack_index: index,
            slice: s.index_in_stack,
            euler: s.true_pose.euler,
            translation: s.true_pose.translation,
            dropout: s.dropout,
        }));
        records.push(StackRecord {
            stack_index: index,
            te_index,
            orientation,
            volume: format!("{stem}.qvol"),
            sidecar: format!("{stem}.json"),
        });
        stacks.push(stack);
    }
    let manifest = AcquisitionManifest {
        tes: cfg.run.tes.clone(),
        stacks_per_te: cfg.acquisition.stacks_per_te,
        stacks: records,
    };
    write_json(&wd.manifest(), &manifest)?;
    write_json(&wd.truth_poses(), &truth)?;
    log::info!("{} stacks written to {}", stacks.len(), dir.display());
    Ok(stacks)
}

/// Load the stacks a reconstruction with `stacks_per_te` uses.
pub fn load_stacks(wd: &Workdir, tes: &[f64], stacks_per_te: usize) -> Result<Vec<SliceStack>> {
    let manifest: AcquisitionManifest = read_json(&wd.manifest())?;
    if manifest.tes != tes {
        return config_err(format!("acquisition used echo times {:?}, the config asks for {:?}", manifest.tes, tes));
    }
    let dir = wd.acquisition_dir();
    study_layout(tes.len(), stacks_per_te)?
        .into_iter()
        .map(|(te_index, orientation)| {
            let index = stack_index(te_index, orientation);
            let stem = wd.stack_stem(index, tes[te_index], orientation);
            if !manifest.stacks.iter().any(|r| r.stack_index == index) {
                return Err(Error::MissingInput(dir.join(format!("{stem}.qvol"))));
            }
            let side: StackSidecar = read_json(&dir.join(format!("{stem}.json")))?;
            let vol = read_volume(&dir.join(format!("{stem}.qvol")))?;
            SliceStack::from_volume(&vol, side.te, side.stack_index, side.geometry, &side.empty)
        })
        .collect()
}

pub fn load_truth_poses(wd: &Workdir) -> Result<Vec<TruthPose>> {
    read_json(&wd.truth_poses())
}

/// Outcome of a reconstruction run that reached the end of training.
#[derive(Clone, Debug)]
pub struct ReconOutcome {
    pub name: String,
    pub volumes: Vec<Volume>,
    pub slices: Vec<EstimatedSlice>,
    pub history: Vec<EpochLoss>,
}

fn write_checkpoints(dir: &Path, model: &ReconModel) -> Result<()> {
    for (i, net) in model.sr_nets.iter().enumerate() {
        net.save(dir.join(format!("sr_net{i}.siren")))?;
    }
    for (i, net) in model.slice_nets.iter().enumerate() {
        net.save(dir.join(format!("slice_net{i}.siren")))?;
    }
    Ok(())
}

/// Reload the networks a finished run wrote.
pub fn load_checkpoints(dir: &Path, prefix: &str) -> Result<Vec<SirenNetwork>> {
    let mut nets = Vec::new();
    loop {
        let path = dir.join(format!("{prefix}{}.siren", nets.len()));
        if !path.exists() {
            break;
        }
        nets.push(SirenNetwork::load(path)?);
    }
    if nets.is_empty() {
        return Err(Error::MissingInput(dir.join(format!("{prefix}0.siren"))));
    }
    Ok(nets)
}

fn history_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,data_loss,reg_loss\n");
    for h in history {
        let _ = writeln!(s, "{},{:e},{:e}", h.epoch, h.data, h.reg);
    }
    s
}

fn poses_txt(stacks: &[SliceStack], slices: &[EstimatedSlice]) -> String {
    let mut s = String::from("# stack slice te rx_rad ry_rad rz_rad tx_mm ty_mm tz_mm sigma omega empty\n");
    for e in slices {
        let [rx, ry, rz] = e.pose.euler;
        let [tx, ty, tz] = e.pose.translation;
        let _ = writeln!(
            s,
            "{} {} {} {rx:e} {ry:e} {rz:e} {tx:e} {ty:e} {tz:e} {:e} {:e} {}",
            stacks[e.stack].stack_index,
            e.index_in_stack,
            e.te,
            e.calib.sigma,
            e.calib.omega,
            u8::from(e.empty)
        );
    }
    s
}

/// Estimated pose of one slice as stored in `poses_est.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRow {
    pub stack_index: usize,
    pub slice: usize,
    pub euler: [f64; 3],
    pub translation: [f64; 3],
    pub empty: bool,
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRow>> {
    require(path)?;
    let bad = |n: usize| Error::Format(format!("{}: line {n} is malformed", path.display()));
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 12 {
                return Err(bad(n + 1));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n + 1));
            Ok(PoseRow {
                stack_index: f[0].parse().map_err(|_| bad(n + 1))?,
                slice: f[1].parse().map_err(|_| bad(n + 1))?,
                euler: [num(3)?, num(4)?, num(5)?],
                translation: [num(6)?, num(7)?, num(8)?],
                empty: f[11] == "1",
            })
        })
        .collect()
}

/// Train on the configured subset of acquired stacks and write the
/// reconstruction. On a non-finite loss the last finite networks and a
/// `failure.json` are written before the error is returned.
pub fn run_reconstruct(cfg: &PipelineConfig, wd: &Workdir) -> Result<ReconOutcome> {
    let name = cfg.recon_name();
    let stacks = load_stacks(wd, &cfg.run.tes, cfg.recon_stacks_per_te())?;
    let rc = cfg.recon_config()?;
    let dir = wd.recon_dir(&name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let failure = dir.join("failure.json");
    if failure.exists() {
        fs::remove_file(&failure)?;
    }
    let mut trainer = Trainer::new(&stacks, rc)?;
    log::info!("reconstructing {name}: {} slices, {} steps per epoch", trainer.slices().len(), trainer.steps_per_epoch());
    while trainer.history().len() < trainer.config().epochs {
        match trainer.run_epoch() {
            Ok(_) => {}
            Err(err @ Error::NonFiniteLoss { .. }) => {
                write_checkpoints(&dir, trainer.model())?;
                fs::write(dir.join("loss_history.csv"), history_csv(trainer.history()))?;
                if let Error::NonFiniteLoss { epoch, step, detail } = &err {
                    write_json(&failure, &serde_json::json!({ "epoch": epoch, "step": step, "detail": detail }))?;
                }
                return Err(err);
            }
            Err(err) => return Err(err),
        }
    }
    let result = trainer.finish()?;
    for (te, vol) in cfg.run.tes.iter().zip(&result.volumes) {
        qvol::write(wd.recon_echo(&name, *te), vol)?;
    }
    fs::write(dir.join("poses_est.txt"), poses_txt(&stacks, &result.slices))?;
    fs::write(dir.join("loss_history.csv"), history_csv(&result.history))?;
    write_checkpoints(&dir, &result.model)?;
    Ok(ReconOutcome { name, volumes: result.volumes, slices: result.slices, history: result.history })
}

pub fn run_fit(cfg: &PipelineConfig, wd: &Workdir) -> Result<(ParameterMap, Vec<RegionStats>)> {
    let name = cfg.recon_name();
    let volumes =
        cfg.run.tes.iter().map(|&te| read_volume(&wd.recon_echo(&name, te))).collect::<Result<Vec<_>>>()?;
    let labels = read_volume(&wd.labels())?;
    let map = fit_volume(&build_system(&cfg.run.tes)?, &volumes, cfg.fit.floor)?;
    let dir = wd.recon_dir(&name);
    qvol::write(dir.join("t2_map.qvol"), &map.t2)?;
    qvol::write(dir.join("m0_map.qvol"), &map.m0)?;
    qvol::write(dir.join("fit_mask.qvol"), &map.mask)?;
    let stats = region_stats(&map, &labels, &brain_regions());
    write_json(&dir.join("t2_stats.json"), &stats)?;
    Ok((map, stats))
}

pub fn run_evaluate(cfg: &PipelineConfig, wd: &Workdir) -> Result<MetricReport> {
    let name = cfg.recon_name();
    let dir = wd.recon_dir(&name);
    let labels = read_volume(&wd.labels())?;
    let mask: Vec<bool> = labels.data.iter().map(|&l| l != 0.0).collect();
    let mut per_echo = Vec::new();
    for &te in &cfg.run.tes {
        let gt = read_volume(&wd.gt_echo(te))?;
        let rec = read_volume(&wd.recon_echo(&name, te))?;
        per_echo.push(EchoSsim { te, ssim: ssim3d(&gt, &rec, Some(&mask), &SsimOptions::default())? });
    }
    let t2 = read_volume(&dir.join("t2_map.qvol"))?;
    let fit_mask = read_volume(&dir.join("fit_mask.qvol"))?;
    let valid: Vec<bool> = fit_mask.data.iter().map(|&m| m == 1.0).collect();
    let truth = read_volume(&wd.gt_t2())?;
    let regions = region_t2_errors(&t2, &valid, &truth, &labels, &brain_regions())?;
    let mean_ssim = per_echo.iter().map(|e| e.ssim).sum::<f64>() / per_echo.len() as f64;
    let mut config = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    config["reconstruction"]["alpha"] = serde_json::json!(cfg.recon_alpha());
    config["reconstruction"]["stacks_per_te"] = serde_json::json!(cfg.recon_stacks_per_te());
    let report = MetricReport {
        variant: cfg.reconstruction.variant.label().to_string(),
        stacks_per_te: cfg.recon_stacks_per_te(),
        seed: cfg.run.seed,
        per_echo,
        mean_ssim,
        regions,
        config,
    };
    fs::write(wd.metrics(&name), report.to_json() + "\n")?;
    Ok(report)
}

/// Phantom through evaluation in one go.
pub fn run_all(cfg: &PipelineConfig, wd: &Workdir) -> Result<MetricReport> {
    run_phantom(cfg, wd)?;
    run_acquire(cfg, wd)?;
    run_reconstruct(cfg, wd)?;
    run_fit(cfg, wd)?;
    run_evaluate(cfg, wd)
}
