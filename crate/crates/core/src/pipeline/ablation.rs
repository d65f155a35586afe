use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{MotionLevel, PipelineConfig};
use super::stages::{run_acquire, run_evaluate, run_fit, run_phantom, run_reconstruct, Workdir};
use crate::error::{config_err, Error, Result};
use crate::metrics::MetricReport;
use crate::recon::Variant;

/// A grid of reconstructions: every `(stacks per echo, variant)` cell for
/// every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub name: String,
    pub tes: Vec<f64>,
    pub motion: MotionLevel,
    pub cells: Vec<(usize, Variant)>,
    pub seeds: Vec<u64>,
    /// Printed under the summary table.
    pub notes: Vec<String>,
}

pub const PRESETS: [&str; 3] = ["table2-desk", "table3-desk", "custom"];

fn full_cells(stacks: &[usize]) -> Vec<(usize, Variant)> {
    stacks.iter().flat_map(|&s| Variant::ALL.iter().map(move |&v| (s, v))).collect()
}

impl AblationPlan {
    /// Named preset. `custom` is built from the config's `[ablation]` table.
    pub fn preset(name: &str, cfg: &PipelineConfig) -> Result<Self> {
        let seeds: Vec<u64> = (1..=5).collect();
        let plan = match name {
            "table2-desk" => Self {
                name: name.into(),
                tes: vec![220.0, 500.0, 690.0],
                motion: MotionLevel::Moderate,
                cells: full_cells(&[3]),
                seeds,
                notes: Vec::new(),
            },
            "table3-desk" => Self {
                name: name.into(),
                tes: vec![114.0, 200.0, 299.0],
                motion: MotionLevel::Moderate,
                cells: [full_cells(&[3, 2]), vec![(1, Variant::Mc), (1, Variant::McReg)]].concat(),
                seeds,
                notes: vec![
                    "SC is not run at 1 stack/TE: each single-echo network would see one thick-slice orientation only, \
                     which leaves the through-plane direction unresolved."
                        .into(),
                ],
            },
            "custom" => {
                let Some(a) = &cfg.ablation else {
                    return config_err("preset `custom` needs an [ablation] table");
                };
                Self {
                    name: name.into(),
                    tes: cfg.run.tes.clone(),
                    motion: a.motion.unwrap_or(cfg.acquisition.motion),
                    cells: a.stacks_per_te.iter().flat_map(|&s| a.variants.iter().map(move |&v| (s, v))).collect(),
                    seeds: a.seeds.clone(),
                    notes: Vec::new(),
                }
            }
            other => return config_err(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", "))),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.seeds.is_empty() {
            return config_err(format!("ablation `{}` has no cells to run", self.name));
        }
        if self.cells.iter().any(|(s, _)| !(1..=3).contains(s)) {
            return config_err("ablation stacks per echo must be 1, 2 or 3");
        }
        Ok(())
    }

    /// Config of one cell: `base` with the plan's echoes, motion, seed and
    /// cell applied. The acquisition always keeps three stacks per echo so
    /// every cell of a seed shares it.
    pub fn cell_config(&self, base: &PipelineConfig, seed: u64, stacks: usize, variant: Variant) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        cfg.run.tes = self.tes.clone();
        cfg.acquisition.motion = self.motion;
        cfg.acquisition.stacks_per_te = 3;
        cfg.reconstruction.variant = variant;
        cfg.reconstruction.stacks_per_te = Some(stacks);
        if variant != Variant::McReg {
            cfg.reconstruction.alpha = None;
        }
        cfg.ablation = None;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub stacks_per_te: usize,
    pub variant: Variant,
    /// `None` when the cell failed; see `error`.
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn mae_wm(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.mae("wm"))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.mean_ssim)
    }
}

/// How many seeds satisfy one ordering between variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCount {
    pub stacks_per_te: usize,
    pub check: String,
    pub holds: usize,
    /// Seeds where every involved cell succeeded.
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub plan: String,
    pub rows: Vec<AblationRow>,
    pub orderings: Vec<OrderingCount>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

impl AblationReport {
    pub fn row(&self, seed: u64, stacks: usize, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.seed == seed && r.stacks_per_te == stacks && r.variant == variant)
    }

    /// Values of `metric` over the successful seeds of one cell.
    pub fn values(&self, stacks: usize, variant: Variant, metric: impl Fn(&AblationRow) -> Option<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stacks_per_te == stacks && r.variant == variant)
            .filter_map(metric)
            .collect()
    }

    pub fn ordering(&self, name: &str) -> Option<&OrderingCount> {
        self.orderings.iter().find(|o| o.check == name)
    }

    fn count_orderings(&mut self) {
        let mut stacks: Vec<usize> = self.rows.iter().map(|r| r.stacks_per_te).collect();
        stacks.sort_unstable();
        stacks.dedup();
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        type Check = (&'static str, &'static [Variant], fn(&[f64], &[f64]) -> bool);
        let checks: [Check; 3] = [
            ("MAE_WM MC_Reg <= MC <= SC", &[Variant::McReg, Variant::Mc, Variant::Sc], |m, _| m[0] <= m[1] && m[1] <= m[2]),
            ("MAE_WM MC_Reg < MC", &[Variant::McReg, Variant::Mc], |m, _| m[0] < m[1]),
            ("SSIM MC_Reg >= SC", &[Variant::McReg, Variant::Sc], |_, s| s[0] >= s[1]),
        ];
        for &s in stacks.iter().rev() {
            for (name, variants, holds) in checks {
                let mut count = OrderingCount { stacks_per_te: s, check: format!("{name} @ {s} stacks/TE"), holds: 0, seeds: 0 };
                for &seed in &seeds {
                    let rows: Option<Vec<&AblationRow>> = variants.iter().map(|&v| self.row(seed, s, v)).collect();
                    let Some(rows) = rows else { continue };
                    let mae: Option<Vec<f64>> = rows.iter().map(|r| r.mae_wm()).collect();
                    let ssim: Option<Vec<f64>> = rows.iter().map(|r| r.mean_ssim()).collect();
                    if let (Some(m), Some(ss)) = (mae, ssim) {
                        count.seeds += 1;
                        count.holds += usize::from(holds(&m, &ss));
                    }
                }
                if count.seeds > 0 {
                    self.orderings.push(count);
                }
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let echoes = self.rows.iter().filter_map(|r| r.report.as_ref()).map(|r| r.per_echo.len()).max().unwrap_or(0);
        let mut s = String::from("seed,stacks_per_te,variant,mae_wm,mae_gm,mean_ssim");
        for e in 0..echoes {
            let _ = write!(s, ",ssim_te{e}");
        }
        s.push_str(",error\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.seed,
                r.stacks_per_te,
                r.variant.label(),
                fmt(r.mae_wm()),
                fmt(r.report.as_ref().and_then(|x| x.mae("gm"))),
                fmt(r.mean_ssim())
            );
            for e in 0..echoes {
                let _ = write!(s, ",{}", fmt(r.report.as_ref().and_then(|x| x.per_echo.get(e)).map(|x| x.ssim)));
            }
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(s, ",{err}");
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.plan);
        s.push_str("| stacks/TE | model | MAE_WM (ms) | MAE_GM (ms) | mean SSIM | ok |\n|---|---|---|---|---|---|\n");
        let mut cells: Vec<(usize, Variant)> = self.rows.iter().map(|r| (r.stacks_per_te, r.variant)).collect();
        cells.dedup();
        let mut seen = Vec::new();
        for c in cells {
            if seen.contains(&c) {
                continue;
            }
            seen.push(c);
            let (st, v) = c;
            let cell = |vals: Vec<f64>| mean_std(&vals).map(|(m, d)| format!("{m:.3} ± {d:.3}")).unwrap_or("-".into());
            let total = self.rows.iter().filter(|r| r.stacks_per_te == st && r.variant == v).count();
            let ok = self.values(st, v, |r| r.mean_ssim()).len();
            let _ = writeln!(
                s,
                "| {st} | {} | {} | {} | {} | {ok}/{total} |",
                v.label(),
                cell(self.values(st, v, |r| r.mae_wm())),
                cell(self.values(st, v, |r| r.report.as_ref().and_then(|x| x.mae("gm")))),
                cell(self.values(st, v, |r| r.mean_ssim())),
            );
        }
        if !self.orderings.is_empty() {
            s.push_str("\n| ordering | seeds holding |\n|---|---|\n");
            for o in &self.orderings {
                let _ = writeln!(s, "| {} | {}/{} |", o.check, o.holds, o.seeds);
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "\n{n}");
        }
        let failed: Vec<&AblationRow> = self.rows.iter().filter(|r| r.error.is_some()).collect();
        if !failed.is_empty() {
            s.push_str("\nFailed cells:\n\n");
            for r in failed {
                let _ = writeln!(
                    s,
                    "- seed {} {} @ {} stacks/TE: {}",
                    r.seed,
                    r.variant.label(),
                    r.stacks_per_te,
                    r.error.as_deref().unwrap_or("")
                );
            }
        }
        s
    }
}

pub fn ablation_dir(root: &Path, plan: &AblationPlan) -> PathBuf {
    root.join("ablation").join(&plan.name)
}

fn run_cell(cfg: &PipelineConfig, wd: &Workdir) -> Result<MetricReport> {
    run_reconstruct(cfg, wd)?;
    run_fit(cfg, wd)?;
    run_evaluate(cfg, wd)
}

/// Run every cell of `plan`. Cell failures are recorded and the remaining
/// cells still run; only configuration and I/O problems abort.
pub fn run_ablation(base: &PipelineConfig, plan: &AblationPlan, root: &Path) -> Result<AblationReport> {
    plan.validate()?;
    let dir = ablation_dir(root, plan);
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        let wd = Workdir::new(dir.join(format!("seed{seed}")));
        let (s0, v0) = plan.cells[0];
        let shared = plan.cell_config(base, seed, s0, v0)?;
        run_phantom(&shared, &wd)?;
        run_acquire(&shared, &wd)?;
        for &(stacks, variant) in &plan.cells {
            let cfg = plan.cell_config(base, seed, stacks, variant)?;
            let row = match run_cell(&cfg, &wd) {
                Ok(report) => AblationRow { seed, stacks_per_te: stacks, variant, report: Some(report), error: None },
                Err(e @ (Error::Io(_) | Error::Config(_))) => return Err(e),
                Err(e) => {
                    log::warn!("seed {seed} {variant} @ {stacks} stacks/TE failed: {e}");
                    AblationRow { seed, stacks_per_te: stacks, variant, report: None, error: Some(e.to_string()) }
                }
            };
            log::info!(
                "seed {seed} {} @ {stacks}: SSIM {:?} MAE_WM {:?}",
                variant.label(),
                row.mean_ssim(),
                row.mae_wm()
            );
            rows.push(row);
        }
    }
    let mut report = AblationReport { plan: plan.name.clone(), rows, orderings: Vec::new(), notes: plan.notes.clone() };
    report.count_orderings();
    fs::write(dir.join("summary.csv"), report.to_csv())?;
    fs::write(dir.join("summary.md"), report.to_markdown())?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))? + "\n",
    )?;
    Ok(report)
}
