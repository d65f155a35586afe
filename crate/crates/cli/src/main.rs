use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use t2forge::error::{Error, Result};
use t2forge::pipeline::{
    exit_code, run_ablation, run_acquire, run_all, run_evaluate, run_fit, run_phantom, run_reconstruct, AblationPlan,
    PipelineConfig, ReconOverrides, Workdir, PRESETS,
};
use t2forge::recon::Variant;

/// Joint multi-echo reconstruction and T2 mapping on a synthetic phantom.
#[derive(Parser, Debug)]
#[command(name = "t2forge", version)]
struct Cli {
    /// Directory holding every stage's inputs and outputs.
    #[arg(long, global = true, default_value = "t2forge_work")]
    workdir: PathBuf,

    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Selection {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    stacks_per_te: Option<usize>,
    /// Weight of the decay regularizer (MC_Reg only).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom and its ground-truth echoes.
    Phantom {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate the motion-corrupted thick-slice stacks.
    Acquire {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the networks and render one volume per echo.
    Reconstruct(Selection),
    /// Voxel-wise T2 fit of a reconstruction.
    Fit(Selection),
    /// SSIM and T2 error of a fitted reconstruction.
    Evaluate(Selection),
    /// Every stage in order.
    Run(Selection),
    /// Multi-seed comparison of variants and stack counts.
    Ablation {
        /// table2-desk, table3-desk or custom.
        #[arg(long)]
        preset: String,
    },
}

impl Selection {
    fn overrides(&self) -> ReconOverrides {
        ReconOverrides {
            variant: self.variant,
            stacks_per_te: self.stacks_per_te,
            alpha: self.alpha,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

fn configure(cli: &Cli, overrides: &ReconOverrides) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(overrides)?;
    Ok(cfg)
}

fn seed_only(seed: Option<u64>) -> ReconOverrides {
    ReconOverrides { seed, ..Default::default() }
}

fn run(cli: &Cli) -> Result<()> {
    let wd = Workdir::new(&cli.workdir);
    match &cli.command {
        Command::Phantom { seed } => {
            run_phantom(&configure(cli, &seed_only(*seed))?, &wd)?;
        }
        Command::Acquire { seed } => {
            let stacks = run_acquire(&configure(cli, &seed_only(*seed))?, &wd)?;
            println!("acquired {} stacks", stacks.len());
        }
        Command::Reconstruct(sel) => {
            let out = run_reconstruct(&configure(cli, &sel.overrides())?, &wd)?;
            if let Some(last) = out.history.last() {
                println!("{}: final data loss {:.6e}, reg loss {:.6e}", out.name, last.data, last.reg);
            }
        }
        Command::Fit(sel) => {
            let (_, stats) = run_fit(&configure(cli, &sel.overrides())?, &wd)?;
            for s in stats {
                println!("{:<4} T2 {:8.2} ± {:7.2} ms  ({} voxels)", s.region, s.mean, s.std, s.voxels);
            }
        }
        Command::Evaluate(sel) => {
            println!("{}", run_evaluate(&configure(cli, &sel.overrides())?, &wd)?.to_json());
        }
        Command::Run(sel) => {
            println!("{}", run_all(&configure(cli, &sel.overrides())?, &wd)?.to_json());
        }
        Command::Ablation { preset } => {
            if !PRESETS.contains(&preset.as_str()) {
                return Err(Error::Config(format!("unknown preset `{preset}`; expected one of {}", PRESETS.join(", "))));
            }
            let cfg = configure(cli, &ReconOverrides::default())?;
            let plan = AblationPlan::preset(preset, &cfg)?;
            print!("{}", run_ablation(&cfg, &plan, wd.root())?.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("T2FORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
