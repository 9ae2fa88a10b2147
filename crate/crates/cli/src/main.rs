use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dfen_core::checks::gradcheck_suite;
use dfen_core::config::TrainConfig;
use dfen_core::data::{gen_synthetic, save_dataset};
use dfen_core::train::{run_ablate, run_eval, run_train, CHECKPOINT_DIR};

/// Environment variable naming the directory that relative output paths resolve against.
const OUT_ROOT_ENV: &str = "DFEN_OUT";

#[derive(Parser)]
#[command(name = "dfen", version, about = "Dual feature equalization segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Defaults to the config's out_dir under $DFEN_OUT.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                TrainConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self, config: &TrainConfig) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => Path::new(&root).join(&config.out_dir),
            None => config.out_dir.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing CSV logs and checkpoints.
    Train(Common),
    /// Score a checkpoint on the configured eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory. Defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train and score an ablation grid.
    Ablate(Common),
    /// Write the configured synthetic dataset as netpbm files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Target directory. Defaults to `<out>/data`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn train(common: &Common) -> Result<()> {
    let config = common.load()?;
    let out = common.out_dir(&config);
    let outcome = run_train(&config, &out)?;
    for e in &outcome.epochs {
        println!(
            "epoch {:>3}  step {:>5}  loss {:.5}  ce {:.5}  dice {:.5}  mean dsc {:.4}  {:.1}s",
            e.epoch, e.step, e.loss, e.ce, e.dice, e.mean.dsc, e.seconds
        );
    }
    println!("logs and checkpoint in {}", out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let config = common.load()?;
    let dir = match checkpoint {
        Some(dir) => dir.to_path_buf(),
        None => common.out_dir(&config).join(CHECKPOINT_DIR),
    };
    let report = run_eval(&config, &dir)?;
    println!("{} samples from the {} split, mean loss {:.6}", report.samples, config.eval_split, report.loss);
    print!("{}", report.table());
    Ok(())
}

fn gradcheck(common: &Common, seeds: usize) -> Result<()> {
    let config = common.load()?;
    let start = Instant::now();
    let results = gradcheck_suite(seeds, &config.model, config.execution)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<20} {:?}  max rel err {:.3e} (seed {})  tol {:.0e}  {} entries  {:.2}s",
            r.name, r.kind, r.max_rel_error, r.worst_seed, r.tol, r.checked, r.seconds
        );
        failed += usize::from(!r.passed());
    }
    println!("{} cases, {} seeds, {:.1}s", results.len(), seeds, start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} gradient check case(s) failed");
    }
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let config = common.load()?;
    let out = common.out_dir(&config);
    let report = run_ablate(&config, Some(&out))?;
    println!("{:<16} {:<6} {:>8} {:>8}", "variant", "concat", "alpha", "mean DSC");
    for r in &report.rows {
        println!("{:<16} {:<6} {:>8} {:>8.4}", r.variant, r.concat_set.to_string(), r.loss.alpha, r.mean.dsc);
    }
    println!("wrote {}", out.join(dfen_core::train::ABLATION_LOG).display());
    Ok(())
}

fn gen_data(common: &Common, dir: Option<&Path>) -> Result<()> {
    let config = common.load()?;
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => common.out_dir(&config).join("data"),
    };
    let samples = gen_synthetic(&config.synthetic, config.execution)?;
    save_dataset(&dir, &samples)?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Gradcheck { common, seeds } => gradcheck(common, *seeds),
        Command::Ablate(c) => ablate(c),
        Command::GenData { common, dir } => gen_data(common, dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
