//! The `kiprn` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfigFile;
use crate::data::{DatasetManifest, Split, MANIFEST_FILE};
use crate::engine::{self, Checkpoint, Mode, Trainer};
use crate::error::{Error, Result};
use crate::gradcheck::suite;
use crate::imageio;
use crate::synth;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kiprn", version, about = "Kernel-inversed pyramidal resizing network for pavement distress recognition")]
struct Cli {
    /// JSON run configuration (every key optional).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and dataset seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "kiprn-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliMode {
    Kiprn,
    BilinearMultiscale,
    SingleScale,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Kiprn => Mode::Kiprn,
            CliMode::BilinearMultiscale => Mode::BilinearMultiscale,
            CliMode::SingleScale => Mode::SingleScale,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliSplit {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset into <out>/data.
    Synth {
        #[arg(long)]
        samples_per_class: Option<usize>,
        /// Square render size in pixels.
        #[arg(long)]
        render_size: Option<usize>,
    },
    /// Train a model; writes metrics.csv and checkpoint.kprn.
    Train {
        /// Dataset directory or manifest (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint; writes predictions.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: CliSplit,
    },
    /// Train the kernel-mode and pyconv-placement grid; writes ablation.csv.
    Ablate {
        /// A preset name or "all".
        #[arg(long, default_value = "all")]
        preset: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-epoch training time of the three modes; writes benchmark.csv.
    Benchmark {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Class activation map of one image; writes cam.png and cam_overlay.png.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class to explain (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("KIPRN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("KIPRN_THREADS must be a non-negative integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfigFile, Failure> {
    let mut cfg = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Usage(format!("config file {} does not exist", path.display())))
        }
        Some(path) => RunConfigFile::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn open_data(cli: &Cli, data: &Option<PathBuf>) -> Result<DatasetManifest> {
    let path = data.clone().unwrap_or_else(|| cli.out.join("data"));
    DatasetManifest::open(&path)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match &cli.command {
        Command::Synth {
            samples_per_class,
            render_size,
        } => {
            if let Some(n) = samples_per_class {
                cfg.dataset.samples_per_class = *n;
            }
            if let Some(s) = render_size {
                cfg.dataset.render_size = (*s, *s);
            }
            cfg.dataset.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let dir = out.join("data");
            create_out(&dir)?;
            let mut manifest = synth::synth_generate(&cfg.dataset, &dir)?;
            manifest.assign_splits(cfg.dataset.seed)?;
            manifest.save(&dir.join(MANIFEST_FILE))?;
            println!(
                "wrote {} images ({} classes) and {}",
                manifest.records.len(),
                cfg.dataset.num_classes,
                dir.join(MANIFEST_FILE).display()
            );
        }
        Command::Train {
            data,
            epochs,
            mode,
            resume,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(m) = mode {
                cfg.train.mode = (*m).into();
            }
            let train_cfg = cfg.train_config();
            train_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let manifest = open_data(&cli, data)?;
            let mut trainer = match resume {
                Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
                None => Trainer::new(&train_cfg)?,
            };
            create_out(&out)?;
            let rows = trainer.fit(&manifest, cfg.train.epochs)?;
            for r in &rows {
                println!(
                    "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}  {:.1}s",
                    r.epoch, r.train_loss, r.train_acc, r.test_acc, r.wall_seconds
                );
            }
            engine::write_metrics(&out.join("metrics.csv"), &rows)?;
            trainer.checkpoint()?.save(&out.join("checkpoint.kprn"))?;
            if rows.is_empty() {
                let report = engine::evaluate(&trainer.model, &manifest, Split::Test, cfg.train.batch_size)?;
                println!("no epochs run; test accuracy {:.4}", report.accuracy);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let manifest = open_data(&cli, data)?;
            let split = match split {
                CliSplit::Train => Split::Train,
                CliSplit::Test => Split::Test,
            };
            let report = engine::evaluate(&trainer.model, &manifest, split, trainer.config().train.batch_size)?;
            create_out(&out)?;
            engine::write_csv(&out.join("predictions.csv"), &report.predictions)?;
            println!("accuracy {:.4} over {} images", report.accuracy, report.predictions.len());
        }
        Command::Ablate { preset, data, epochs } => {
            engine::resolve_presets(preset).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let manifest = open_data(&cli, data)?;
            let rows = engine::ablate(&cfg.train_config(), &manifest, preset)?;
            create_out(&out)?;
            engine::write_csv(&out.join("ablation.csv"), &rows)?;
            for r in &rows {
                println!("{:<16} kernels {:<6} test_acc {:.4}", r.preset, r.branch_kernels, r.test_acc);
            }
        }
        Command::Benchmark { data, epochs } => {
            let manifest = open_data(&cli, data)?;
            let configs: Vec<_> = Mode::ALL
                .iter()
                .map(|&m| {
                    let mut c = cfg.train_config();
                    c.train.mode = m;
                    (m.name().to_string(), c)
                })
                .collect();
            let rows = engine::benchmark(&configs, &manifest, *epochs)?;
            create_out(&out)?;
            engine::write_csv(&out.join("benchmark.csv"), &rows)?;
            for r in &rows {
                println!("{:<20} mean {:.3}s  stddev {:.3}s", r.config, r.mean_seconds, r.stddev_seconds);
            }
        }
        Command::Gradcheck { seeds } => {
            let results = suite::run(*seeds, cfg.train.seed)?;
            let mut worst = 0.0f64;
            for (name, r) in &results {
                println!(
                    "{name:<24} max_rel_err={:.3e} checked={} skipped={}",
                    r.max_rel_err, r.checked, r.skipped
                );
                worst = worst.max(r.max_rel_err);
            }
            if worst >= 1e-6 {
                return Err(Failure::Runtime(Error::Argument(format!(
                    "gradient check failed: max rel err {worst:.3e} >= 1e-6"
                ))));
            }
        }
        Command::Cam {
            checkpoint,
            image,
            class,
        } => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let img = imageio::load_png(image)?;
            let (heat, class) = trainer.model.cam(&img, *class)?;
            create_out(&out)?;
            imageio::save_gray_png(&heat, &out.join("cam.png"))?;
            imageio::save_png(&imageio::heat_overlay(&img, &heat, 0.5)?, &out.join("cam_overlay.png"))?;
            let name = synth::CLASS_NAMES.get(class).copied().unwrap_or("?");
            println!("class {class} ({name}); wrote cam.png and cam_overlay.png");
        }
    }
    Ok(())
}
