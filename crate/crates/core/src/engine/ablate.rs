//! Kernel-mode and pyconv-placement ablations, and per-epoch timing runs.

use serde::Serialize;

use super::{evaluate, Mode, TrainConfig, Trainer};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::resizer::{kernel_assignment, KernelMode, PyconvPlacement};

/// The ten ablation rows: five kernel assignments for the compensation
/// ResBlocks, then five pyramidal-convolution placements.
pub const PRESETS: [&str; 10] = [
    "3x3",
    "5x5",
    "7x7",
    "forward",
    "inversed",
    "pyconv-all",
    "pyconv-none",
    "pyconv-resblock",
    "pyconv-last",
    "pyconv-first",
];

fn canonical(name: &str) -> String {
    name.trim().to_lowercase().replace('×', "x")
}

/// Expands `"all"` to every preset; otherwise validates a single name.
/// Bare placement names other than `all` (`first`, `none`, ...) are accepted.
pub fn resolve_presets(name: &str) -> Result<Vec<&'static str>> {
    let n = canonical(name);
    if n == "all" {
        return Ok(PRESETS.to_vec());
    }
    PRESETS
        .iter()
        .find(|&&p| p == n || p.strip_prefix("pyconv-") == Some(n.as_str()))
        .map(|&p| vec![p])
        .ok_or_else(|| {
            Error::Argument(format!(
                "unknown ablation preset {name:?}; valid presets: all, {}",
                PRESETS.join(", ")
            ))
        })
}

/// `base` with the preset's kernel mode and placement; kernel rows keep
/// placement `first` and placement rows keep kernel mode `inversed`.
pub fn preset_config(base: &TrainConfig, preset: &str) -> Result<TrainConfig> {
    let [name] = resolve_presets(preset)?[..] else {
        return Err(Error::Argument("preset_config takes a single preset, not \"all\"".into()));
    };
    let (mode, placement) = match name {
        "3x3" => (KernelMode::Uniform(3), PyconvPlacement::First),
        "5x5" => (KernelMode::Uniform(5), PyconvPlacement::First),
        "7x7" => (KernelMode::Uniform(7), PyconvPlacement::First),
        "forward" => (KernelMode::Forward, PyconvPlacement::First),
        "inversed" => (KernelMode::Inversed, PyconvPlacement::First),
        "pyconv-all" => (KernelMode::Inversed, PyconvPlacement::All),
        "pyconv-none" => (KernelMode::Inversed, PyconvPlacement::None),
        "pyconv-resblock" => (KernelMode::Inversed, PyconvPlacement::Resblock),
        "pyconv-last" => (KernelMode::Inversed, PyconvPlacement::Last),
        _ => (KernelMode::Inversed, PyconvPlacement::First),
    };
    let mut cfg = base.clone();
    cfg.kiprn.kernel_mode = mode;
    cfg.kiprn.pyconv_placement = placement;
    cfg.train.mode = Mode::Kiprn;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub kernel_mode: String,
    pub pyconv_placement: String,
    /// Branch kernel sizes, smallest level first, `;`-separated.
    pub branch_kernels: String,
    pub epochs: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Trains and evaluates every preset named by `preset` (or all ten).
pub fn ablate(base: &TrainConfig, manifest: &DatasetManifest, preset: &str) -> Result<Vec<AblationRow>> {
    let names = resolve_presets(preset)?;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let cfg = preset_config(base, name)?;
        let mut trainer = Trainer::new(&cfg)?;
        let metrics = trainer.fit(manifest, cfg.train.epochs)?;
        let test_acc = match metrics.last() {
            Some(m) => m.test_acc,
            None => evaluate(&trainer.model, manifest, Split::Test, cfg.train.batch_size)?.accuracy,
        };
        let kernels = kernel_assignment(&cfg.kiprn.level_sizes, cfg.kiprn.kernel_mode);
        rows.push(AblationRow {
            preset: name.to_string(),
            kernel_mode: label(&cfg.kiprn.kernel_mode),
            pyconv_placement: label(&cfg.kiprn.pyconv_placement),
            branch_kernels: kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
            epochs: metrics.len(),
            train_loss: metrics.last().map_or(f64::NAN, |m| m.train_loss),
            train_acc: metrics.last().map_or(f64::NAN, |m| m.train_acc),
            test_acc,
            wall_seconds: metrics.iter().map(|m| m.wall_seconds).sum(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub config: String,
    pub mode: String,
    pub epochs: usize,
    pub mean_seconds: f64,
    /// Sample standard deviation of the per-epoch times (0 for one epoch).
    pub stddev_seconds: f64,
    /// Per-epoch training times, `;`-separated.
    pub epoch_seconds: String,
}

/// Times `epochs` training epochs of each named config, one after another.
pub fn benchmark(configs: &[(String, TrainConfig)], manifest: &DatasetManifest, epochs: usize) -> Result<Vec<BenchRow>> {
    if configs.is_empty() || epochs == 0 {
        return Err(Error::Argument("benchmark needs at least one config and one epoch".into()));
    }
    let train = manifest.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Argument("manifest has no train records".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let mut trainer = Trainer::new(cfg)?;
        let times = (0..epochs)
            .map(|_| trainer.train_epoch(manifest, &train).map(|s| s.seconds))
            .collect::<Result<Vec<_>>>()?;
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = if times.len() > 1 {
            times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(BenchRow {
            config: name.clone(),
            mode: cfg.train.mode.name().to_string(),
            epochs,
            mean_seconds: mean,
            stddev_seconds: var.sqrt(),
            epoch_seconds: times.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"),
        });
    }
    Ok(rows)
}
