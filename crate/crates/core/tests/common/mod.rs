#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use kiprn::data::{DatasetManifest, MANIFEST_FILE};
use kiprn::engine::{Mode, TrainConfig};
use kiprn::synth::{synth_generate, DatasetSpec};

/// A model small enough to train in well under a second per epoch on
/// 32x32 renders.
pub fn tiny_config(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.kiprn.level_sizes = vec![(16, 16), (20, 20), (24, 24)];
    cfg.kiprn.pyconv_channels = (6, 4);
    cfg.kiprn.branch_channels = 4;
    cfg.kiprn.resblocks_per_branch = 1;
    cfg.backbone.stage_channels = vec![4, 8];
    cfg.train.mode = mode;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.optim.lr = 1e-3;
    cfg
}

pub fn tiny_spec(per_class: usize, render: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        samples_per_class: per_class,
        render_size: (render, render),
        seed,
        ..Default::default()
    }
}

/// Renders, splits and saves a dataset under `dir`.
pub fn make_dataset(dir: &Path, spec: &DatasetSpec) -> DatasetManifest {
    let mut m = synth_generate(spec, dir).unwrap();
    m.assign_splits(spec.seed).unwrap();
    m.save(&dir.join(MANIFEST_FILE)).unwrap();
    m
}

/// Writes a run config file combining a training config and dataset spec.
pub fn write_config(path: &Path, cfg: &TrainConfig, spec: &DatasetSpec) {
    let file = kiprn::config::RunConfigFile {
        kiprn: cfg.kiprn.clone(),
        backbone: cfg.backbone.clone(),
        train: cfg.train.clone(),
        dataset: spec.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
}

/// Runs the `kiprn` binary, returning exit code, stdout and stderr.
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_kiprn"))
        .args(args)
        .env_remove("KIPRN_THREADS")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Drops the wall-clock column from a metrics CSV.
pub fn without_wall_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}
