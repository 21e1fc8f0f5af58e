//! Dataset manifests, stratified splits and mini-batch loading.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::synth::DatasetSpec;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Per-channel normalization applied to `[0, 1]` pixels: `(v - MEAN) / STD`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Relative to the manifest directory.
    pub path: String,
    pub label: usize,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: DatasetSpec,
    seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
    /// Seed of the current split assignment, if any.
    pub split_seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(spec: DatasetSpec, root: PathBuf, records: Vec<Record>) -> Self {
        Self {
            spec,
            root,
            records,
            split_seed: None,
        }
    }

    /// Writes JSON lines: a header, then one record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = Header {
            spec: self.spec.clone(),
            seed: self.split_seed,
        };
        let mut emit = |line: String| writeln!(out, "{line}").map_err(|e| Error::io(path, e));
        emit(serde_json::to_string(&header)?)?;
        for r in &self.records {
            emit(serde_json::to_string(r)?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Decode(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)?;
            if r.label >= header.spec.num_classes {
                return Err(Error::Decode(format!("record {} has label {} out of range", r.path, r.label)));
            }
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            spec: header.spec,
            root,
            records,
            split_seed: header.seed,
        })
    }

    /// Loads from a manifest file or a directory containing `manifest.jsonl`.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn assign_splits(&mut self, seed: u64) -> Result<()> {
        let splits = make_splits(&self.labels(), self.spec.num_classes, self.spec.train_fraction, seed)?;
        for (r, s) in self.records.iter_mut().zip(splits) {
            r.split = Some(s);
        }
        self.split_seed = Some(seed);
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == Some(split))
            .collect()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].path)
    }

    /// Raw `[0, 1]` image of record `i`.
    pub fn load_image(&self, i: usize) -> Result<Tensor<f32>> {
        let path = self.image_path(i);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image listed in manifest is missing"),
            ));
        }
        imageio::load_png(&path)
    }
}

/// Stratified split: within each class, a seeded shuffle puts
/// `round(n * train_fraction)` samples in train and the rest in test.
pub fn make_splits(labels: &[usize], num_classes: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Argument(format!("label {l} out of range for {num_classes} classes")))?
            .push(i);
    }
    let mut out = vec![Split::Test; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        let n_train = (n as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Argument(format!(
                "class {class} has {n} samples; a {train_fraction} split leaves one side empty"
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..n_train] {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

pub fn normalize(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| (v - PIXEL_MEAN) / PIXEL_STD)
}

pub fn denormalize(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| v * PIXEL_STD + PIXEL_MEAN)
}

pub struct Batch {
    /// Normalized `N x 3 x H x W`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Record indices in the manifest.
    pub indices: Vec<usize>,
}

/// Mini-batches over `indices`; the final batch may be short.
pub struct Batches<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Iterates `indices` in batches of `batch_size`, shuffled by `shuffle_seed` if given.
pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    indices: &[usize],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= manifest.records.len()) {
        return Err(Error::Argument(format!("record index {bad} out of range")));
    }
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        manifest,
        order,
        batch_size,
        pos: 0,
    })
}

impl Batches<'_> {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn load(&self, idx: &[usize]) -> Result<Batch> {
        let images = idx
            .iter()
            .map(|&i| self.manifest.load_image(i).map(|img| normalize(&img)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: idx.iter().map(|&i| self.manifest.records[i].label).collect(),
            indices: idx.to_vec(),
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.load(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_stratified_and_seeded() {
        let labels: Vec<usize> = (0..70).map(|i| i % 7).collect();
        let a = make_splits(&labels, 7, 0.5, 3).unwrap();
        let b = make_splits(&labels, 7, 0.5, 3).unwrap();
        let c = make_splits(&labels, 7, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for class in 0..7 {
            let train = (0..70).filter(|&i| labels[i] == class && a[i] == Split::Train).count();
            assert_eq!(train, 5);
        }
    }

    #[test]
    fn degenerate_split_rejected() {
        let labels = vec![0, 1];
        assert!(matches!(make_splits(&labels, 2, 0.5, 0), Err(Error::Argument(_))));
        assert!(matches!(make_splits(&[0, 0], 1, 1.0, 0), Err(Error::Argument(_))));
    }
}
