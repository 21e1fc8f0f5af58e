//! Joint training of resizer and classifier, evaluation, ablations,
//! timing benchmarks and checkpointing.

mod ablate;
mod checkpoint;

use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{cam_from_features, Backbone, BackboneConfig};
use crate::data::{self, Batch, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::ops;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::resizer::{record_resize_pyramid, Kiprn, KiprnConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use ablate::{ablate, benchmark, preset_config, resolve_presets, AblationRow, BenchRow, PRESETS};
pub use checkpoint::{AnyTensor, Checkpoint, MAGIC, VERSION};

/// What feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Learned compensated pyramid.
    Kiprn,
    /// Plain bilinear pyramid.
    BilinearMultiscale,
    /// Bilinear resize to the largest level only.
    SingleScale,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::SingleScale, Mode::BilinearMultiscale, Mode::Kiprn];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Kiprn => "kiprn",
            Mode::BilinearMultiscale => "bilinear-multiscale",
            Mode::SingleScale => "single-scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            epochs: 20,
            batch_size: 8,
            seed: 0,
            mode: Mode::Kiprn,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kiprn: KiprnConfig,
    pub backbone: BackboneConfig,
    pub train: TrainOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.kiprn.validate()?;
        self.backbone.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.train.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        let min = self.backbone.min_input();
        if let Some(&(h, w)) = self.kiprn.level_sizes.iter().find(|&&(h, w)| h < min || w < min) {
            return Err(Error::Config(format!("level {h}x{w} is below the backbone minimum {min}x{min}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    /// Equality on every column except the wall-clock time.
    pub fn same_results(&self, other: &MetricsRow) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
    }
}

const BACKBONE_STREAM: u64 = 1;
const KIPRN_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Resizer (in kiprn mode) plus classifier and their parameters.
pub struct Model {
    mode: Mode,
    kiprn_cfg: KiprnConfig,
    pub kiprn: Option<Kiprn>,
    pub backbone: Backbone,
    pub store: ParamStore<f32>,
}

impl Model {
    /// Backbone and resizer draw from separate seeded streams, so the backbone
    /// starts identical in every mode.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut stream_rng(cfg.train.seed, BACKBONE_STREAM))?;
        let kiprn = match cfg.train.mode {
            Mode::Kiprn => Some(Kiprn::new(
                &cfg.kiprn,
                &mut store,
                &mut stream_rng(cfg.train.seed, KIPRN_STREAM),
            )?),
            _ => None,
        };
        Ok(Self {
            mode: cfg.train.mode,
            kiprn_cfg: cfg.kiprn.clone(),
            kiprn,
            backbone,
            store,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.config().num_classes
    }

    /// The images the classifier sees for a normalized `N x 3 x H x W` batch.
    pub fn levels(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        match (&self.kiprn, self.mode) {
            (Some(k), Mode::Kiprn) => k.forward(tape, p, x),
            (_, Mode::SingleScale) => {
                let (h, w) = self.kiprn_cfg.largest_level();
                Ok(vec![tape.bilinear_resize(x, h, w)?])
            }
            _ => record_resize_pyramid(tape, x, &self.kiprn_cfg),
        }
    }

    pub fn logits(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let levels = self.levels(tape, p, x)?;
        self.backbone.multiscale_logits(tape, p, &levels)
    }

    /// Softmax probabilities for a normalized batch.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.logits(&mut tape, &p, x)?;
        ops::softmax(tape.value(logits))
    }

    /// Class activation map for one raw `3 x H x W` image in `[0, 1]`, taken
    /// on the largest level the classifier sees and resized back to `H x W`.
    /// Returns the map and the class it explains (the predicted one by default).
    pub fn cam(&self, image: &Tensor<f32>, class: Option<usize>) -> Result<(Tensor<f32>, usize)> {
        let &[3, h, w] = image.dims() else {
            return Err(Error::Shape(format!("cam expects a 3 x H x W image, got {:?}", image.dims())));
        };
        let batch = data::normalize(image).reshape(vec![1, 3, h, w])?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(batch);
        let levels = self.levels(&mut tape, &p, x)?;
        let logits = self.backbone.multiscale_logits(&mut tape, &p, &levels)?;
        let class = match class {
            Some(c) if c >= self.num_classes() => {
                return Err(Error::Argument(format!("class {c} out of range for {} classes", self.num_classes())))
            }
            Some(c) => c,
            None => ops::argmax_rows(tape.value(logits))[0],
        };
        let largest = *levels.last().expect("pyramid has levels");
        let features = self.backbone.forward(&mut tape, &p, largest)?.features;
        let weights = &self.store.get(self.backbone.head().weight).value;
        let c = weights.dims()[1];
        let row = &weights.data()[class * c..(class + 1) * c];
        Ok((cam_from_features(tape.value(features), row, h, w)?, class))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Training state: model, optimizer moments, counters and the data-order RNG.
pub struct Trainer {
    cfg: TrainConfig,
    pub model: Model,
    opt: Vec<AdamWState<f32>>,
    step: u32,
    epoch: u32,
    data_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let opt = model.store.params().iter().map(|p| AdamWState::new(p.value.dims())).collect();
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            step: 0,
            epoch: 0,
            data_rng: stream_rng(cfg.train.seed, DATA_STREAM),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch as usize
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One optimizer step on a batch; returns the batch loss and correct count.
    pub fn step(&mut self, batch: &Batch) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, true);
        let x = tape.constant(batch.images.clone());
        let logits = self.model.logits(&mut tape, &p, x)?;
        let correct = ops::argmax_rows(tape.value(logits))
            .iter()
            .zip(&batch.labels)
            .filter(|(a, b)| a == b)
            .count();
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Argument(format!("loss became {loss_value}")));
        }
        let grads = tape.backward(loss)?;
        let decayed = self.cfg.train.optim;
        let plain = AdamWConfig {
            weight_decay: 0.0,
            ..decayed
        };
        for ((param, state), &var) in self.model.store.params_mut().iter_mut().zip(&mut self.opt).zip(p.vars()) {
            let cfg = if param.decay { &decayed } else { &plain };
            match grads.get(var) {
                Some(g) => adamw_step(&mut param.value, g, state, cfg)?,
                None => {
                    let zero = Tensor::zeros(param.value.dims().to_vec());
                    adamw_step(&mut param.value, &zero, state, cfg)?
                }
            }
        }
        self.step += 1;
        Ok((loss_value, correct))
    }

    /// One pass over `indices` in a freshly shuffled order.
    pub fn train_epoch(&mut self, manifest: &DatasetManifest, indices: &[usize]) -> Result<EpochStats> {
        let shuffle_seed = self.data_rng.next_u64();
        let start = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for batch in data::batches(manifest, indices, self.cfg.train.batch_size, Some(shuffle_seed))? {
            let step = self.step as usize;
            let wrap = |e| Error::Step {
                step,
                source: Box::new(e),
            };
            let batch = batch.map_err(wrap)?;
            let (loss, ok) = self.step(&batch).map_err(wrap)?;
            loss_sum += loss * batch.labels.len() as f64;
            correct += ok;
            seen += batch.labels.len();
        }
        self.epoch += 1;
        let n = seen.max(1) as f64;
        Ok(EpochStats {
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        })
    }

    /// Trains until `until_epoch` epochs have completed, evaluating on the
    /// test split after each one.
    pub fn fit(&mut self, manifest: &DatasetManifest, until_epoch: usize) -> Result<Vec<MetricsRow>> {
        check_classes(&self.model, manifest)?;
        let train = manifest.indices(Split::Train);
        let test = manifest.indices(Split::Test);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Argument("manifest needs both train and test records".into()));
        }
        self.cfg.train.epochs = until_epoch;
        let mut rows = Vec::new();
        while (self.epoch as usize) < until_epoch {
            let stats = self.train_epoch(manifest, &train)?;
            let report = evaluate_indices(&self.model, manifest, &test, self.cfg.train.batch_size)?;
            rows.push(MetricsRow {
                epoch: self.epoch as usize,
                train_loss: stats.loss,
                train_acc: stats.accuracy,
                test_acc: report.accuracy,
                wall_seconds: stats.seconds,
            });
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self.model.store.params();
        let mut tensors = Vec::with_capacity(3 * params.len());
        for p in params {
            tensors.push((p.name.clone(), AnyTensor::F32(p.value.clone())));
        }
        for (p, s) in params.iter().zip(&self.opt) {
            tensors.push((format!("adamw.m.{}", p.name), AnyTensor::F32(s.m.clone())));
            tensors.push((format!("adamw.v.{}", p.name), AnyTensor::F32(s.v.clone())));
        }
        Ok(Checkpoint {
            tensors,
            step: self.step,
            epoch: self.epoch,
            rng: rng_words(&self.data_rng),
            config: serde_json::to_string(&self.cfg)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&ckpt.config)?;
        let mut t = Trainer::new(&cfg)?;
        let f32_tensor = |name: &str, dims: &[usize]| -> Result<Tensor<f32>> {
            match ckpt.tensor(name) {
                Some(AnyTensor::F32(v)) if v.dims() == dims => Ok(v.clone()),
                Some(other) => Err(Error::Corrupt(format!(
                    "tensor {name} is {:?} {:?}, expected f32 {dims:?}",
                    other.dtype(),
                    other.dims()
                ))),
                None => Err(Error::Corrupt(format!("missing tensor {name}"))),
            }
        };
        for (p, s) in t.model.store.params_mut().iter_mut().zip(&mut t.opt) {
            let dims = p.value.dims().to_vec();
            p.value = f32_tensor(&p.name, &dims)?;
            s.m = f32_tensor(&format!("adamw.m.{}", p.name), &dims)?;
            s.v = f32_tensor(&format!("adamw.v.{}", p.name), &dims)?;
            s.t = ckpt.step as u64;
        }
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.data_rng = rng_from_words(&ckpt.rng)?;
        Ok(t)
    }
}

/// Seed (8 words), word position (4 words, low first) and stream (2 words).
fn rng_words(rng: &ChaCha8Rng) -> Vec<u32> {
    let mut words: Vec<u32> = rng
        .get_seed()
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    let stream = rng.get_stream();
    words.extend([stream as u32, (stream >> 32) as u32]);
    words
}

fn rng_from_words(words: &[u32]) -> Result<ChaCha8Rng> {
    if words.len() != 14 {
        return Err(Error::Corrupt(format!("expected 14 rng words, found {}", words.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(4).zip(&words[..8]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let pos = words[8..12].iter().rev().fold(0u128, |acc, &w| (acc << 32) | w as u128);
    let stream = (words[13] as u64) << 32 | words[12] as u64;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Trains a fresh model for `cfg.train.epochs` epochs.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(cfg)?;
    let rows = trainer.fit(manifest, cfg.train.epochs)?;
    Ok((trainer.checkpoint()?, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: String,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

fn check_classes(model: &Model, manifest: &DatasetManifest) -> Result<()> {
    if model.num_classes() != manifest.spec.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            model.num_classes(),
            manifest.spec.num_classes
        )));
    }
    Ok(())
}

/// Argmax predictions (ties to the lowest class) over `indices`, in order.
pub fn evaluate_indices(
    model: &Model,
    manifest: &DatasetManifest,
    indices: &[usize],
    batch_size: usize,
) -> Result<EvalReport> {
    check_classes(model, manifest)?;
    let mut predictions = Vec::with_capacity(indices.len());
    for batch in data::batches(manifest, indices, batch_size, None)? {
        let batch = batch?;
        let probs = model.predict(&batch.images)?;
        for (&i, pred) in batch.indices.iter().zip(ops::argmax_rows(&probs)) {
            let r = &manifest.records[i];
            predictions.push(Prediction {
                path: r.path.clone(),
                label: r.label,
                predicted: pred,
            });
        }
    }
    let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
    Ok(EvalReport {
        accuracy: correct as f64 / predictions.len().max(1) as f64,
        predictions,
    })
}

pub fn evaluate(model: &Model, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<EvalReport> {
    evaluate_indices(model, manifest, &manifest.indices(split), batch_size)
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes metrics with the fixed header even when there are no rows.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        return std::fs::write(path, "epoch,train_loss,train_acc,test_acc,wall_seconds\n").map_err(|e| Error::io(path, e));
    }
    write_csv(path, rows)
}
