//! Shared-weight CNN classifier applied to every pyramid level, the
//! summed-logit head, and class activation maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, GroupNorm, Linear, ParamStore, ResBlock, ResBlockSpec};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            num_classes: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage_channels must be non-empty and positive, got {:?}",
                self.stage_channels
            )));
        }
        if self.blocks_per_stage == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "blocks_per_stage and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Smallest admissible input side: one pixel left after every ×2 downsample.
    pub fn min_input(&self) -> usize {
        1 << self.stage_channels.len()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    norm: GroupNorm,
    blocks: Vec<ResBlock>,
}

/// Output of one backbone pass.
pub struct BackboneOutput {
    pub logits: Var,
    /// Last stage activations, before pooling.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<Stage>,
    head: Linear,
}

impl Backbone {
    pub fn new<T: Element>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let stem = Conv::new(store, rng, "backbone.stem", 3, c0, 3, 1);
        let stem_norm = GroupNorm::new(store, "backbone.stem.norm", c0);
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut prev = c0;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = Conv::new(store, rng, &format!("{name}.down"), prev, c, 3, 2);
            let norm = GroupNorm::new(store, &format!("{name}.down.norm"), c);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock::new(store, rng, &format!("{name}.block{b}"), ResBlockSpec::new(3, c)))
                .collect();
            stages.push(Stage { down, norm, blocks });
            prev = c;
        }
        let head = Linear::new(store, rng, "backbone.head", prev, cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<BackboneOutput> {
        let dims = tape.value(image).dims().to_vec();
        let min = self.cfg.min_input();
        match dims[..] {
            [_, 3, h, w] if h >= min && w >= min => {}
            _ => {
                return Err(Error::Shape(format!(
                    "backbone needs N x 3 x H x W input with H, W >= {min}, got {dims:?}"
                )))
            }
        }
        let h = self.stem.forward(tape, p, image)?;
        let h = self.stem_norm.forward(tape, p, h)?;
        let mut h = tape.relu(h);
        for stage in &self.stages {
            h = stage.down.forward(tape, p, h)?;
            h = stage.norm.forward(tape, p, h)?;
            h = tape.relu(h);
            for block in &stage.blocks {
                h = block.forward(tape, p, h)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.head.forward(tape, p, pooled)?;
        Ok(BackboneOutput { logits, features: h })
    }

    /// Summed per-level logits, accumulated in the given (ascending-size) order.
    pub fn multiscale_logits<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, levels: &[Var]) -> Result<Var> {
        let (first, rest) = levels
            .split_first()
            .ok_or_else(|| Error::Argument("empty pyramid".into()))?;
        let mut total = self.forward(tape, p, *first)?.logits;
        for &level in rest {
            let logits = self.forward(tape, p, level)?.logits;
            total = tape.add(total, logits)?;
        }
        Ok(total)
    }

    /// Probabilities and summed logits for a pyramid, without recording gradients.
    pub fn multiscale_predict<T: Element>(
        &self,
        store: &ParamStore<T>,
        levels: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vars: Vec<Var> = levels.iter().map(|l| tape.constant(l.clone())).collect();
        let logits = self.multiscale_logits(&mut tape, &p, &vars)?;
        let logits = tape.value(logits).clone();
        Ok((ops::softmax(&logits)?, logits))
    }

    /// Class activation map for one image, normalised to `[0, 1]` at the input resolution.
    pub fn cam<T: Element>(&self, store: &ParamStore<T>, image: &Tensor<T>, class_index: usize) -> Result<Tensor<T>> {
        if class_index >= self.cfg.num_classes {
            return Err(Error::Argument(format!(
                "class {class_index} out of range for {} classes",
                self.cfg.num_classes
            )));
        }
        let (n, _, h, w) = image.nchw()?;
        if n != 1 {
            return Err(Error::Shape(format!("cam takes a single image, got batch {n}")));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &p, x)?;
        let weights = &store.get(self.head.weight).value;
        let c = weights.dims()[1];
        let row = &weights.data()[class_index * c..(class_index + 1) * c];
        cam_from_features(tape.value(out.features), row, h, w)
    }
}

/// `minmax(resize(relu(sum_c w_c F_c)))`; an all-equal map becomes all zeros.
pub fn cam_from_features<T: Element>(features: &Tensor<T>, class_weights: &[T], h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, fh, fw) = features.nchw()?;
    if n != 1 || class_weights.len() != c {
        return Err(Error::Shape(format!(
            "cam needs one feature map stack with {} weights, got {:?}",
            class_weights.len(),
            features.dims()
        )));
    }
    let plane = fh * fw;
    let mut map = vec![T::zero(); plane];
    for (ch, &wc) in class_weights.iter().enumerate() {
        for (m, &f) in map.iter_mut().zip(&features.data()[ch * plane..(ch + 1) * plane]) {
            *m += wc * f;
        }
    }
    let map = ops::relu(&Tensor::new(vec![1, 1, fh, fw], map)?);
    let up = ops::bilinear_resize(&map, h, w)?;
    let lo = up.data().iter().fold(T::infinity(), |a, &v| a.min(v));
    let hi = up.data().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let range = hi - lo;
    let data = if range > T::zero() {
        up.data().iter().map(|&v| ((v - lo) / range).min(T::one())).collect()
    } else {
        vec![T::zero(); h * w]
    };
    Tensor::new(vec![h, w], data)
}
