//! The resizing pre-network: bilinear pyramid, pyramidal-convolution feature
//! extraction, and kernel-inversed compensation branches whose outputs are
//! added onto the bilinear levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvUnit, GroupNorm, ParamStore, PyConv, ResBlock, ResBlockSpec};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// How kernel sizes are assigned to pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// Largest level gets the smallest kernel.
    Inversed,
    /// Smallest level gets the smallest kernel.
    Forward,
    /// One kernel size everywhere.
    Uniform(usize),
}

/// Where pyramidal convolutions sit inside the resizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PyconvPlacement {
    /// The two feature-extraction layers.
    First,
    /// The last two convolutions of every branch.
    Last,
    /// Extraction layers and every branch ResBlock.
    All,
    /// Plain 3x3 convolutions everywhere.
    None,
    /// Every branch ResBlock; plain extraction.
    Resblock,
}

impl PyconvPlacement {
    fn pyramidal_extraction(self) -> bool {
        matches!(self, PyconvPlacement::First | PyconvPlacement::All)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KiprnConfig {
    pub num_levels: usize,
    /// `(height, width)` per level, ascending by area.
    pub level_sizes: Vec<(usize, usize)>,
    pub pyconv_layer1_kernels: Vec<usize>,
    pub pyconv_layer2_kernels: Vec<usize>,
    /// Total output channels of the two extraction layers.
    pub pyconv_channels: (usize, usize),
    pub kernel_mode: KernelMode,
    pub resblocks_per_branch: usize,
    pub branch_channels: usize,
    pub zero_init_projection: bool,
    pub pyconv_placement: PyconvPlacement,
}

/// Defaults to the desk preset; see [`KiprnConfig::paper`] for the full-size pyramid.
impl Default for KiprnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl KiprnConfig {
    pub fn with_sizes(level_sizes: Vec<(usize, usize)>) -> Self {
        Self {
            num_levels: level_sizes.len(),
            level_sizes,
            pyconv_layer1_kernels: vec![3, 5, 7],
            pyconv_layer2_kernels: vec![1, 3],
            pyconv_channels: (24, 16),
            kernel_mode: KernelMode::Inversed,
            resblocks_per_branch: 2,
            branch_channels: 16,
            zero_init_projection: true,
            pyconv_placement: PyconvPlacement::First,
        }
    }

    /// 300/400/500 square levels.
    pub fn paper() -> Self {
        Self::with_sizes(vec![(300, 300), (400, 400), (500, 500)])
    }

    /// The 96/128/160 preset (same 3:4:5 ratio as 300/400/500).
    pub fn desk() -> Self {
        Self::with_sizes(vec![(96, 96), (128, 128), (160, 160)])
    }

    pub fn largest_level(&self) -> (usize, usize) {
        *self.level_sizes.last().expect("validated config has levels")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.level_sizes.is_empty() {
            return bad("level_sizes must not be empty".into());
        }
        if self.num_levels != self.level_sizes.len() {
            return bad(format!(
                "num_levels is {} but {} level sizes are given",
                self.num_levels,
                self.level_sizes.len()
            ));
        }
        if self.level_sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return bad(format!("level sizes must be positive: {:?}", self.level_sizes));
        }
        if self.level_sizes.windows(2).any(|p| p[0].0 * p[0].1 >= p[1].0 * p[1].1) {
            return bad(format!(
                "level sizes must be strictly increasing by area: {:?}",
                self.level_sizes
            ));
        }
        for (name, set) in [
            ("pyconv_layer1_kernels", &self.pyconv_layer1_kernels),
            ("pyconv_layer2_kernels", &self.pyconv_layer2_kernels),
        ] {
            if set.is_empty() || set.iter().any(|k| k % 2 == 0) {
                return bad(format!("{name} must be non-empty odd sizes, got {set:?}"));
            }
        }
        let (c1, c2) = self.pyconv_channels;
        if c1 == 0 || c2 == 0 {
            return bad("pyconv channel totals must be positive".into());
        }
        if self.pyconv_placement.pyramidal_extraction()
            && (c1 % self.pyconv_layer1_kernels.len() != 0 || c2 % self.pyconv_layer2_kernels.len() != 0)
        {
            return bad(format!(
                "pyconv channels {:?} not divisible by kernel counts ({}, {})",
                self.pyconv_channels,
                self.pyconv_layer1_kernels.len(),
                self.pyconv_layer2_kernels.len()
            ));
        }
        if self.resblocks_per_branch == 0 || self.branch_channels == 0 {
            return bad("resblocks_per_branch and branch_channels must be positive".into());
        }
        if let KernelMode::Uniform(k) = self.kernel_mode {
            if k % 2 == 0 {
                return bad(format!("uniform kernel must be odd, got {k}"));
            }
        }
        let pyramidal_blocks = matches!(
            self.pyconv_placement,
            PyconvPlacement::Last | PyconvPlacement::Resblock | PyconvPlacement::All
        );
        let widest = self.pyconv_layer1_kernels.len().max(self.pyconv_layer2_kernels.len());
        if pyramidal_blocks && self.branch_channels < widest {
            return bad(format!(
                "branch_channels {} too small for pyramidal ResBlock convs",
                self.branch_channels
            ));
        }
        Ok(())
    }
}

/// One kernel size per level (levels ascending by area).
pub fn kernel_assignment(level_sizes: &[(usize, usize)], mode: KernelMode) -> Vec<usize> {
    let m = level_sizes.len();
    let ascending = (0..m).map(|i| 3 + 2 * i);
    match mode {
        KernelMode::Forward => ascending.collect(),
        KernelMode::Inversed => ascending.rev().collect(),
        KernelMode::Uniform(k) => vec![k; m],
    }
}

/// A set of per-level image tensors, each tagged with its `(h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Element> ImagePyramid<T> {
    pub fn from_tape(tape: &Tape<T>, vars: &[Var]) -> Self {
        Self {
            levels: vars.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dims()[2], l.dims()[3])).collect()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Bilinear pyramid of `x` at the configured level sizes. No parameters.
pub fn resize_pyramid<T: Element>(x: &Tensor<T>, cfg: &KiprnConfig) -> Result<ImagePyramid<T>> {
    Ok(ImagePyramid {
        levels: cfg
            .level_sizes
            .iter()
            .map(|&(h, w)| ops::bilinear_resize(x, h, w))
            .collect::<Result<_>>()?,
    })
}

/// Tape form of [`resize_pyramid`].
pub fn record_resize_pyramid<T: Element>(tape: &mut Tape<T>, x: Var, cfg: &KiprnConfig) -> Result<Vec<Var>> {
    cfg.level_sizes
        .iter()
        .map(|&(h, w)| tape.bilinear_resize(x, h, w))
        .collect()
}

/// `s_j = delta_j + I_j` per level.
pub fn assemble_pyramid<T: Element>(deltas: &[Tensor<T>], base: &ImagePyramid<T>) -> Result<ImagePyramid<T>> {
    if deltas.len() != base.levels.len() {
        return Err(Error::Shape(format!(
            "{} deltas for a {}-level pyramid",
            deltas.len(),
            base.levels.len()
        )));
    }
    Ok(ImagePyramid {
        levels: deltas
            .iter()
            .zip(&base.levels)
            .map(|(d, i)| d.zip_map(i, |a, b| a + b))
            .collect::<Result<_>>()?,
    })
}

pub fn record_assemble_pyramid<T: Element>(tape: &mut Tape<T>, deltas: &[Var], base: &[Var]) -> Result<Vec<Var>> {
    if deltas.len() != base.len() {
        return Err(Error::Shape(format!(
            "{} deltas for a {}-level pyramid",
            deltas.len(),
            base.len()
        )));
    }
    deltas.iter().zip(base).map(|(&d, &i)| tape.add(d, i)).collect()
}

#[derive(Clone, Debug)]
struct ExtractLayer {
    conv: ConvUnit,
    norm: GroupNorm,
}

#[derive(Clone, Debug)]
struct Branch {
    size: (usize, usize),
    lift: Conv,
    blocks: Vec<ResBlock>,
    project: Conv,
}

/// The trainable resizer: parameters live in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Kiprn {
    cfg: KiprnConfig,
    extract: Vec<ExtractLayer>,
    branches: Vec<Branch>,
}

impl Kiprn {
    pub fn new<T: Element>(cfg: &KiprnConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let placement = cfg.pyconv_placement;
        let (c1, c2) = cfg.pyconv_channels;

        let mut extract = Vec::with_capacity(2);
        for (i, (in_ch, out_ch, kernels)) in [
            (3, c1, &cfg.pyconv_layer1_kernels),
            (c1, c2, &cfg.pyconv_layer2_kernels),
        ]
        .into_iter()
        .enumerate()
        {
            let name = format!("kiprn.extract{}", i + 1);
            let conv = if placement.pyramidal_extraction() {
                ConvUnit::Pyramid(PyConv::new(store, rng, &name, in_ch, out_ch, kernels)?)
            } else {
                ConvUnit::Plain(Conv::new(store, rng, &name, in_ch, out_ch, 3, 1))
            };
            let norm = GroupNorm::new(store, &format!("{name}.norm"), out_ch);
            extract.push(ExtractLayer { conv, norm });
        }

        let kernels = kernel_assignment(&cfg.level_sizes, cfg.kernel_mode);
        let bc = cfg.branch_channels;
        let mut branches = Vec::with_capacity(cfg.num_levels);
        for (j, (&size, &k)) in cfg.level_sizes.iter().zip(&kernels).enumerate() {
            let name = format!("kiprn.branch{j}");
            let lift = Conv::new(store, rng, &format!("{name}.lift"), c2, bc, 1, 1);
            let mut blocks = Vec::with_capacity(cfg.resblocks_per_branch);
            for b in 0..cfg.resblocks_per_branch {
                let block_name = format!("{name}.block{b}");
                let spec = ResBlockSpec::new(k, bc);
                let pyramidal = match placement {
                    PyconvPlacement::Resblock | PyconvPlacement::All => true,
                    PyconvPlacement::Last => b + 1 == cfg.resblocks_per_branch,
                    PyconvPlacement::First | PyconvPlacement::None => false,
                };
                blocks.push(if pyramidal {
                    ResBlock::pyramidal(
                        store,
                        rng,
                        &block_name,
                        spec,
                        &cfg.pyconv_layer1_kernels,
                        &cfg.pyconv_layer2_kernels,
                    )?
                } else {
                    ResBlock::new(store, rng, &block_name, spec)
                });
            }
            let project = if cfg.zero_init_projection {
                Conv::zeroed(store, &format!("{name}.project"), bc, 3, 1)
            } else {
                Conv::new(store, rng, &format!("{name}.project"), bc, 3, 1, 1)
            };
            branches.push(Branch {
                size,
                lift,
                blocks,
                project,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            extract,
            branches,
        })
    }

    pub fn config(&self) -> &KiprnConfig {
        &self.cfg
    }

    /// Kernel size used by each branch's ResBlocks.
    pub fn branch_kernels(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.blocks[0].spec.kernel_size).collect()
    }

    /// Feature map `f`: two extraction layers, each conv → relu → group norm.
    pub fn pyconv_extract<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.extract {
            h = layer.conv.forward(tape, p, h)?;
            h = tape.relu(h);
            h = layer.norm.forward(tape, p, h)?;
        }
        Ok(h)
    }

    /// Per-level compensation deltas from the feature map.
    pub fn kic_compensate<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Vec<Var>> {
        let fc = tape.value(f).dims().get(1).copied();
        if fc != Some(self.cfg.pyconv_channels.1) {
            return Err(Error::Shape(format!(
                "feature map {:?} does not have {} channels",
                tape.value(f).dims(),
                self.cfg.pyconv_channels.1
            )));
        }
        self.branches
            .iter()
            .map(|b| {
                let resized = tape.bilinear_resize(f, b.size.0, b.size.1)?;
                let mut h = b.lift.forward(tape, p, resized)?;
                for block in &b.blocks {
                    h = block.forward(tape, p, h)?;
                }
                b.project.forward(tape, p, h)
            })
            .collect()
    }

    /// Full resizer: compensated pyramid `S` for an `N x 3 x H x W` batch.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        check_image(tape.value(x))?;
        let f = self.pyconv_extract(tape, p, x)?;
        let deltas = self.kic_compensate(tape, p, f)?;
        let base = record_resize_pyramid(tape, x, &self.cfg)?;
        record_assemble_pyramid(tape, &deltas, &base)
    }

    /// Gradient-free evaluation of [`Self::forward`].
    pub fn run<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<ImagePyramid<T>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(ImagePyramid::from_tape(&tape, &out))
    }
}

fn check_image<T: Element>(x: &Tensor<T>) -> Result<()> {
    match x.dims() {
        [_, 3, _, _] => Ok(()),
        d => Err(Error::Shape(format!("expected N x 3 x H x W images, got {d:?}"))),
    }
}
