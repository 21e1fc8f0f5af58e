//! Central finite-difference gradient checking in f64 (fourth-order stencil).

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward against central differences on up to `probes` random
/// coordinates of each input. `build` must record a scalar on the tape.
pub fn check<F>(inputs: &[Tensor<f64>], probes: usize, rng: &mut impl Rng, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok((tape.value(root).data()[0], tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let base_pattern = tape.relu_pattern();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.dims().to_vec()));
        let coords: Vec<usize> = if input.len() <= probes {
            (0..input.len()).collect()
        } else {
            sample(rng, input.len(), probes).into_vec()
        };
        for j in coords {
            let orig = input.data()[j];
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (slot, offset) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work[i].data_mut()[j] = orig + offset * STEP;
                let (value, pattern) = eval(&work)?;
                *slot = value;
                crossed |= pattern != base_pattern;
            }
            work[i].data_mut()[j] = orig;
            if crossed {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic.data()[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Records `sum(w * x) / sqrt(len)` with fixed random weights, a generic
/// scalar loss whose gradient reaches every element.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    let s = tape.sum(prod);
    let scale = tape.constant(Tensor::scalar(1.0 / (weights.len() as f64).sqrt()));
    tape.mul(s, scale)
}

/// Shapes and configurations exercised by [`run_suite`].
pub mod suite {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check, weighted_sum, GradCheckReport};
    use crate::classifier::{Backbone, BackboneConfig};
    use crate::error::Result;
    use crate::nn::{Bound, ParamStore};
    use crate::resizer::{Kiprn, KiprnConfig};
    use crate::tape::{Tape, Var};
    use crate::tensor::Tensor;

    const PROBES: usize = 12;

    fn rand_t(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::rand_uniform(dims, -1.0, 1.0, rng)
    }

    /// Values bounded away from zero so ReLU kinks are never straddled.
    fn away_from_zero(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    pub fn conv2d(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(k.max(3)..=7), rng.gen_range(k.max(3)..=7));
        let x = rand_t(vec![n, c, h, w], rng);
        let wt = rand_t(vec![o, c, k, k], rng);
        let b = rand_t(vec![o], rng);
        let probe = {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(wt.clone());
            let y = t.conv2d(xv, wv, None, stride, (k - 1) / 2)?;
            rand_t(t.value(y).dims().to_vec(), rng)
        };
        check(&[x, wt, b], PROBES, rng, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, (k - 1) / 2)?;
            weighted_sum(t, y, &probe)
        })
    }

    pub fn bilinear_resize(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let dims = vec![rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let (oh, ow) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let x = rand_t(dims.clone(), rng);
        let probe = rand_t(vec![dims[0], dims[1], oh, ow], rng);
        check(&[x], PROBES, rng, |t, v| {
            let y = t.bilinear_resize(v[0], oh, ow)?;
            weighted_sum(t, y, &probe)
        })
    }

    pub fn group_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let groups = rng.gen_range(1..=3);
        let c = groups * rng.gen_range(1..=2);
        let dims = vec![rng.gen_range(1..=2), c, rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let x = rand_t(dims.clone(), rng);
        let gamma = rand_t(vec![c], rng);
        let beta = rand_t(vec![c], rng);
        let probe = rand_t(dims, rng);
        check(&[x, gamma, beta], PROBES, rng, |t, v| {
            let y = t.group_norm(v[0], groups, v[1], v[2], 1e-5)?;
            weighted_sum(t, y, &probe)
        })
    }

    pub fn relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let dims = vec![rng.gen_range(1..=3), rng.gen_range(1..=4)];
        let x = away_from_zero(dims.clone(), rng);
        let probe = rand_t(dims, rng);
        check(&[x], PROBES, rng, |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &probe)
        })
    }

    pub fn global_avg_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let x = rand_t(vec![n, c, rng.gen_range(1..=5), rng.gen_range(1..=5)], rng);
        let probe = rand_t(vec![n, c], rng);
        check(&[x], PROBES, rng, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y, &probe)
        })
    }

    pub fn linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let (n, k, o) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let x = rand_t(vec![n, k], rng);
        let w = rand_t(vec![o, k], rng);
        let b = rand_t(vec![o], rng);
        let probe = rand_t(vec![n, o], rng);
        check(&[x, w, b], PROBES, rng, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, &probe)
        })
    }

    pub fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let (n, c) = (rng.gen_range(1..=4), rng.gen_range(2..=7));
        let logits = Tensor::rand_uniform(vec![n, c], -3.0, 3.0, rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        check(&[logits], PROBES, rng, |t, v| t.softmax_cross_entropy(v[0], &labels))
    }

    pub fn concat_channels(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (c1, c2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let a = rand_t(vec![n, c1, h, w], rng);
        let b = rand_t(vec![n, c2, h, w], rng);
        let probe = rand_t(vec![n, c1 + c2, h, w], rng);
        check(&[a, b], PROBES, rng, |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            weighted_sum(t, y, &probe)
        })
    }

    /// conv2d → relu → global average pool → sum, all parameters checked.
    pub fn composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let x = rand_t(vec![2, 2, 6, 6], rng);
        let w = rand_t(vec![3, 2, 3, 3], rng);
        let b = rand_t(vec![3], rng);
        check(&[x, w, b], PROBES, rng, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y = t.relu(y);
            let y = t.global_avg_pool(y)?;
            Ok(t.sum(y))
        })
    }

    /// Small resizer: three levels, one ResBlock per branch, narrow widths,
    /// nonzero projections so every parameter carries gradient.
    pub fn micro_config() -> KiprnConfig {
        let mut cfg = KiprnConfig::with_sizes(vec![(12, 12), (16, 16), (20, 20)]);
        cfg.pyconv_channels = (6, 4);
        cfg.branch_channels = 4;
        cfg.resblocks_per_branch = 1;
        cfg.zero_init_projection = false;
        cfg
    }

    fn params_with_input(store: &ParamStore<f64>, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        std::iter::once(x)
            .chain(store.params().iter().map(|p| p.value.clone()))
            .collect()
    }

    fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        // zero-initialised norm affines would make some gradients trivially symmetric
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }

    fn resizer_loss(model: &Kiprn, t: &mut Tape<f64>, v: &[Var], probes: &[Tensor<f64>], only_deltas: bool) -> Result<Var> {
        let p = Bound::from_vars(v[1..].to_vec());
        let levels = if only_deltas {
            let f = model.pyconv_extract(t, &p, v[0])?;
            model.kic_compensate(t, &p, f)?
        } else {
            model.forward(t, &p, v[0])?
        };
        let mut total = None;
        for (&l, probe) in levels.iter().zip(probes) {
            let s = weighted_sum(t, l, probe)?;
            total = Some(match total {
                Some(acc) => t.add(acc, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one level"))
    }

    fn resizer_check(cfg: &KiprnConfig, rng: &mut ChaCha8Rng, only_deltas: bool) -> Result<GradCheckReport> {
        let mut store = ParamStore::<f64>::new();
        let model = Kiprn::new(cfg, &mut store, rng)?;
        perturb(&mut store, rng);
        let x = rand_t(vec![1, 3, 24, 24], rng);
        let probes: Vec<Tensor<f64>> = cfg.level_sizes.iter().map(|&(h, w)| rand_t(vec![1, 3, h, w], rng)).collect();
        let inputs = params_with_input(&store, x);
        check(&inputs, 4, rng, |t, v| resizer_loss(&model, t, v, &probes, only_deltas))
    }

    /// Single-level, single-ResBlock compensation branch.
    pub fn kic_compensate(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let mut cfg = micro_config();
        cfg.level_sizes = vec![(16, 16)];
        cfg.num_levels = 1;
        resizer_check(&cfg, rng, true)
    }

    pub fn kiprn_forward(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        resizer_check(&micro_config(), rng, false)
    }

    /// Backbone plus summed-logit head plus cross-entropy on a two-level pyramid.
    pub fn multiscale_head(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let cfg = BackboneConfig {
            stage_channels: vec![2, 4],
            blocks_per_stage: 1,
            num_classes: 3,
        };
        let mut store = ParamStore::<f64>::new();
        let model = Backbone::new(&cfg, &mut store, rng)?;
        perturb(&mut store, rng);
        let a = rand_t(vec![2, 3, 8, 8], rng);
        let b = rand_t(vec![2, 3, 10, 10], rng);
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        let mut inputs = vec![a, b];
        inputs.extend(store.params().iter().map(|p| p.value.clone()));
        check(&inputs, 4, rng, |t, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            let logits = model.multiscale_logits(t, &p, &v[..2])?;
            t.softmax_cross_entropy(logits, &labels)
        })
    }

    pub type Case = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

    pub const CASES: &[(&str, Case)] = &[
        ("conv2d", conv2d),
        ("bilinear_resize", bilinear_resize),
        ("group_norm", group_norm),
        ("relu", relu),
        ("global_avg_pool", global_avg_pool),
        ("linear", linear),
        ("softmax_cross_entropy", softmax_cross_entropy),
        ("concat_channels", concat_channels),
        ("conv_relu_pool_sum", composite),
        ("kic_compensate", kic_compensate),
        ("kiprn_forward", kiprn_forward),
        ("multiscale_head", multiscale_head),
    ];

    /// Runs every case over `seeds` seeds, reporting the worst error per case.
    pub fn run(seeds: u64, base_seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
        CASES
            .iter()
            .map(|&(name, case)| {
                let mut total = GradCheckReport::default();
                for s in 0..seeds {
                    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
                    total = total.merge(case(&mut rng)?);
                }
                Ok((name, total))
            })
            .collect()
    }
}
