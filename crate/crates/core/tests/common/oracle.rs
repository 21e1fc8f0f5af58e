//! Scalar transcriptions of kernel definitions, shared by the oracle tests
//! and the acceptance run.

use kiprn::ops::{bilinear_resize, conv2d};
use kiprn::optim::{adamw_step, AdamWConfig, AdamWState};
use kiprn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x[n,c,i*s+u-p, j*s+v-p]` in f64.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f32], xd: [usize; 4], w: &[f32], wd: [usize; 4], b: &[f32], s: usize, p: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wi] = xd;
    let [o, _, kh, kw] = wd;
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wi + 2 * p - kw) / s + 1;
    let mut y = vec![0f64; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oi] as f64;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (yy, xx) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wi as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + yy as usize) * wi + xx as usize] as f64;
                                acc += w[((oi * c + ci) * kh + u) * kw + v] as f64 * xv;
                            }
                        }
                    }
                    y[((ni * o + oi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, [n, o, oh, ow])
}

/// Compares `conv2d` with the oracle over a grid of small shapes.
/// Returns the number of shapes and the worst relative error.
pub fn conv_grid() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    let mut worst = 0f64;
    for batch in [1, 2] {
        for in_ch in [1, 3] {
            for out_ch in [1, 2, 5] {
                for k in [1, 3, 5] {
                    for stride in [1, 2] {
                        for pad in [0, k / 2] {
                            for (h, w) in [(5, 5), (6, 9), (11, 7)] {
                                if h + 2 * pad < k || w + 2 * pad < k {
                                    continue;
                                }
                                let x = Tensor::<f32>::rand_uniform(vec![batch, in_ch, h, w], -1.0, 1.0, &mut rng);
                                let wt = Tensor::<f32>::rand_uniform(vec![out_ch, in_ch, k, k], -1.0, 1.0, &mut rng);
                                let b = Tensor::<f32>::rand_uniform(vec![out_ch], -1.0, 1.0, &mut rng);
                                let got = conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
                                let (want, dims) = conv_oracle(
                                    x.data(),
                                    [batch, in_ch, h, w],
                                    wt.data(),
                                    [out_ch, in_ch, k, k],
                                    b.data(),
                                    stride,
                                    pad,
                                );
                                assert_eq!(got.dims(), &dims);
                                let scale = want.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
                                for (g, w) in got.data().iter().zip(&want) {
                                    let rel = (*g as f64 - w).abs() / scale;
                                    worst = worst.max(rel);
                                }
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}

/// Half-pixel bilinear sample of one output pixel, written out per axis.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let coord = |d: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, s - lo as f64)
    };
    let (y0, y1, fy) = coord(oy, h, oh);
    let (x0, x1, fx) = coord(ox, w, ow);
    let at = |y: usize, x: usize| src[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Worst absolute error of `bilinear_resize` against the scalar formula.
pub fn bilinear_grid() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for (h, w) in [(1, 1), (4, 4), (7, 5), (16, 9)] {
        for (oh, ow) in [(1, 1), (3, 8), (8, 8), (13, 4), (32, 20)] {
            let x = Tensor::<f64>::rand_uniform(vec![1, 2, h, w], -1.0, 1.0, &mut rng);
            let y = bilinear_resize(&x, oh, ow).unwrap();
            for c in 0..2 {
                let src = &x.data()[c * h * w..(c + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let want = bilinear_oracle(src, h, w, oh, ow, oy, ox);
                        let got = y.data()[(c * oh + oy) * ow + ox];
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Worst absolute error of one AdamW step against the scalar update.
pub fn adamw_single_step() -> f64 {
    let cfg = AdamWConfig {
        lr: 1e-3,
        weight_decay: 1e-2,
        ..AdamWConfig::default()
    };
    let p0 = [0.5f64, -1.25, 3.0, 0.0];
    let g = [0.1f64, -0.2, 0.0, 4.0];
    let m0 = [0.01f64, 0.0, -0.3, 0.2];
    let v0 = [0.001f64, 0.002, 0.0, 0.5];
    let t0 = 3u64;
    let mut p = Tensor::new(vec![4], p0.to_vec()).unwrap();
    let mut state = AdamWState {
        m: Tensor::new(vec![4], m0.to_vec()).unwrap(),
        v: Tensor::new(vec![4], v0.to_vec()).unwrap(),
        t: t0,
    };
    adamw_step(&mut p, &Tensor::new(vec![4], g.to_vec()).unwrap(), &mut state, &cfg).unwrap();
    assert_eq!(state.t, 4);
    let t = (t0 + 1) as i32;
    let mut worst = 0f64;
    for i in 0..4 {
        let decayed = p0[i] - cfg.lr * cfg.weight_decay * p0[i];
        let m = cfg.beta1 * m0[i] + (1.0 - cfg.beta1) * g[i];
        let v = cfg.beta2 * v0[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        let want = decayed - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        worst = worst.max((p.data()[i] - want).abs());
        worst = worst.max((state.m.data()[i] - m).abs());
        worst = worst.max((state.v.data()[i] - v).abs());
    }
    worst
}
