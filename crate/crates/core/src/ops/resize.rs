use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Source taps for one axis under the half-pixel-center convention.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    /// Destination `d` samples source coordinate `(d + 0.5) * in/out - 0.5`,
    /// clamped to `[0, in - 1]`.
    pub fn new(in_size: usize, out_size: usize) -> Self {
        let scale = in_size as f64 / out_size as f64;
        let max = (in_size - 1) as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_size),
            hi: Vec::with_capacity(out_size),
            w_lo: Vec::with_capacity(out_size),
            w_hi: Vec::with_capacity(out_size),
        };
        for d in 0..out_size {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_size - 1);
            let frac = src - lo as f64;
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_lo.push(1.0 - frac);
            taps.w_hi.push(frac);
        }
        taps
    }
}

fn check(input_dims: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize, usize)> {
    if out_h < 1 || out_w < 1 {
        return Err(Error::Argument(format!(
            "bilinear_resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    match *input_dims {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "bilinear_resize expects NCHW input, got {input_dims:?}"
        ))),
    }
}

/// Plain (non-antialiased) bilinear resize of every plane of an NCHW tensor.
pub fn bilinear_resize<T: Element>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check(input.dims(), out_h, out_w)?;
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let (wx0, wx1): (Vec<T>, Vec<T>) = tx
        .w_lo
        .iter()
        .zip(&tx.w_hi)
        .map(|(&a, &b)| (T::from_f64(a), T::from_f64(b)))
        .unzip();
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let r0 = &plane[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
            let r1 = &plane[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
            let wy0 = T::from_f64(ty.w_lo[oy]);
            let wy1 = T::from_f64(ty.w_hi[oy]);
            for ox in 0..out_w {
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let top = wx0[ox] * r0[x0] + wx1[ox] * r0[x1];
                let bottom = wx0[ox] * r1[x0] + wx1[ox] * r1[x1];
                out.push(wy0 * top + wy1 * bottom);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Scatters `grad_out` back onto the source grid with the forward blend weights.
pub fn bilinear_resize_backward<T: Element>(
    input_dims: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, _, out_h, out_w) = grad_out.nchw()?;
    let (n, c, h, w) = check(input_dims, out_h, out_w)?;
    if grad_out.dims()[..2] != [n, c] {
        return Err(Error::Shape(format!(
            "resize grad {:?} does not match input {input_dims:?}",
            grad_out.dims()
        )));
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut dx = vec![T::zero(); n * c * h * w];
    let g = grad_out.data();
    for p in 0..n * c {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let wy0 = T::from_f64(ty.w_lo[oy]);
            let wy1 = T::from_f64(ty.w_hi[oy]);
            let (y0, y1) = (ty.lo[oy] * w, ty.hi[oy] * w);
            for ox in 0..out_w {
                let go = gp[oy * out_w + ox];
                let wx0 = T::from_f64(tx.w_lo[ox]);
                let wx1 = T::from_f64(tx.w_hi[ox]);
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                plane[y0 + x0] += go * wy0 * wx0;
                plane[y0 + x1] += go * wy0 * wx1;
                plane[y1 + x0] += go * wy1 * wx0;
                plane[y1 + x1] += go * wy1 * wx1;
            }
        }
    }
    Tensor::new(input_dims.to_vec(), dx)
}
