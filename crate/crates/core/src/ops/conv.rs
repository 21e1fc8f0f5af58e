use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::map_samples;

/// Upper bound on im2col tile elements; keeps big-kernel convs on large maps
/// from materialising the whole unfolded input.
const TILE_ELEMS: usize = 1 << 18;

/// Stride-1 convolutions with at most this many output channels skip
/// im2col and accumulate shifted input rows directly.
const DIRECT_MAX_OUT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[oc, ic, kh, kw]) = (input, weight) else {
            return Err(Error::Shape(format!(
                "conv2d expects NCHW input and [out, in, kh, kw] weight, got {input:?} and {weight:?}"
            )));
        };
        if ic != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {input:?} vs weight {weight:?}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k {
                return Err(Error::Shape(format!(
                    "conv2d output size not positive: input {input:?}, weight {weight:?}, padding {padding}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: oc,
            kh,
            kw,
            stride,
            padding,
            out_h: out(h, kh)?,
            out_w: out(w, kw)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Convolution of one sample (`in_ch x in_h x in_w`) into `out` (`out_ch x out_h x out_w`).
    fn forward_sample<T: Element>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let plane = self.out_h * self.out_w;
        let k = self.patch_len();
        if self.is_direct() {
            self.direct_forward(x, w, out);
            return;
        }
        if self.is_pointwise() {
            unsafe {
                T::gemm(
                    self.out_ch, k, plane, T::one(), w.as_ptr(), k as isize, 1, x.as_ptr(),
                    plane as isize, 1, T::zero(), out.as_mut_ptr(), plane as isize, 1,
                );
            }
            return;
        }
        let rows = self.rows_per_tile();
        let mut col = vec![T::zero(); k * rows * self.out_w];
        let mut r0 = 0;
        while r0 < self.out_h {
            let r1 = (r0 + rows).min(self.out_h);
            let cols = (r1 - r0) * self.out_w;
            self.im2col(x, r0, r1, &mut col);
            unsafe {
                T::gemm(
                    self.out_ch, k, cols, T::one(), w.as_ptr(), k as isize, 1, col.as_ptr(),
                    cols as isize, 1, T::zero(), out.as_mut_ptr().add(r0 * self.out_w),
                    plane as isize, 1,
                );
            }
            r0 = r1;
        }
    }

    fn is_direct(&self) -> bool {
        self.stride == 1 && self.out_ch <= DIRECT_MAX_OUT && !self.is_pointwise()
    }

    /// `out[co, oy, :] += w[co, ci, ki, kj] * x[ci, oy + ki - p, : + kj - p]` over all taps.
    fn direct_forward<T: Element>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (in_plane, out_plane) = (self.in_h * self.in_w, self.out_h * self.out_w);
        out.fill(T::zero());
        for co in 0..self.out_ch {
            let dst = &mut out[co * out_plane..(co + 1) * out_plane];
            for ci in 0..self.in_ch {
                let src = &x[ci * in_plane..(ci + 1) * in_plane];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let wv = w[((co * self.in_ch + ci) * self.kh + ki) * self.kw + kj];
                        let (lo, hi) = self.valid_cols(kj);
                        for oy in 0..self.out_h {
                            let iy = (oy + ki).wrapping_sub(self.padding);
                            if iy >= self.in_h {
                                continue;
                            }
                            let first = iy * self.in_w + lo + kj - self.padding;
                            let row = &mut dst[oy * self.out_w + lo..oy * self.out_w + hi];
                            for (o, &v) in row.iter_mut().zip(&src[first..first + (hi - lo)]) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Weight gradient of one sample by direct correlation, accumulated into `dw`.
    fn direct_weight_grad<T: Element>(&self, x: &[T], dy: &[T], dw: &mut [T]) {
        let (in_plane, out_plane) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for co in 0..self.out_ch {
            let g = &dy[co * out_plane..(co + 1) * out_plane];
            for ci in 0..self.in_ch {
                let src = &x[ci * in_plane..(ci + 1) * in_plane];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let (lo, hi) = self.valid_cols(kj);
                        let mut acc = T::zero();
                        for oy in 0..self.out_h {
                            let iy = (oy + ki).wrapping_sub(self.padding);
                            if iy >= self.in_h {
                                continue;
                            }
                            let first = iy * self.in_w + lo + kj - self.padding;
                            let row = &g[oy * self.out_w + lo..oy * self.out_w + hi];
                            acc += dot(row, &src[first..first + (hi - lo)]);
                        }
                        dw[((co * self.in_ch + ci) * self.kh + ki) * self.kw + kj] += acc;
                    }
                }
            }
        }
    }

    /// For stride 1 and square kernels the input gradient is itself a
    /// convolution of the output gradient with the flipped, transposed
    /// kernel; returns that geometry and kernel.
    fn transposed<T: Element>(&self, w: &[T]) -> Option<(ConvGeometry, Vec<T>)> {
        if self.stride != 1 || self.kh != self.kw || self.padding >= self.kh {
            return None;
        }
        let (kh, kw) = (self.kh, self.kw);
        let mut flipped = vec![T::zero(); w.len()];
        for co in 0..self.out_ch {
            for ci in 0..self.in_ch {
                for i in 0..kh {
                    for j in 0..kw {
                        flipped[((ci * self.out_ch + co) * kh + kh - 1 - i) * kw + kw - 1 - j] =
                            w[((co * self.in_ch + ci) * kh + i) * kw + j];
                    }
                }
            }
        }
        let g = ConvGeometry {
            batch: self.batch,
            in_ch: self.out_ch,
            in_h: self.out_h,
            in_w: self.out_w,
            out_ch: self.in_ch,
            kh,
            kw,
            stride: 1,
            padding: kh - 1 - self.padding,
            out_h: self.in_h,
            out_w: self.in_w,
        };
        Some((g, flipped))
    }

    /// Output columns `[lo, hi)` whose input column for kernel offset `kj` lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kj).div_ceil(s).min(self.out_w);
        let hi = if self.in_w + p > kj {
            ((self.in_w - 1 + p - kj) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Unfolds output rows `[r0, r1)` of one sample into `col` (`patch_len x rows*out_w`).
    fn im2col<T: Element>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let cols = (r1 - r0) * self.out_w;
        let (s, p) = (self.stride, self.padding);
        let mut row = 0;
        for ci in 0..self.in_ch {
            let plane = &x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for (oy, out) in (r0..r1).zip(dst.chunks_exact_mut(self.out_w)) {
                        let iy = (oy * s + ki).wrapping_sub(p);
                        if iy >= self.in_h {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let first = lo * s + kj - p;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (o, v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Inverse of [`Self::im2col`]: accumulates `col` back into `dx`.
    fn col2im<T: Element>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let cols = (r1 - r0) * self.out_w;
        let (s, p) = (self.stride, self.padding);
        let mut row = 0;
        for ci in 0..self.in_ch {
            let plane = &mut dx[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let src = &col[row * cols..(row + 1) * cols];
                    for (oy, grad) in (r0..r1).zip(src.chunks_exact(self.out_w)) {
                        let iy = (oy * s + ki).wrapping_sub(p);
                        if iy >= self.in_h {
                            continue;
                        }
                        let first = iy * self.in_w + lo * s + kj - p;
                        let dst = plane[first..].iter_mut().step_by(s);
                        for (d, &g) in dst.zip(&grad[lo..hi]) {
                            *d += g;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// 2-D cross-correlation over an NCHW batch.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.dims(), weight.dims(), stride, padding)?;
    if let Some(b) = bias {
        if b.dims() != [g.out_ch] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.dims(),
                g.out_ch
            )));
        }
    }
    let plane = g.out_h * g.out_w;
    let w = weight.data();
    let per_sample = map_samples(g.batch, |n| {
        let mut out = vec![T::zero(); g.out_ch * plane];
        g.forward_sample(input.sample(n), w, &mut out);
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut out[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
        out
    });
    Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], per_sample.concat())
}

/// Gradients of [`conv2d`]; entries are `None` when not requested.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(input.dims(), weight.dims(), stride, padding)?;
    if grad_out.dims() != [g.batch, g.out_ch, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "conv2d grad shape {:?} does not match output shape {:?}",
            grad_out.dims(),
            [g.batch, g.out_ch, g.out_h, g.out_w]
        )));
    }
    let plane = g.out_h * g.out_w;
    let k = g.patch_len();
    let w = weight.data();
    let in_len = g.in_ch * g.in_h * g.in_w;

    let transposed = if want_input { g.transposed(w) } else { None };
    let per_sample = map_samples(g.batch, |n| {
        let x = input.sample(n);
        let dy = grad_out.sample(n);
        let mut dx = if want_input { vec![T::zero(); in_len] } else { Vec::new() };
        let want_input = match &transposed {
            Some((gt, wt)) => {
                gt.forward_sample(dy, wt, &mut dx);
                false
            }
            None => want_input,
        };
        let mut dw = if want_weight { vec![T::zero(); g.out_ch * k] } else { Vec::new() };
        let want_weight = if want_weight && g.is_direct() {
            g.direct_weight_grad(x, dy, &mut dw);
            false
        } else {
            want_weight
        };
        if !want_input && !want_weight {
            return (dx, dw);
        }
        if g.is_pointwise() {
            unsafe {
                if want_weight {
                    T::gemm(
                        g.out_ch, plane, k, T::one(), dy.as_ptr(), plane as isize, 1, x.as_ptr(),
                        1, plane as isize, T::zero(), dw.as_mut_ptr(), k as isize, 1,
                    );
                }
                if want_input {
                    T::gemm(
                        k, g.out_ch, plane, T::one(), w.as_ptr(), 1, k as isize, dy.as_ptr(),
                        plane as isize, 1, T::zero(), dx.as_mut_ptr(), plane as isize, 1,
                    );
                }
            }
        } else {
            let rows = g.rows_per_tile();
            let mut col = vec![T::zero(); k * rows * g.out_w];
            let mut dcol = if want_input { vec![T::zero(); k * rows * g.out_w] } else { Vec::new() };
            let mut r0 = 0;
            while r0 < g.out_h {
                let r1 = (r0 + rows).min(g.out_h);
                let cols = (r1 - r0) * g.out_w;
                let dy_tile = unsafe { dy.as_ptr().add(r0 * g.out_w) };
                unsafe {
                    if want_weight {
                        g.im2col(x, r0, r1, &mut col);
                        T::gemm(
                            g.out_ch, cols, k, T::one(), dy_tile, plane as isize, 1, col.as_ptr(),
                            1, cols as isize, T::one(), dw.as_mut_ptr(), k as isize, 1,
                        );
                    }
                    if want_input {
                        T::gemm(
                            k, g.out_ch, cols, T::one(), w.as_ptr(), 1, k as isize, dy_tile,
                            plane as isize, 1, T::zero(), dcol.as_mut_ptr(), cols as isize, 1,
                        );
                        g.col2im(&dcol, r0, r1, &mut dx);
                    }
                }
                r0 = r1;
            }
        }
        (dx, dw)
    });

    let mut dx_all = Vec::new();
    let mut dw_total = if want_weight { Some(vec![T::zero(); g.out_ch * k]) } else { None };
    for (dx, dw) in per_sample {
        dx_all.extend_from_slice(&dx);
        if let Some(total) = dw_total.as_mut() {
            for (t, v) in total.iter_mut().zip(dw) {
                *t += v;
            }
        }
    }
    let bias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for n in 0..g.batch {
            let dy = grad_out.sample(n);
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy[o * plane..(o + 1) * plane]
                    .iter()
                    .fold(T::zero(), |s, &v| s + v);
            }
        }
        Tensor::new(vec![g.out_ch], db)
    });
    Ok(Conv2dGrads {
        input: if want_input { Some(Tensor::new(input.dims().to_vec(), dx_all)?) } else { None },
        weight: dw_total.map(|d| Tensor::new(weight.dims().to_vec(), d)).transpose()?,
        bias: bias.transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::<f32>::from_fn(vec![1, 1, 3, 3], |i| i as f32 * 0.5 - 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_patch() {
        let x = Tensor::<f32>::from_fn(vec![1, 1, 3, 3], |i| (i + 1) as f32);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn same_padding_keeps_spatial_dims() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 7, 5]);
        let w = Tensor::zeros(vec![4, 3, 5, 5]);
        assert_eq!(conv2d(&x, &w, None, 1, 2).unwrap().dims(), &[2, 4, 7, 5]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        let msg = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");

        let w = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape(_))));
        let w = Tensor::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn tiled_path_matches_single_tile() {
        // Large enough that rows_per_tile < out_h.
        let x = Tensor::<f64>::from_fn(vec![1, 8, 64, 96], |i| ((i * 7919) % 13) as f64 - 6.0);
        let w = Tensor::<f64>::from_fn(vec![2, 8, 7, 7], |i| ((i * 31) % 5) as f64 - 2.0);
        let g = ConvGeometry::new(x.dims(), w.dims(), 1, 3).unwrap();
        assert!(g.rows_per_tile() < g.out_h);
        let y = conv2d(&x, &w, None, 1, 3).unwrap();
        // spot-check one interior and one border output
        for &(o, oy, ox) in &[(1usize, 30usize, 40usize), (0, 0, 95)] {
            let mut acc = 0.0;
            for c in 0..8 {
                for ki in 0..7 {
                    for kj in 0..7 {
                        let iy = oy as isize + ki as isize - 3;
                        let ix = ox as isize + kj as isize - 3;
                        if (0..64).contains(&iy) && (0..96).contains(&ix) {
                            acc += x.data()[(c * 64 + iy as usize) * 96 + ix as usize]
                                * w.data()[((o * 8 + c) * 7 + ki) * 7 + kj];
                        }
                    }
                }
            }
            assert_eq!(y.data()[(o * 64 + oy) * 96 + ox], acc);
        }
    }
}
