use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Subgradient at zero is taken as zero.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let hw = h * w;
    let denom = T::from_f64(hw as f64);
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Element>(input_dims: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_dims else {
        return Err(Error::Shape(format!("expected NCHW dims, got {input_dims:?}")));
    };
    if grad_out.dims() != [n, c] {
        return Err(Error::Shape(format!(
            "pool grad {:?} does not match [{n}, {c}]",
            grad_out.dims()
        )));
    }
    let denom = T::from_f64((h * w) as f64);
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / denom, h * w));
    }
    Tensor::new(input_dims.to_vec(), dx)
}

/// `x [N, K] @ weight[O, K]^T + bias [O]`.
pub fn linear<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (&[n, k], &[o, k2]) = (input.dims(), weight.dims()) else {
        return Err(Error::Shape(format!(
            "linear expects [N, K] input and [O, K] weight, got {:?} and {:?}",
            input.dims(),
            weight.dims()
        )));
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "linear feature mismatch: {:?} vs {:?}",
            input.dims(),
            weight.dims()
        )));
    }
    let mut out = vec![T::zero(); n * o];
    for s in 0..n {
        let x = &input.data()[s * k..(s + 1) * k];
        for j in 0..o {
            let w = &weight.data()[j * k..(j + 1) * k];
            let mut acc = x.iter().zip(w).fold(T::zero(), |a, (&xi, &wi)| a + xi * wi);
            if let Some(b) = bias {
                acc += b.data()[j];
            }
            out[s * o + j] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, k) = (input.dims()[0], input.dims()[1]);
    let o = weight.dims()[0];
    if grad_out.dims() != [n, o] {
        return Err(Error::Shape(format!(
            "linear grad {:?} does not match [{n}, {o}]",
            grad_out.dims()
        )));
    }
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); n * k];
    let mut dw = vec![T::zero(); o * k];
    let mut db = vec![T::zero(); o];
    for s in 0..n {
        for j in 0..o {
            let gj = g[s * o + j];
            db[j] += gj;
            for i in 0..k {
                dx[s * k + i] += gj * w[j * k + i];
                dw[j * k + i] += gj * x[s * k + i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, k], dx)?,
        weight: Tensor::new(vec![o, k], dw)?,
        bias: Tensor::new(vec![o], db)?,
    })
}

/// Row-wise softmax of `[N, C]` logits, max-subtracted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, c] = logits.dims() else {
        return Err(Error::Shape(format!("softmax expects [N, C], got {:?}", logits.dims())));
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(logits.dims().to_vec(), out)
}

fn check_labels(c: usize, labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels`; also returns the softmax for reuse in backward.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, c] = logits.dims() else {
        return Err(Error::Shape(format!(
            "cross entropy expects [N, C] logits, got {:?}",
            logits.dims()
        )));
    };
    check_labels(c, labels, n)?;
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        // log-sum-exp relative to the row max, via ln_1p over the non-max terms
        let top = argmax_slice(row);
        let max = row[top];
        let rest = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .fold(T::zero(), |a, (_, &v)| a + (v - max).exp());
        total += rest.ln_1p() - (row[y] - max);
    }
    Ok((total / T::from_f64(n as f64), softmax(logits)?))
}

/// `(softmax - onehot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Result<Tensor<T>> {
    let (n, c) = (probs.dims()[0], probs.dims()[1]);
    check_labels(c, labels, n)?;
    let scale = upstream / T::from_f64(n as f64);
    let mut g = probs.data().to_vec();
    for (s, &y) in labels.iter().enumerate() {
        g[s * c + y] -= T::one();
    }
    for v in &mut g {
        *v *= scale;
    }
    Tensor::new(probs.dims().to_vec(), g)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.nchw()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat mismatch: {:?} vs {:?}",
                first.dims(),
                p.dims()
            )));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for s in 0..n {
        for p in parts {
            out.extend_from_slice(p.sample(s));
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Element>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.nchw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!("cannot split {c} channels as {channels:?}")));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for s in 0..n {
        let sample = grad.sample(s);
        let mut off = 0;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&sample[off * hw..(off + pc) * hw]);
            off += pc;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(vec![n, pc, h, w], d))
        .collect()
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Element>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.dims()[scores.rank() - 1];
    scores.data().chunks(c).map(argmax_slice).collect()
}

fn argmax_slice<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new(vec![4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let neg = Tensor::<f32>::full(vec![3], -1.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_is_mean() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let l = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_stay_accurate() {
        let l = Tensor::<f64>::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((loss - expected).abs() / expected < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let l = Tensor::<f32>::zeros(vec![1, 3]);
        assert!(matches!(softmax_cross_entropy(&l, &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let s = Tensor::<f32>::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&s), vec![0, 1]);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Tensor::<f32>::from_fn(vec![2, 1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![2, 3, 2, 2], |i| -(i as f32));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 4, 2, 2]);
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
