use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Forward output plus the per-(sample, group) statistics backward needs.
pub struct GroupNormOutput<T> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check<T: Element>(input: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.nchw()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Argument(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "group_norm affine params {:?}/{:?} do not match {c} channels",
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok((n, c, h * w))
}

pub fn group_norm<T: Element>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<GroupNormOutput<T>> {
    let (n, c, hw) = check(input, groups, gamma, beta)?;
    let cpg = c / groups;
    let count = T::from_f64((cpg * hw) as f64);
    let eps = T::from_f64(eps);
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cpg) * hw;
            let seg = &x[start..start + cpg * hw];
            let mean = seg.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let rstd = T::one() / (var + eps).sqrt();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let off = start + ci * hw;
                for i in off..off + hw {
                    out[i] = (x[i] - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    Ok(GroupNormOutput {
        output: Tensor::new(input.dims().to_vec(), out)?,
        mean: means,
        rstd: rstds,
    })
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    rstd: &[T],
    grad_out: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let (n, c, hw) = check(input, groups, gamma, beta)?;
    input.expect_same_shape(grad_out)?;
    let cpg = c / groups;
    let count = T::from_f64((cpg * hw) as f64);
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for g in 0..groups {
            let (mu, rs) = (mean[s * groups + g], rstd[s * groups + g]);
            let start = (s * c + g * cpg) * hw;
            // sums of dŷ and dŷ·x̂ over the group, where dŷ = dy·γ
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let ga = gamma.data()[ch];
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * rs;
                    dgamma[ch] += dy[i] * xhat;
                    dbeta[ch] += dy[i];
                    sum_d += dy[i] * ga;
                    sum_dx += dy[i] * ga * xhat;
                }
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            for ci in 0..cpg {
                let ga = gamma.data()[g * cpg + ci];
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * rs;
                    dx[i] = rs * (dy[i] * ga - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(input.dims().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

/// Group count used throughout the networks: the largest divisor of `channels` not above 8.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channels_map_to_beta() {
        let x = Tensor::<f64>::from_fn(vec![2, 4, 3, 3], |i| (i / 9) as f64);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::full(vec![4], 0.7);
        // groups = 4 → each group is one constant channel
        let y = group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap().output;
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 6, 2, 2]);
        let p = Tensor::full(vec![6], 1.0);
        assert!(matches!(group_norm(&x, 4, &p, &p, 1e-5), Err(Error::Argument(_))));
    }

    #[test]
    fn default_groups_divides() {
        assert_eq!(default_groups(16), 8);
        assert_eq!(default_groups(24), 8);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(3), 3);
        assert_eq!(default_groups(1), 1);
        for c in 1..100 {
            assert_eq!(c % default_groups(c), 0);
        }
    }
}
