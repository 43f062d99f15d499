use crate::error::{Error, Result};
use crate::tensor::Real;

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
pub(super) struct Saved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

pub(super) fn check_shapes(input: &[usize], gamma: &[usize], beta: &[usize]) -> Result<()> {
    if input.len() != 4 {
        return Err(Error::dim(format!(
            "batch_norm expects [B,C,H,W], got {input:?}"
        )));
    }
    let c = input[1];
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(format!(
            "batch_norm affine shapes {gamma:?}/{beta:?} for {c} channels"
        )));
    }
    Ok(())
}

fn for_channel(shape: &[usize], mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * plane;
            f(ch, start..start + plane);
        }
    }
}

pub(super) fn forward_train<T: Real>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Saved<T>, BatchStats<T>) {
    let c = shape[1];
    let count = shape[0] * shape[2] * shape[3];
    let n = T::c(count as f64);
    let mut mean = vec![T::zero(); c];
    for_channel(shape, |ch, r| {
        mean[ch] = mean[ch] + x[r].iter().copied().sum::<T>();
    });
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for_channel(shape, |ch, r| {
        let m = mean[ch];
        var[ch] = var[ch] + x[r].iter().map(|v| (*v - m) * (*v - m)).sum::<T>();
    });
    let unbiased: Vec<T> = var
        .iter()
        .map(|v| {
            if count > 1 {
                *v / T::c((count - 1) as f64)
            } else {
                T::zero()
            }
        })
        .collect();
    var.iter_mut().for_each(|v| *v = *v / n);
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for_channel(shape, |ch, r| {
        for i in r {
            xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    });
    (
        y,
        Saved {
            xhat,
            inv_std,
            train: true,
        },
        BatchStats {
            mean,
            var: unbiased,
        },
    )
}

pub(super) fn forward_eval<T: Real>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Vec<T>, Saved<T>) {
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|v| T::one() / (*v + eps).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for_channel(shape, |ch, r| {
        for i in r {
            xhat[i] = (x[i] - running_mean[ch]) * inv_std[ch];
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    });
    (
        y,
        Saved {
            xhat,
            inv_std,
            train: false,
        },
    )
}

pub(super) fn backward<T: Real>(
    shape: &[usize],
    g: &[T],
    gamma: &[T],
    saved: &Saved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = shape[1];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for_channel(shape, |ch, r| {
        for i in r {
            dgamma[ch] = dgamma[ch] + g[i] * saved.xhat[i];
            dbeta[ch] = dbeta[ch] + g[i];
        }
    });
    let mut dx = vec![T::zero(); g.len()];
    if saved.train {
        // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = g·gamma
        let n = T::c((shape[0] * shape[2] * shape[3]) as f64);
        for_channel(shape, |ch, r| {
            let k = gamma[ch] * saved.inv_std[ch] / n;
            for i in r {
                dx[i] = k * (n * g[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch]);
            }
        });
    } else {
        for_channel(shape, |ch, r| {
            let k = gamma[ch] * saved.inv_std[ch];
            for i in r {
                dx[i] = k * g[i];
            }
        });
    }
    (dx, dgamma, dbeta)
}
