//! Batch normalization over (N, C, H, W), channel-wise.

use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exponential-moving-average statistics owned by the model, updated as a
/// side effect of train-mode forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> RunningStats<F> {
    pub fn new(channels: usize, momentum: F, eps: F) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            momentum,
            eps,
        }
    }
}

/// Returns the normalized tensor plus the per-channel mean and 1/std that the
/// backward pass needs. Train mode normalizes by batch statistics and updates
/// `running`; eval mode applies `running` unchanged.
pub(super) fn batchnorm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running: &mut RunningStats<F>,
    mode: Mode,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let &[n, c, h, w] = x.dims() else {
        return Err(Error::Shape(format!(
            "batchnorm needs (N,C,H,W), got {:?}",
            x.dims()
        )));
    };
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "gamma/beta must be ({c}), got {:?} / {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    if running.mean.len() != c {
        return Err(Error::Shape(format!(
            "running stats have {} channels, input has {c}",
            running.mean.len()
        )));
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::Precondition(format!(
            "train-mode batchnorm needs >= 2 values per channel, got {m}"
        )));
    }

    let (mean, inv_std) = match mode {
        Mode::Train => {
            let m_f = F::cast_usize(m);
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ci in 0..c {
                let mut acc = F::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        acc += x.data()[base + i];
                    }
                }
                mean[ci] = acc / m_f;
                let mut sq = F::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        let d = x.data()[base + i] - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / m_f;
            }
            let one = F::one();
            let mom = running.momentum;
            let unbias = F::cast_usize(m) / F::cast_usize(m - 1);
            for ci in 0..c {
                running.mean[ci] = (one - mom) * running.mean[ci] + mom * mean[ci];
                running.var[ci] = (one - mom) * running.var[ci] + mom * var[ci] * unbias;
            }
            let inv_std: Vec<F> = var
                .iter()
                .map(|&v| F::one() / (v + running.eps).sqrt())
                .collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let inv_std: Vec<F> = running
                .var
                .iter()
                .map(|&v| F::one() / (v + running.eps).sqrt())
                .collect();
            (running.mean.clone(), inv_std)
        }
    };

    let mut out = vec![F::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, istd) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in 0..h * w {
                out[base + i] = g * (x.data()[base + i] - mu) * istd + b;
            }
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), out)?, mean, inv_std))
}

pub(super) fn batchnorm_backward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    mean: &[F],
    inv_std: &[F],
    mode: Mode,
    dy: &Tensor<F>,
) -> [Tensor<F>; 3] {
    let [n, c, h, w] = *x.dims() else { unreachable!() };
    let m = n * h * w;
    let m_f = F::cast_usize(m);

    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    let mut dx = vec![F::zero(); x.len()];

    for ci in 0..c {
        let (mu, istd) = (mean[ci], inv_std[ci]);
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let g = dy.data()[base + i];
                sum_dy += g;
                sum_dy_xhat += g * (x.data()[base + i] - mu) * istd;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;

        let gm = gamma.data()[ci];
        match mode {
            // Batch statistics depend on x, so their gradients flow back too.
            Mode::Train => {
                let coef = gm * istd / m_f;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        let xhat = (x.data()[base + i] - mu) * istd;
                        dx[base + i] =
                            coef * (m_f * dy.data()[base + i] - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
            Mode::Eval => {
                let coef = gm * istd;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        dx[base + i] = coef * dy.data()[base + i];
                    }
                }
            }
        }
    }

    [
        Tensor::new(x.dims().to_vec(), dx).expect("dx dims"),
        Tensor::new(vec![c], dgamma).expect("dgamma dims"),
        Tensor::new(vec![c], dbeta).expect("dbeta dims"),
    ]
}
