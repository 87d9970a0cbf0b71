//! Per-channel batch normalization with separate training and inference
//! paths.
//!
//! Training mode normalizes by the current batch's statistics and folds
//! those statistics into running averages; inference mode uses the running
//! averages only. The deployment fold consumes `gamma`, `beta`,
//! `running_mean`, `running_var` directly, which is why they are public.
//!
//! Variance is the biased (1/M) estimate everywhere, so training statistics,
//! running statistics, and the fold all agree on one convention.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Fraction of the old running statistic retained per update:
    /// `running <- momentum*running + (1-momentum)*batch`.
    pub momentum: T,
    pub eps: T,
}

/// Batch statistics captured during a training forward pass; the matching
/// backward pass needs them.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// How a shape splits around its channel axis: `(outer, channels, inner)`.
/// `[N,C,H,W]` -> `(N, C, H*W)`, `[C,H,W]` -> `(1, C, H*W)`, `[N,C]` -> `(N, C, 1)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [c, h, w] => Ok((1, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        _ => Err(Error::shape(format!(
            "batchnorm expects rank 2..4 with a channel axis, got {shape:?}"
        ))),
    }
}

/// Pure per-channel normalize-and-affine with explicitly supplied statistics.
pub fn batchnorm_apply<T: Scalar>(
    x: &TensorBase<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<TensorBase<T>> {
    assert!(eps > T::zero(), "batchnorm eps must be positive");
    let (outer, c, inner) = channel_layout(x.shape())?;
    if [mean.len(), var.len(), gamma.len(), beta.len()] != [c; 4] {
        return Err(Error::shape(format!(
            "batchnorm params for {} channels vs input {:?}",
            mean.len(),
            x.shape()
        )));
    }
    debug_assert!(var.iter().all(|&v| v >= T::zero()), "negative variance");
    let mut out = TensorBase::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        let inv = (var[ch] + eps).sqrt().recip();
        let g = gamma[ch] * inv;
        let b = beta[ch] - gamma[ch] * mean[ch] * inv;
        for n in 0..outer {
            let base = (n * c + ch) * inner;
            for i in base..base + inner {
                od[i] = g * xd[i] + b;
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize, momentum: T, eps: T) -> Self {
        assert!(eps > T::zero(), "batchnorm eps must be positive");
        assert!(
            momentum >= T::zero() && momentum < T::one(),
            "batchnorm momentum must lie in [0,1)"
        );
        BatchNorm {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum,
            eps,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn batch_stats(&self, x: &TensorBase<T>) -> Result<BnBatchStats<T>> {
        let (outer, c, inner) = channel_layout(x.shape())?;
        if c != self.features() {
            return Err(Error::shape(format!(
                "batchnorm has {} channels, input {:?}",
                self.features(),
                x.shape()
            )));
        }
        let m = T::from_real((outer * inner) as f64);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..outer {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    s += xd[i];
                }
            }
            mean[ch] = s / m;
            let mut v = T::zero();
            for n in 0..outer {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    let d = xd[i] - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / m;
        }
        Ok(BnBatchStats { mean, var })
    }

    /// Normalizes by batch statistics and advances the running averages.
    pub fn forward_train(&mut self, x: &TensorBase<T>) -> Result<(TensorBase<T>, BnBatchStats<T>)> {
        let stats = self.batch_stats(x)?;
        let y = batchnorm_apply(x, &stats.mean, &stats.var, &self.gamma, &self.beta, self.eps)?;
        let keep = self.momentum;
        let take = T::one() - keep;
        for ch in 0..self.features() {
            self.running_mean[ch] = keep * self.running_mean[ch] + take * stats.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + take * stats.var[ch];
        }
        Ok((y, stats))
    }

    /// Normalizes by the running averages; never mutates state.
    pub fn forward_infer(&self, x: &TensorBase<T>) -> Result<TensorBase<T>> {
        batchnorm_apply(x, &self.running_mean, &self.running_var, &self.gamma, &self.beta, self.eps)
    }

    /// Training-mode backward pass, differentiating through the batch
    /// statistics. Per channel with M elements, sigma = sqrt(var+eps):
    ///
    ///   dbeta  = sum(dy)
    ///   dgamma = sum(dy * xhat)
    ///   dx     = (gamma/sigma) * (dy - dbeta/M - xhat * dgamma/M)
    ///
    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        x: &TensorBase<T>,
        stats: &BnBatchStats<T>,
        grad_out: &TensorBase<T>,
    ) -> Result<(TensorBase<T>, Vec<T>, Vec<T>)> {
        if x.shape() != grad_out.shape() {
            return Err(Error::shape(format!(
                "batchnorm backward: input {:?} vs grad {:?}",
                x.shape(),
                grad_out.shape()
            )));
        }
        let (outer, c, inner) = channel_layout(x.shape())?;
        let m = T::from_real((outer * inner) as f64);
        let xd = x.data();
        let gd = grad_out.data();
        let mut dx = TensorBase::zeros(x.shape());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let inv = (stats.var[ch] + self.eps).sqrt().recip();
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..outer {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    let xhat = (xd[i] - stats.mean[ch]) * inv;
                    sum_dy += gd[i];
                    sum_dy_xhat += gd[i] * xhat;
                }
            }
            dbeta[ch] = sum_dy;
            dgamma[ch] = sum_dy_xhat;
            let g = self.gamma[ch] * inv;
            let dxd = dx.data_mut();
            for n in 0..outer {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    let xhat = (xd[i] - stats.mean[ch]) * inv;
                    dxd[i] = g * (gd[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}
