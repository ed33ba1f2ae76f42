use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    /// Unit scale, zero shift, running statistics at (0, 1).
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
            ..Self::uninitialized(channels)
        }
    }

    /// No running statistics yet; the first training pass adopts the batch
    /// statistics as-is.
    pub fn uninitialized(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: None,
            running_var: None,
            eps: T::of(1e-5),
            momentum: T::of(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let blend = |old: &mut Option<Vec<T>>, new: &[T]| match old {
            Some(r) => r
                .iter_mut()
                .zip(new)
                .for_each(|(r, &n)| *r = (T::one() - m) * *r + m * n),
            None => *old = Some(new.to_vec()),
        };
        blend(&mut self.running_mean, mean);
        blend(&mut self.running_var, var);
    }
}

/// Forward results retained for the backward pass.
pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Normalizes over (B, H, W) per channel. `stats = None` uses the biased
/// batch statistics; otherwise the given (mean, var).
pub(crate) fn bn_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> Result<BnForward<T>> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::invalid(format!(
            "batch norm has {} channels, input has {c}",
            gamma.len()
        )));
    }
    let hw = h * w;
    let count = T::of((b * hw) as f64);
    let xd = x.data();
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x.plane(bi, ch).iter().copied().sum();
        }
        let mean = s / count;
        let mut v = T::zero();
        for bi in 0..b {
            v += x.plane(bi, ch).iter().map(|&u| (u - mean) * (u - mean)).sum();
        }
        batch_mean[ch] = mean;
        batch_var[ch] = v / count;
    }
    let (mean, var) = match stats {
        Some((m, v)) => (m, v),
        None => (&batch_mean[..], &batch_var[..]),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * hw;
            for i in start..start + hw {
                let n = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = n;
                out[i] = gamma[ch] * n + beta[ch];
            }
        }
    }
    Ok(BnForward {
        out: Tensor::from_parts(x.shape().to_vec(), out),
        xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
        batch_mean,
        batch_var,
    })
}

/// `(d_x, d_gamma, d_beta)`. In training mode the batch statistics depend on
/// `x` and contribute the usual centering terms.
pub(crate) fn bn_backward<T: Real>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = grad_out.dims4().expect("checked in forward");
    let hw = h * w;
    let n = T::of((b * hw) as f64);
    let gd = grad_out.data();
    let xd = xhat.data();
    let mut gx = vec![T::zero(); gd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for bi in 0..b {
            let start = (bi * c + ch) * hw;
            for i in start..start + hw {
                sum_g += gd[i];
                sum_gx += gd[i] * xd[i];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let k = gamma[ch] * inv_std[ch];
        for bi in 0..b {
            let start = (bi * c + ch) * hw;
            for i in start..start + hw {
                gx[i] = if train {
                    k * (gd[i] - sum_g / n - xd[i] * sum_gx / n)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (Tensor::from_parts(grad_out.shape().to_vec(), gx), ggamma, gbeta)
}

/// Batch normalization over `[B, C, H, W]`. Training mode normalizes by batch
/// statistics and folds them into the running estimates with `momentum`;
/// inference mode requires running estimates to exist.
pub fn batchnorm2d<T: Real>(x: &Tensor<T>, bn: &mut BatchNorm<T>, mode: BnMode) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => {
            let fwd = bn_forward(x, &bn.gamma, &bn.beta, None, bn.eps)?;
            bn.update_running(&fwd.batch_mean, &fwd.batch_var);
            Ok(fwd.out)
        }
        BnMode::Infer => {
            let (Some(mean), Some(var)) = (&bn.running_mean, &bn.running_var) else {
                return Err(Error::invalid("batch norm in inference mode has no running statistics"));
            };
            Ok(bn_forward(x, &bn.gamma, &bn.beta, Some((mean, var)), bn.eps)?.out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..3.0)).unwrap()
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[2, 2, 3, 3], 4.0f64).unwrap();
        let mut bn = BatchNorm::new(2);
        bn.beta = vec![0.25, -1.5];
        let y = batchnorm2d(&x, &mut bn, BnMode::Train).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(1, 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn train_mode_standardizes() {
        let x = random(&[3, 2, 5, 4], 1);
        let mut bn = BatchNorm::new(2);
        let y = batchnorm2d(&x, &mut bn, BnMode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn running_stats_substitute_batch_stats() {
        let x = random(&[2, 3, 4, 4], 2);
        let mut bn = BatchNorm::new(3);
        bn.momentum = 1.0;
        bn.gamma = vec![0.5, 1.5, -2.0];
        let train = batchnorm2d(&x, &mut bn, BnMode::Train).unwrap();
        let infer = batchnorm2d(&x, &mut bn, BnMode::Infer).unwrap();
        assert!(train.max_abs_diff(&infer) < 1e-5);
    }

    #[test]
    fn infer_without_running_stats_fails() {
        let x = random(&[1, 2, 2, 2], 3);
        let mut bn = BatchNorm::<f64>::uninitialized(2);
        assert!(batchnorm2d(&x, &mut bn, BnMode::Infer).is_err());
        batchnorm2d(&x, &mut bn, BnMode::Train).unwrap();
        assert!(batchnorm2d(&x, &mut bn, BnMode::Infer).is_ok());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = random(&[1, 2, 2, 2], 4);
        assert!(batchnorm2d(&x, &mut BatchNorm::new(3), BnMode::Train).is_err());
    }
}
