//! Per-channel batch normalization over `(N, H, W)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics.
    Inference,
}

/// Everything a batch-norm layer owns.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize, mode: BnMode) -> Self {
        BnState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::InvalidArgument(
                "batch-norm state vectors differ in length".into(),
            ));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive and momentum in (0, 1), got {} and {}",
                self.eps, self.momentum
            )));
        }
        Ok(())
    }

    /// Normalizes `x`; in train mode the running statistics absorb the batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        match self.mode {
            BnMode::Train => {
                let out = batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
                self.absorb(&out.batch_mean, &out.batch_var, x.shape().numel() / x.shape().c);
                Ok(out.output)
            }
            BnMode::Inference => Ok(batch_norm_inference(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )?
            .output),
        }
    }

    /// Momentum update with the unbiased batch variance.
    pub fn absorb(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let correction = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        for c in 0..self.gamma.len() {
            self.running_mean[c] = keep * self.running_mean[c] + m * mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * biased_var[c] * correction;
        }
    }
}

/// Values saved for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub struct BnForward<T> {
    pub output: Tensor<T>,
    pub saved: BnSaved<T>,
    /// Batch mean (train mode) or the running mean that was used.
    pub batch_mean: Vec<T>,
    /// Biased batch variance (train mode) or the running variance that was used.
    pub batch_var: Vec<T>,
}

fn check_params<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::InvalidArgument(format!(
            "batch norm over {c} channels got gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

fn normalize<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let s = x.shape();
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * p;
            let src = &x.data()[start..start + p];
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (i, &v) in src.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.data_mut()[start + i] = h;
                out.data_mut()[start + i] = g * h + b;
            }
        }
    }
    Ok(BnForward {
        output: out,
        saved: BnSaved {
            xhat,
            inv_std,
            mode,
        },
        batch_mean: mean.to_vec(),
        batch_var: var.to_vec(),
    })
}

pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<BnForward<T>> {
    check_params(x, gamma, beta)?;
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mu = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter())
            .map(|v| v.as_f64())
            .sum::<f64>()
            / count;
        let sq = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter())
            .map(|v| (v.as_f64() - mu).powi(2))
            .sum::<f64>()
            / count;
        mean[c] = T::lit(mu);
        var[c] = T::lit(sq);
    }
    normalize(x, gamma, beta, &mean, &var, eps, BnMode::Train)
}

pub fn batch_norm_inference<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<BnForward<T>> {
    check_params(x, gamma, beta)?;
    if running_mean.len() != x.shape().c || running_var.len() != x.shape().c {
        return Err(Error::InvalidArgument(
            "running statistics do not match the channel count".into(),
        ));
    }
    normalize(x, gamma, beta, running_mean, running_var, eps, BnMode::Inference)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> BnGrads<T> {
    let s = grad_out.shape();
    let p = s.plane();
    let count = (s.n * p) as f64;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..s.n {
            for (g, h) in grad_out.plane(n, c).iter().zip(saved.xhat.plane(n, c)) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * h.as_f64();
            }
        }
        dbeta[c] = T::lit(sum_g);
        dgamma[c] = T::lit(sum_gx);
        let scale = gamma[c] * saved.inv_std[c];
        for n in 0..s.n {
            let start = (n * s.c + c) * p;
            for i in 0..p {
                let g = grad_out.data()[start + i];
                dx.data_mut()[start + i] = match saved.mode {
                    BnMode::Inference => scale * g,
                    BnMode::Train => {
                        let h = saved.xhat.data()[start + i];
                        scale * (g - T::lit(sum_g / count) - h * T::lit(sum_gx / count))
                    }
                };
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Shape};

    fn channel_stats(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| t.plane(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = seeded_rng(5);
        let x = Tensor::<f64>::randn(Shape::new(4, 3, 5, 5).unwrap(), 3.0, &mut rng).map(|v| v + 7.0);
        let mut bn = BnState::new(3, BnMode::Train);
        let y = bn.forward(&x).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(&y, c);
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5, "variance {v}");
        }
        // running stats moved toward the batch
        assert!(bn.running_mean.iter().all(|m| *m > 0.5));
    }

    #[test]
    fn affine_applied_last() {
        let mut rng = seeded_rng(6);
        let x = Tensor::<f64>::randn(Shape::new(8, 2, 4, 4).unwrap(), 1.0, &mut rng);
        let mut bn = BnState::new(2, BnMode::Train);
        bn.gamma = vec![2.0, 2.0];
        bn.beta = vec![3.0, 3.0];
        let y = bn.forward(&x).unwrap();
        for c in 0..2 {
            let (m, v) = channel_stats(&y, c);
            assert!((m - 3.0).abs() < 1e-12);
            assert!((v.sqrt() - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn inference_matches_train_when_stats_agree() {
        let mut rng = seeded_rng(9);
        let x = Tensor::<f64>::randn(Shape::new(3, 4, 3, 2).unwrap(), 2.0, &mut rng);
        let gamma: Vec<f64> = (0..4).map(|i| 0.5 + i as f64).collect();
        let beta: Vec<f64> = (0..4).map(|i| -(i as f64)).collect();
        let train = batch_norm_train(&x, &gamma, &beta, BN_EPS).unwrap();
        let inf = batch_norm_inference(
            &x,
            &gamma,
            &beta,
            &train.batch_mean,
            &train.batch_var,
            BN_EPS,
        )
        .unwrap();
        assert!(train.output.max_abs_diff(&inf.output) < 1e-10);
    }

    #[test]
    fn zero_variance_is_guarded_by_eps() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 2, 2).unwrap(), 4.0);
        let y = batch_norm_train(&x, &[1.0], &[0.5], BN_EPS).unwrap().output;
        assert!(y.data().iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2).unwrap());
        assert!(batch_norm_train(&x, &[1.0; 2], &[0.0; 2], BN_EPS).is_err());
        let mut bn = BnState::<f32>::new(2, BnMode::Inference);
        assert!(bn.forward(&x).is_err());
    }
}
