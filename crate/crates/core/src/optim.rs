//! Smooth L1 loss, AdamW with decoupled weight decay, and cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothL1Config {
    pub beta: f64,
}

impl Default for SmoothL1Config {
    fn default() -> Self {
        SmoothL1Config { beta: 1.0 }
    }
}

/// Batch-mean Smooth L1 between targets `y` and predictions `y_hat`.
///
/// Per element with `d = y - y_hat`: `0.5 d²` when `|d| < beta`, otherwise
/// `|d| - 0.5 beta`.
pub fn smooth_l1<T: Real>(y: &Tensor<T>, y_hat: &Tensor<T>, cfg: SmoothL1Config) -> Result<Tensor<T>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim(format!(
            "smooth_l1 targets {:?} vs predictions {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if !(cfg.beta > 0.0) {
        return Err(Error::Contract(format!("smooth_l1 beta must be positive, got {}", cfg.beta)));
    }
    let beta = T::lit(cfg.beta);
    let half = T::lit(0.5);
    let diff = y.sub(y_hat)?;
    let d = diff.to_vec();
    let per: Vec<T> = d
        .iter()
        .map(|&v| {
            if v.abs() < beta {
                half * v * v
            } else {
                v.abs() - half * beta
            }
        })
        .collect();
    let elementwise = Tensor::from_op(
        per,
        diff.shape().to_vec(),
        "smooth_l1",
        vec![diff],
        Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(&d)
                    .map(|(&gi, &v)| if v.abs() < beta { gi * v } else { gi * v.signum() })
                    .collect(),
            )]
        }),
    );
    Ok(elementwise.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW over a fixed, named parameter list.
pub struct AdamW<T: Real> {
    cfg: AdamWConfig,
    params: Vec<(String, Tensor<T>)>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, cfg: AdamWConfig) -> Result<Self> {
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.requires_grad()) {
            return Err(Error::Contract(format!("parameter {name} is frozen and cannot be optimized")));
        }
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Ok(AdamW {
            cfg,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.m[index], &self.v[index])
    }

    /// Restores optimizer state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
        if moments.len() != self.params.len() {
            return Err(Error::Corruption(format!(
                "optimizer state for {} tensors, model has {}",
                moments.len(),
                self.params.len()
            )));
        }
        for ((m, v), (name, p)) in moments.iter().zip(&self.params) {
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::Corruption(format!("optimizer moments for {name} have wrong size")));
            }
        }
        let (m, v) = moments.into_iter().unzip();
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// skipped. A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
        }
        let grads: Vec<Option<Vec<T>>> = self.params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in self.params.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, ((_, p), g)) in self.params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let mut theta = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                let gj = g[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let old = theta[j].as_f64();
                theta[j] = T::lit(old - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * old);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_epochs: usize) -> Result<Self> {
        if eta_min > eta_max || total_epochs == 0 {
            return Err(Error::Contract(format!(
                "cosine schedule needs eta_min <= eta_max and T > 0 (got {eta_min}, {eta_max}, {total_epochs})"
            )));
        }
        Ok(CosineSchedule {
            eta_max,
            eta_min,
            total_epochs,
        })
    }

    /// Learning rate after `epoch` scheduler steps.
    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} beyond schedule length {}",
                self.total_epochs
            )));
        }
        let frac = epoch as f64 / self.total_epochs as f64;
        Ok(self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loss_at(d: f64) -> f64 {
        let y = Tensor::<f64>::from_f64(&[d], &[1]).unwrap();
        let p = Tensor::<f64>::from_f64(&[0.0], &[1]).unwrap();
        smooth_l1(&y, &p, SmoothL1Config::default()).unwrap().item()
    }

    #[test]
    fn smooth_l1_branches() {
        assert!((loss_at(0.4) - 0.08).abs() < 1e-15);
        assert!((loss_at(2.0) - 1.5).abs() < 1e-15);
        assert_eq!(loss_at(1.0), 0.5);
        assert_eq!(loss_at(1.0 - 1e-12), 0.5 * (1.0 - 1e-12f64).powi(2));
    }

    #[test]
    fn smooth_l1_batch_mean_and_shape_check() {
        let y = Tensor::<f64>::from_f64(&[0.4, 2.0], &[2]).unwrap();
        let p = Tensor::<f64>::zeros(&[2]);
        let l = smooth_l1(&y, &p, SmoothL1Config::default()).unwrap().item();
        assert!((l - 0.79).abs() < 1e-15);
        assert!(smooth_l1(&y, &Tensor::zeros(&[3]), SmoothL1Config::default()).is_err());
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let p = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
        let mut opt = AdamW::new(
            vec![("p".into(), p.clone())],
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        p.sum().mul_scalar(0.0).backward().unwrap();
        opt.step(1e-3).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn adamw_first_step_scalar() {
        let p = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let mut opt = AdamW::new(
            vec![("p".into(), p.clone())],
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        p.mul_scalar(0.1).sum().backward().unwrap();
        opt.step(1e-5).unwrap();
        let expected = 1.0 - 1e-5 * (0.1 / (0.1 + 1e-8));
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.99999).abs() < 1e-9);
    }

    #[test]
    fn adamw_rejects_non_finite_grad_without_changing_state() {
        let p = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], AdamWConfig::default()).unwrap();
        p.mul_scalar(f64::NAN).sum().backward().unwrap();
        assert!(matches!(opt.step(1e-3), Err(Error::Numeric(_))));
        assert_eq!(p.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn adamw_refuses_frozen_params() {
        let frozen = Tensor::<f64>::zeros(&[2]);
        assert!(AdamW::new(vec![("enc".into(), frozen)], AdamWConfig::default()).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-5, 0.0, 15).unwrap();
        assert_eq!(s.lr(0).unwrap(), 1e-5);
        assert!(s.lr(15).unwrap().abs() < 1e-20);
        let s2 = CosineSchedule::new(1e-5, 0.0, 10).unwrap();
        assert!((s2.lr(5).unwrap() - 5e-6).abs() < 1e-18);
        assert!(s.lr(16).is_err());
        assert!(CosineSchedule::new(1e-5, 1e-4, 15).is_err());
    }

    proptest! {
        #[test]
        fn smooth_l1_nonnegative_and_gradient_bounded(d in -10.0f64..10.0) {
            let y = Tensor::<f64>::from_f64(&[d], &[1]).unwrap();
            let p = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
            let l = smooth_l1(&y, &p, SmoothL1Config::default()).unwrap();
            prop_assert!(l.item() >= 0.0);
            prop_assert_eq!(l.item() == 0.0, d == 0.0);
            l.backward().unwrap();
            prop_assert!(p.grad().unwrap()[0].abs() <= 1.0);
        }

        #[test]
        fn adamw_without_decay_is_adam(grads in prop::collection::vec(-1.0f64..1.0, 1..20), lr in 1e-5f64..1e-2) {
            let p = Tensor::<f64>::param(vec![0.5], &[1]).unwrap();
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg).unwrap();
            // plain Adam reference
            let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                opt.zero_grad();
                p.mul_scalar(*g).sum().backward().unwrap();
                opt.step(lr).unwrap();
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
                theta -= lr * mh / (vh.sqrt() + 1e-8);
                prop_assert!((p.item() - theta).abs() < 1e-12);
            }
        }
    }
}
