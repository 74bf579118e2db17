//! Regression metrics, always evaluated in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub pc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::dim(format!(
            "{} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Pearson correlation with population (1/n) moments.
pub fn pearson(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::Contract("pearson correlation needs n >= 2".into()));
    }
    if is_constant(y) || is_constant(y_hat) {
        return Err(Error::DegenerateVariance(
            "pearson correlation of a constant sequence".into(),
        ));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = y_hat.iter().sum::<f64>() / n;
    let (mut cov, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for (&a, &b) in y.iter().zip(y_hat) {
        let (da, db) = (a - my, b - mp);
        cov += da * db;
        vy += da * da;
        vp += db * db;
    }
    let (cov, vy, vp) = (cov / n, vy / n, vp / n);
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::DegenerateVariance("zero sample variance".into()));
    }
    Ok((cov / (vy.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

pub fn evaluate_predictions(y: &[f64], y_hat: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        pc: pearson(y, y_hat)?,
        mae: mae(y, y_hat)?,
        rmse: rmse(y, y_hat)?,
        n: y.len(),
    })
}
