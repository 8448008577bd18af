//! Diagonal-covariance Gaussian algebra.
//!
//! All densities are returned in log space. Products of Gaussians are
//! computed in precision form: the precision of a product is the sum of the
//! input precisions, and its mean is the precision-weighted input mean.

use crate::error::{Result, SpeError};

/// Smallest variance any [`DiagonalGaussian`] may carry on an axis.
pub const VARIANCE_FLOOR: f64 = 1e-8;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    /// Variances below [`VARIANCE_FLOOR`] are raised to it; negative or
    /// non-finite parameters are rejected.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(SpeError::Empty("gaussian mean"));
        }
        SpeError::dims(mean.len(), variance.len())?;
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(SpeError::invalid("gaussian parameters must be finite"));
        }
        if variance.iter().any(|&v| v < 0.0) {
            return Err(SpeError::invalid("gaussian variance must be non-negative"));
        }
        let variance = variance
            .into_iter()
            .map(|v| v.max(VARIANCE_FLOOR))
            .collect();
        Ok(Self { mean, variance })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![variance; n])
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn precision(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }

    /// `ln N(z; mean, diag(variance))`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        SpeError::dims(self.dim(), z.len())?;
        Ok(self.log_density_unchecked(z))
    }

    pub(crate) fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        log_density_diag(z, &self.mean, &self.variance)
    }

    /// Reparameterized draw `mean + sqrt(variance) ∘ u` for standard-normal `u`.
    pub fn sample(&self, u: &[f64]) -> Result<Vec<f64>> {
        SpeError::dims(self.dim(), u.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(u)
            .map(|((m, v), u)| m + v.sqrt() * u)
            .collect())
    }

    /// Same Gaussian with `extra` added to every axis' variance.
    pub fn inflated(&self, extra: f64) -> Result<Self> {
        Self::new(
            self.mean.clone(),
            self.variance.iter().map(|v| v + extra).collect(),
        )
    }
}

/// `ln N(z; mean, diag(variance))` without dimension checks.
pub fn log_density_diag(z: &[f64], mean: &[f64], variance: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((z, m), v) in z.iter().zip(mean).zip(variance) {
        let d = z - m;
        acc += LN_2PI + v.ln() + d * d / v;
    }
    -0.5 * acc
}

/// Normalized product of Gaussian densities. Order-independent up to
/// floating-point summation order.
pub fn product(gs: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let first = gs
        .first()
        .ok_or(SpeError::Empty("gaussian product input"))?;
    let d = first.dim();
    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for g in gs {
        SpeError::dims(d, g.dim())?;
        for i in 0..d {
            let p = 1.0 / g.variance[i];
            precision[i] += p;
            weighted[i] += p * g.mean[i];
        }
    }
    let variance: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mean = weighted.iter().zip(&variance).map(|(w, v)| w * v).collect();
    DiagonalGaussian::new(mean, variance)
}

/// Rewrites `N(z; x) · N(z; y)` as `N(z; intersection) · exp(log_prefactor)`,
/// where the prefactor `N(μx; μy, σ²x + σ²y)` does not depend on `z`.
pub fn product_identity_factor(
    x: &DiagonalGaussian,
    y: &DiagonalGaussian,
) -> Result<(DiagonalGaussian, f64)> {
    SpeError::dims(x.dim(), y.dim())?;
    let intersection = product(&[x.clone(), y.clone()])?;
    let summed: Vec<f64> = x
        .variance
        .iter()
        .zip(&y.variance)
        .map(|(a, b)| a + b)
        .collect();
    let log_prefactor = log_density_diag(&x.mean, &y.mean, &summed);
    Ok((intersection, log_prefactor))
}
