//! Aleatoric uncertainty as log-normalized Mahalanobis deviation from a
//! shrinkage-regularized global feature density.
//!
//! The density is fitted once on the calibration cache:
//!
//! ```text
//! mu      = mean(v_i)
//! Sigma   = (1/n) sum (v_i - mu)(v_i - mu)^T
//! Sigma_r = Sigma + lambda * tr(Sigma)/d * I
//! M(v)    = sqrt((v - mu)^T Sigma_r^-1 (v - mu))
//! sigma_a = clamp01((ln(M + eps) - ln M_min) / (ln M_max - ln M_min))
//! ```
//!
//! `Sigma_r` is held as its lower Cholesky factor `L`; `M(v) = |L^-1 (v - mu)|`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub mu: Vec<f64>,
    /// Lower-triangular Cholesky factor of the regularized covariance, row-major.
    pub chol: Vec<Vec<f64>>,
    pub lambda: f64,
    pub m_min: f64,
    pub m_max: f64,
    pub epsilon: f64,
}

/// Sample mean and biased (1/n) covariance.
pub fn mean_and_covariance<'a, I>(features: I, d: usize) -> (Vec<f64>, DMatrix<f64>, usize)
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut mu = vec![0.0; d];
    let mut n = 0usize;
    for v in features.clone() {
        for (m, x) in mu.iter_mut().zip(v) {
            *m += x;
        }
        n += 1;
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for v in features {
        let c = DVector::from_iterator(d, v.iter().zip(&mu).map(|(x, m)| x - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n as f64;
    (mu, cov, n)
}

impl DensityModel {
    /// Fits the density on calibration features. `lambda = 0` is accepted for
    /// well-conditioned data; negative values are rejected.
    pub fn fit<'a, I>(features: I, lambda: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        Self::fit_with_epsilon(features, lambda, DEFAULT_EPSILON)
    }

    pub fn fit_with_epsilon<'a, I>(features: I, lambda: f64, epsilon: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Aleatoric(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Aleatoric(format!("epsilon must be > 0, got {epsilon}")));
        }
        let first = features
            .clone()
            .into_iter()
            .next()
            .ok_or_else(|| Error::Aleatoric("no calibration features".into()))?;
        let d = first.len();
        if d == 0 {
            return Err(Error::Aleatoric("feature dimension is 0".into()));
        }
        for v in features.clone() {
            if v.len() != d {
                return Err(Error::Aleatoric(format!(
                    "feature dimension {} differs from {d}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Aleatoric("non-finite calibration feature".into()));
            }
        }
        let (mu, mut cov, n) = mean_and_covariance(features.clone(), d);
        if n < 2 {
            return Err(Error::Aleatoric(format!(
                "need at least 2 calibration records, got {n}"
            )));
        }
        let shrink = lambda * cov.trace() / d as f64;
        for i in 0..d {
            cov[(i, i)] += shrink;
        }
        let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| {
            Error::numeric(
                "aleatoric",
                format!(
                    "regularized covariance is not positive definite (lambda = {lambda}); \
                     increase lambda for degenerate features"
                ),
            )
        })?;
        let l = chol.l();
        let mut model = DensityModel {
            mu,
            chol: (0..d).map(|i| (0..d).map(|j| l[(i, j)]).collect()).collect(),
            lambda,
            m_min: 0.0,
            m_max: 0.0,
            epsilon,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in features {
            let m = model.mahalanobis(v)?;
            lo = lo.min(m);
            hi = hi.max(m);
        }
        // log M_min must be finite; a record sitting exactly on the mean is floored at epsilon
        model.m_min = lo.max(epsilon);
        model.m_max = hi.max(model.m_min);
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.mu.len()
    }

    /// Regularized covariance rebuilt from the factor, `L L^T`.
    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let d = self.dimension();
        let l = DMatrix::from_fn(d, d, |i, j| self.chol[i][j]);
        &l * l.transpose()
    }

    pub fn mahalanobis(&self, v: &[f64]) -> Result<f64> {
        let d = self.dimension();
        if v.len() != d {
            return Err(Error::Aleatoric(format!(
                "query dimension {} differs from model dimension {d}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Aleatoric("non-finite query feature".into()));
        }
        // forward substitution L z = v - mu
        let mut z = vec![0.0; d];
        for i in 0..d {
            let row = &self.chol[i];
            let mut s = v[i] - self.mu[i];
            for j in 0..i {
                s -= row[j] * z[j];
            }
            z[i] = s / row[i];
        }
        Ok(z.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Maps a Mahalanobis distance to `[0, 1]` with the calibration log range.
    pub fn normalize(&self, m: f64) -> Result<f64> {
        if !(self.m_max > self.m_min) {
            return Err(Error::Aleatoric(format!(
                "degenerate calibration: M_max ({}) equals M_min ({}); features are constant",
                self.m_max, self.m_min
            )));
        }
        let s = ((m + self.epsilon).ln() - self.m_min.ln()) / (self.m_max.ln() - self.m_min.ln());
        Ok(s.clamp(0.0, 1.0))
    }

    pub fn score(&self, v: &[f64]) -> Result<f64> {
        self.normalize(self.mahalanobis(v)?)
    }
}
