//! Robust PCA by the inexact augmented Lagrange multiplier method.
//!
//! Minimises `‖L‖_* + ξ‖S‖_1` subject to `D = L + S` by alternating
//! singular value thresholding for `L`, entrywise shrinkage for `S` and a
//! dual ascent step on `Y`, with the penalty `μ` growing geometrically.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::LayerSepError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcaConfig {
    /// Sparsity weight ξ.
    pub xi: f64,
    /// Relative constraint residual at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial penalty; `None` means `1.25 / σ₁(D)`.
    pub mu0: Option<f64>,
    pub rho: f64,
}

impl RpcaConfig {
    /// `ξ = scale / √rows` with the conventional solver constants.
    pub fn for_rows(rows: usize, xi_scale: f64) -> Self {
        Self {
            xi: xi_scale / (rows as f64).sqrt(),
            tol: 1e-6,
            max_iter: 500,
            mu0: None,
            rho: 1.5,
        }
    }

    pub fn validate(&self) -> Result<(), LayerSepError> {
        let ok = self.xi > 0.0
            && self.tol > 0.0
            && self.max_iter >= 1
            && self.rho > 1.0
            && self.mu0.is_none_or(|m| m > 0.0);
        if ok {
            Ok(())
        } else {
            Err(LayerSepError::InvalidRpcaConfig(format!("{self:?}")))
        }
    }
}

/// Ceiling on the penalty relative to its start, as in the reference solver.
const MU_GROWTH_CAP: f64 = 1e7;

#[derive(Debug, Clone)]
pub struct LayerPair {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    /// Final `‖D − L − S‖_F / ‖D‖_F`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

pub fn rpca_ialm(d: &DMatrix<f64>, config: &RpcaConfig) -> Result<LayerPair, LayerSepError> {
    config.validate()?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(LayerSepError::NonFinite);
    }
    let (m, n) = d.shape();
    let norm_d = d.norm();
    if norm_d == 0.0 {
        return Ok(LayerPair {
            low_rank: DMatrix::zeros(m, n),
            sparse: DMatrix::zeros(m, n),
            residual: 0.0,
            iterations: 1,
            converged: true,
            residual_history: vec![0.0],
        });
    }

    let sigma1 = spectral_norm(d)?;
    let inf_norm = d.amax();
    // Dual start scaled so that the first step is feasible for both norms.
    let dual_scale = sigma1.max(inf_norm / config.xi);
    let mut y = d / dual_scale;
    let mut mu = config.mu0.unwrap_or(1.25 / sigma1);
    let mu_max = mu * MU_GROWTH_CAP;

    let mut l = DMatrix::zeros(m, n);
    let mut s = DMatrix::zeros(m, n);
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iter {
        iterations += 1;
        let inv_mu = 1.0 / mu;

        let target_l = d - &s + &y * inv_mu;
        l = singular_value_threshold(target_l, inv_mu)?;

        let shrink = config.xi * inv_mu;
        s = d - &l + &y * inv_mu;
        s.apply(|v| *v = soft_threshold(*v, shrink));

        let z = d - &l - &s;
        residual = z.norm() / norm_d;
        history.push(residual);
        y += &z * mu;
        mu = (mu * config.rho).min(mu_max);

        if residual <= config.tol {
            converged = true;
            break;
        }
    }

    Ok(LayerPair {
        low_rank: l,
        sparse: s,
        residual,
        iterations,
        converged,
        residual_history: history,
    })
}

#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn spectral_norm(d: &DMatrix<f64>) -> Result<f64, LayerSepError> {
    let sv = singular_values(d)?;
    Ok(sv.iter().cloned().fold(0.0, f64::max))
}

pub fn singular_values(d: &DMatrix<f64>) -> Result<Vec<f64>, LayerSepError> {
    let svd = nalgebra::linalg::SVD::try_new(d.clone(), false, false, f64::EPSILON, 0)
        .ok_or(LayerSepError::SvdFailed)?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `U · shrink(Σ, τ) · Vᵀ`.
pub fn singular_value_threshold(a: DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>, LayerSepError> {
    let (m, n) = a.shape();
    let svd = nalgebra::linalg::SVD::try_new(a, true, true, f64::EPSILON, 0)
        .ok_or(LayerSepError::SvdFailed)?;
    let u = svd.u.as_ref().ok_or(LayerSepError::SvdFailed)?;
    let v_t = svd.v_t.as_ref().ok_or(LayerSepError::SvdFailed)?;
    let mut out = DMatrix::zeros(m, n);
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        let shrunk = sigma - tau;
        if shrunk <= 0.0 {
            continue;
        }
        out.ger(shrunk, &u.column(k), &v_t.row(k).transpose(), 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_short_circuits() {
        let d = DMatrix::zeros(6, 3);
        let r = rpca_ialm(&d, &RpcaConfig::for_rows(6, 0.8)).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.low_rank.norm(), 0.0);
        assert_eq!(r.sparse.norm(), 0.0);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let d = DMatrix::from_element(2, 2, 1.0);
        let mut cfg = RpcaConfig::for_rows(2, 0.8);
        cfg.rho = 1.0;
        assert!(rpca_ialm(&d, &cfg).is_err());
        let mut bad = d.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(
            rpca_ialm(&bad, &RpcaConfig::for_rows(2, 0.8)),
            Err(LayerSepError::NonFinite)
        ));
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn svt_with_zero_threshold_reconstructs() {
        let a = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.1 + ((i + j) % 2) as f64);
        let b = singular_value_threshold(a.clone(), 0.0).unwrap();
        assert!((a - b).norm() < 1e-12);
    }
}
