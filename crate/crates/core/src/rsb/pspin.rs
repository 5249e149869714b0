use serde::{Deserialize, Serialize};

use super::MixtureFunction;
use crate::error::{invalid, Result};
use crate::quantum::{binomial, pspin_scale, DisorderSample};
use crate::stochastics::{mc_estimate, par_map_indexed, MCEstimate, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub p: usize,
    pub n: usize,
    pub rho: f64,
    /// MC estimate of `(1/N) E U(σ¹) U(σ²)`.
    pub empirical: MCEstimate,
    pub xi: f64,
    /// Exact finite-`N` value `ξ(ρ) + c_N(ρ)`.
    pub exact: f64,
    pub correction: f64,
}

/// `(1/N) E U(σ¹)U(σ²) = (p!/(2N^p)) e_p(τ)` for `τ = σ¹σ²` with `n_minus`
/// negative entries, where `e_p(τ) = Σ_j (−1)^j C(n₋, j) C(n₊, p − j)`.
pub fn pspin_exact_covariance(p: usize, n: usize, n_minus: usize) -> f64 {
    let n_plus = n - n_minus;
    let mut e = 0.0;
    for j in 0..=p.min(n_minus) {
        if p - j > n_plus {
            continue;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        e += sign * binomial(n_minus, j) as f64 * binomial(n_plus, p - j) as f64;
    }
    let fact: f64 = (1..=p).map(|i| i as f64).product();
    fact / (2.0 * (n as f64).powi(p as i32)) * e
}

/// Empirical covariance of the p-spin energy for configuration pairs at
/// each overlap `ρ = 1 − 2 n₋/N`, `n₋ = 0..=N/2`.
pub fn pspin_covariance_check(p: usize, n: usize, n_samples: usize, seed: u64) -> Result<Vec<CovarianceRow>> {
    let mix = MixtureFunction::new(p)?;
    if n > 16 || n < p {
        return Err(invalid(format!("need p <= N <= 16, got N = {n}")));
    }
    let scale = pspin_scale(p, n);
    let root = RngStream::new(seed);
    let samples: Vec<DisorderSample> = (0..n_samples)
        .map(|j| DisorderSample::gaussian(p, n, &root.child(j as u64)))
        .collect::<Result<_>>()?;
    let sigma1 = vec![1.0; n];
    let mut rows = Vec::new();
    for n_minus in 0..=n / 2 {
        let sigma2: Vec<f64> = (0..n).map(|i| if i < n_minus { -1.0 } else { 1.0 }).collect();
        let values = par_map_indexed(n_samples, |j| {
            let g = &samples[j];
            scale * g.interaction(&sigma1) * scale * g.interaction(&sigma2) / n as f64
        });
        let rho = 1.0 - 2.0 * n_minus as f64 / n as f64;
        let exact = pspin_exact_covariance(p, n, n_minus);
        rows.push(CovarianceRow {
            p,
            n,
            rho,
            empirical: mc_estimate(&values)?,
            xi: mix.xi(rho),
            exact,
            correction: exact - mix.xi(rho),
        });
    }
    Ok(rows)
}
