use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Translation-invariant symmetric matrix on Trotter time, stored as the
/// distance profile `ŷ(d)`, `y_{l,l'} = ŷ((l − l') mod M)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfOverlapKernel {
    profile: Vec<f64>,
}

impl SelfOverlapKernel {
    pub fn new(profile: Vec<f64>) -> Result<Self> {
        let m = profile.len();
        if m == 0 {
            return Err(invalid("kernel profile must be nonempty"));
        }
        if profile.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel profile must be finite"));
        }
        for d in 1..m {
            let (a, b) = (profile[d], profile[m - d]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(invalid(format!("kernel profile not symmetric at distance {d}")));
            }
        }
        Ok(Self { profile })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            profile: vec![0.0; m.max(1)],
        }
    }

    pub fn uniform(m: usize, value: f64) -> Self {
        Self {
            profile: vec![value; m.max(1)],
        }
    }

    pub fn m_slices(&self) -> usize {
        self.profile.len()
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn at(&self, l: usize, l2: usize) -> f64 {
        let m = self.profile.len();
        self.profile[(l + m - l2 % m) % m]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.m_slices();
        DMatrix::from_fn(m, m, |a, b| self.at(a, b))
    }

    /// Number of free profile coordinates, `⌊M/2⌋ + 1`.
    pub fn reduced_len(m: usize) -> usize {
        m / 2 + 1
    }

    /// How many distances `d ∈ 0..M` map to reduced coordinate `r`.
    pub fn multiplicity(m: usize, r: usize) -> usize {
        if r == 0 || 2 * r == m {
            1
        } else {
            2
        }
    }

    pub fn reduced(&self) -> Vec<f64> {
        self.profile[..Self::reduced_len(self.m_slices())].to_vec()
    }

    pub fn from_reduced(m: usize, reduced: &[f64]) -> Result<Self> {
        if reduced.len() != Self::reduced_len(m) {
            return Err(invalid(format!(
                "reduced kernel for M = {m} needs {} entries, got {}",
                Self::reduced_len(m),
                reduced.len()
            )));
        }
        let profile = (0..m).map(|d| reduced[d.min(m - d)]).collect();
        Self::new(profile)
    }

    /// `Σ_{l,l'} y_{l,l'}² = M Σ_d ŷ(d)²`.
    pub fn frobenius_sq(&self) -> f64 {
        self.m_slices() as f64 * self.profile.iter().map(|v| v * v).sum::<f64>()
    }

    /// `Σ_{l,l'} y_{l,l'} = M Σ_d ŷ(d)`.
    pub fn total(&self) -> f64 {
        self.m_slices() as f64 * self.profile.iter().sum::<f64>()
    }

    pub fn in_unit_range(&self) -> bool {
        self.profile.iter().all(|v| (0.0..=1.0).contains(v))
    }
}
