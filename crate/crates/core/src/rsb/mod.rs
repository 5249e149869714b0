//! The replica-symmetry-breaking variational functional.
//!
//! A single spin path `σ ∈ {±1}^M` in cavity fields
//! `h = c + Σ_{p<k} √(ξ'(q_{p+1}) − ξ'(q_p)) z^p` defines `ζ`, and the
//! descending recursion `ζ_{l−1} = (E_l ζ_l^{m_l})^{1/m_l}` yields
//! `P_k = E log ζ_0 − (β²/2) Σ_l m_l (θ(q_{l+1}) − θ(q_l))`.
//!
//! The imaginary level `ı√(ξ'(q_k)) z^k` is integrated in closed form, which
//! turns it into the real penalty `−β²ξ'(q_k)(Σ_l σ_l)²/(2M²)` and keeps `ζ`
//! strictly positive.

mod hopf_lax;
mod kernel;
mod optimize;
mod pspin;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stochastics::{gauss_hermite, gaussian_samples, log_sum_exp, QuadratureRule, RngStream};
use crate::trotter::{log_prefactor, trotter_coupling};

pub use hopf_lax::{
    default_chi_options, hopf_lax_chi, hopf_lax_pde_residual, hopf_lax_sup, ChiValue, KernelObjective, ParisiProxy, PdeResidual,
    SyntheticQuadratic,
};
pub use kernel::SelfOverlapKernel;
pub use optimize::{optimize_rsb, stationarity_residual, OptimizeOptions, RsbOptimum, Stationarity};
pub use pspin::{pspin_covariance_check, pspin_exact_covariance, CovarianceRow};

pub const MAX_SITE_SLICES: usize = 14;

/// Ordered RSB parameters `0 = m_0 < m_1 ≤ … ≤ m_k = 1` and
/// `0 = q_0 ≤ q_1 ≤ … ≤ q_k ≤ 1`, with `q_{k+1} = 0` stored explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsbParams {
    m: Vec<f64>,
    q: Vec<f64>,
}

impl RsbParams {
    /// `m` holds `m_0..m_k` and `q` holds `q_0..q_k`; `q_{k+1} = 0` is appended.
    pub fn new(m: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if m.len() < 2 {
            return Err(invalid("need k >= 1 (m_0..m_k)"));
        }
        let k = m.len() - 1;
        if q.len() != k + 1 {
            return Err(invalid(format!("q must hold q_0..q_k ({} values), got {}", k + 1, q.len())));
        }
        if m[0] != 0.0 || m[k] != 1.0 || !(m[1] > 0.0) {
            return Err(invalid("m must satisfy 0 = m_0 < m_1 and m_k = 1"));
        }
        if m.windows(2).skip(1).any(|w| !(w[0] <= w[1])) {
            return Err(invalid("m must be nondecreasing"));
        }
        if q[0] != 0.0 || q.windows(2).any(|w| !(w[0] <= w[1])) || !(q[k] <= 1.0) {
            return Err(invalid("q must satisfy 0 = q_0 <= q_1 <= ... <= q_k <= 1"));
        }
        let mut q = q;
        q.push(0.0);
        Ok(Self { m, q })
    }

    /// Replica-symmetric point `k = 1`, `m = (0, 1)`, `q = (0, q_1)`.
    pub fn replica_symmetric(q1: f64) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![0.0, q1])
    }

    pub fn k(&self) -> usize {
        self.m.len() - 1
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// `q_0..q_{k+1}`.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Same parameters with `q_r` replaced (no validation of ordering).
    pub(crate) fn with_q_unchecked(&self, r: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.q[r] = value;
        out
    }

    /// Duplicate `q_r` (`1 ≤ r ≤ k`) into a new level with exponent `m_new`,
    /// `m_{r−1} < m_new ≤ m_r`. The functional is unchanged.
    pub fn insert_level(&self, r: usize, m_new: f64) -> Result<Self> {
        let k = self.k();
        if r == 0 || r > k {
            return Err(invalid(format!("insertion level must be in 1..={k}")));
        }
        if !(m_new > self.m[r - 1] && m_new <= self.m[r]) {
            return Err(invalid("inserted m must lie in (m_{r-1}, m_r]"));
        }
        let mut m = self.m.clone();
        m.insert(r, m_new);
        let mut q = self.q[..=k].to_vec();
        q.insert(r + 1, self.q[r]);
        Self::new(m, q)
    }
}

/// `ξ(q) = q^p / 2` for the pure `p`-spin interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureFunction {
    p: usize,
}

impl MixtureFunction {
    pub fn new(p: usize) -> Result<Self> {
        if p < 2 || p % 2 == 1 {
            return Err(invalid(format!("mixture order must be even and >= 2, got {p}")));
        }
        Ok(Self { p })
    }

    pub fn sk() -> Self {
        Self { p: 2 }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn xi(&self, q: f64) -> f64 {
        q.powi(self.p as i32) / 2.0
    }

    pub fn xi_prime(&self, q: f64) -> f64 {
        self.p as f64 / 2.0 * q.powi(self.p as i32 - 1)
    }

    /// `θ(q) = q ξ'(q) − ξ(q)`.
    pub fn theta(&self, q: f64) -> f64 {
        q * self.xi_prime(q) - self.xi(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadMode {
    GaussHermite,
    MonteCarlo,
}

/// How each Gaussian level of the recursion is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub mode: QuadMode,
    /// Gauss–Hermite nodes, or MC samples, per level.
    pub nodes: usize,
    pub seed: u64,
}

impl QuadratureSpec {
    pub fn gauss_hermite(nodes: usize) -> Self {
        Self {
            mode: QuadMode::GaussHermite,
            nodes,
            seed: 0,
        }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            mode: QuadMode::MonteCarlo,
            nodes: samples,
            seed,
        }
    }

    /// 24-node Gauss–Hermite for `k ≤ 3`, seeded 16-sample MC beyond.
    pub fn default_for(k: usize, seed: u64) -> Self {
        if k <= 3 {
            Self::gauss_hermite(24)
        } else {
            Self::monte_carlo(16, seed)
        }
    }

    /// The one-dimensional rule used at every level. MC levels share a
    /// single point set so results are smooth in the parameters.
    pub fn rule(&self) -> Result<QuadratureRule> {
        match self.mode {
            QuadMode::GaussHermite => gauss_hermite(self.nodes),
            QuadMode::MonteCarlo => {
                if self.nodes < 2 {
                    return Err(invalid("MC quadrature needs at least 2 samples"));
                }
                let nodes = gaussian_samples(&RngStream::new(self.seed).child(0x5157), self.nodes);
                let weights = vec![1.0 / self.nodes as f64; self.nodes];
                Ok(QuadratureRule { nodes, weights })
            }
        }
    }
}

/// Distinct `(Σ_l σ_l, (Σ_l σ_l σ_{l+d})_{1≤d≤M/2})` classes of
/// `σ ∈ {±1}^M` with multiplicities.
#[derive(Debug)]
struct PathClasses {
    m: usize,
    /// `(S index, autocorrelations A_1..A_{M/2}, count)`, S index = number of −1 spins.
    classes: Vec<(usize, Vec<i32>, f64)>,
}

impl PathClasses {
    fn build(m: usize) -> Self {
        let half = m / 2;
        let mut map: HashMap<(usize, Vec<i32>), f64> = HashMap::new();
        for bits in 0u32..(1u32 << m) {
            let s = |l: usize| if (bits >> (l % m)) & 1 == 0 { 1 } else { -1 };
            let auto: Vec<i32> = (1..=half).map(|d| (0..m).map(|l| s(l) * s(l + d)).sum()).collect();
            *map.entry((bits.count_ones() as usize, auto)).or_insert(0.0) += 1.0;
        }
        let mut classes: Vec<_> = map.into_iter().map(|((s, a), c)| (s, a, c)).collect();
        classes.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        Self { m, classes }
    }
}

/// Inputs of the single-site path sum: `β, b, c`, the slice count and kernel.
#[derive(Debug, Clone)]
pub struct SingleSiteModel {
    pub beta: f64,
    pub b: f64,
    pub c: f64,
    kernel: SelfOverlapKernel,
    coupling_k: Option<f64>,
    log_prefactor: f64,
    classes: Option<Arc<PathClasses>>,
    /// `log Σ_{σ: S} exp{(β²/(2M²)) Σ y σσ + βK Σ σ_lσ_{l+1}}` by S index.
    log_b: Vec<f64>,
}

impl SingleSiteModel {
    /// At `b = 0` the slices lock and the model is classical for any `M`.
    pub fn new(beta: f64, b: f64, c: f64, kernel: SelfOverlapKernel) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        let m = kernel.m_slices();
        if b == 0.0 {
            return Ok(Self {
                beta,
                b,
                c,
                kernel,
                coupling_k: None,
                log_prefactor: 0.0,
                classes: None,
                log_b: Vec::new(),
            });
        }
        if m > MAX_SITE_SLICES {
            return Err(Error::SizeCap {
                what: "m_slices",
                value: m,
                cap: MAX_SITE_SLICES,
            });
        }
        let classes = Arc::new(PathClasses::build(m));
        Self::assemble(beta, b, c, kernel, classes)
    }

    fn assemble(beta: f64, b: f64, c: f64, kernel: SelfOverlapKernel, classes: Arc<PathClasses>) -> Result<Self> {
        let m = kernel.m_slices();
        let bk = trotter_coupling(beta, b, m)?;
        let log_c = log_prefactor(beta, b, m, 1)?;
        let prof = kernel.profile();
        let quad = beta * beta / (2.0 * (m * m) as f64);
        let mut per_s: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
        for (s_idx, auto, count) in &classes.classes {
            // Σ_{l,l'} y σσ = M ŷ(0) + Σ_{d≥1} ŷ(d) A_d with A_d = A_{M−d}.
            let mut pair = m as f64 * prof[0];
            for d in 1..m {
                let r = d.min(m - d);
                pair += prof[d] * auto[r - 1] as f64;
            }
            per_s[*s_idx].push(count.ln() + quad * pair + bk * auto[0] as f64);
        }
        let log_b = per_s.into_iter().map(log_sum_exp).collect();
        Ok(Self {
            beta,
            b,
            c,
            kernel,
            coupling_k: Some(bk),
            log_prefactor: log_c,
            classes: Some(classes),
            log_b,
        })
    }

    /// Same model with a different kernel, reusing the path classes.
    pub fn with_kernel(&self, kernel: SelfOverlapKernel) -> Result<Self> {
        match &self.classes {
            None => Self::new(self.beta, self.b, self.c, kernel),
            Some(cl) if cl.m == kernel.m_slices() => Self::assemble(self.beta, self.b, self.c, kernel, cl.clone()),
            Some(_) => Self::new(self.beta, self.b, self.c, kernel),
        }
    }

    pub fn with_field(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.c = c;
        out
    }

    pub fn kernel(&self) -> &SelfOverlapKernel {
        &self.kernel
    }

    pub fn m_slices(&self) -> usize {
        self.kernel.m_slices()
    }

    pub fn is_classical(&self) -> bool {
        self.coupling_k.is_none()
    }

    pub fn coupling_k(&self) -> Option<f64> {
        self.coupling_k
    }

    /// `log ζ` at total cavity field `h` after the analytic level-k average
    /// with variance `ξ'(q_k)`.
    pub fn log_zeta(&self, h: f64, xi_prime_qk: f64) -> f64 {
        let beta = self.beta;
        if self.is_classical() {
            let mean_y = self.kernel.total() / (self.m_slices() * self.m_slices()) as f64;
            let x = (beta * h).abs();
            return x + (-2.0 * x).exp().ln_1p() + beta * beta / 2.0 * (mean_y - xi_prime_qk);
        }
        let m = self.m_slices() as f64;
        let lin = beta * h / m;
        let quad = beta * beta * xi_prime_qk / (2.0 * m * m);
        let mut best = f64::NEG_INFINITY;
        let terms: Vec<f64> = self
            .log_b
            .iter()
            .enumerate()
            .map(|(idx, lb)| {
                let s = m - 2.0 * idx as f64;
                let v = lb + lin * s - quad * s * s;
                best = best.max(v);
                v
            })
            .collect();
        let sum: f64 = terms.iter().map(|v| (v - best).exp()).sum();
        self.log_prefactor + best + sum.ln()
    }
}

/// Cavity-field amplitudes `a_p = √(ξ'(q_{p+1}) − ξ'(q_p))`, `p = 0..k−1`.
fn field_amplitudes(rsb: &RsbParams, mix: &MixtureFunction) -> Vec<f64> {
    let q = rsb.q();
    (0..rsb.k()).map(|p| (mix.xi_prime(q[p + 1]) - mix.xi_prime(q[p])).max(0.0).sqrt()).collect()
}

/// `ζ` at explicit real fields `z^0..z^{k−1}`.
pub fn zeta_initial(z_fields: &[f64], rsb: &RsbParams, mix: &MixtureFunction, site: &SingleSiteModel) -> Result<f64> {
    Ok(log_zeta_initial(z_fields, rsb, mix, site)?.exp())
}

pub fn log_zeta_initial(z_fields: &[f64], rsb: &RsbParams, mix: &MixtureFunction, site: &SingleSiteModel) -> Result<f64> {
    if z_fields.len() != rsb.k() {
        return Err(Error::DimensionMismatch {
            expected: rsb.k(),
            got: z_fields.len(),
        });
    }
    let a = field_amplitudes(rsb, mix);
    let h = site.c + a.iter().zip(z_fields).map(|(a, z)| a * z).sum::<f64>();
    Ok(site.log_zeta(h, mix.xi_prime(rsb.q()[rsb.k()])))
}

struct Recursion<'a> {
    site: &'a SingleSiteModel,
    rule: &'a QuadratureRule,
    log_w: Vec<f64>,
    amps: Vec<f64>,
    m: &'a [f64],
    xi_k: f64,
}

impl Recursion<'_> {
    /// `log ζ_j(h)` for `j = k−1` down to `0`.
    fn log_zeta(&self, j: usize, h: f64) -> f64 {
        let k = self.amps.len();
        if j + 1 == k {
            return self.site.log_zeta(h, self.xi_k);
        }
        let level = j + 1;
        let a = self.amps[level];
        if a == 0.0 {
            return self.log_zeta(level, h);
        }
        let ml = self.m[level];
        let terms = self
            .rule
            .nodes
            .iter()
            .zip(&self.log_w)
            .map(|(z, lw)| lw + ml * self.log_zeta(level, h + a * z));
        log_sum_exp(terms) / ml
    }
}

fn elog_zeta0_with(rsb: &RsbParams, amps: Vec<f64>, xi_k: f64, site: &SingleSiteModel, quad: &QuadratureSpec) -> Result<f64> {
    let rule = quad.rule()?;
    let log_w = rule.weights.iter().map(|w| w.ln()).collect();
    let rec = Recursion {
        site,
        rule: &rule,
        log_w,
        amps,
        m: rsb.m(),
        xi_k,
    };
    let a0 = rec.amps[0];
    if a0 == 0.0 {
        return Ok(rec.log_zeta(0, site.c));
    }
    Ok(rule.expect(|z| rec.log_zeta(0, site.c + a0 * z)))
}

/// `E log ζ_0` by nested quadrature in the log domain.
pub fn elog_zeta0(rsb: &RsbParams, mix: &MixtureFunction, site: &SingleSiteModel, quad: &QuadratureSpec) -> Result<f64> {
    elog_zeta0_with(rsb, field_amplitudes(rsb, mix), mix.xi_prime(rsb.q()[rsb.k()]), site, quad)
}

/// `P_k = E log ζ_0 − (β²/2) Σ_{l=1}^k m_l (θ(q_{l+1}) − θ(q_l))`.
pub fn parisi_functional(rsb: &RsbParams, mix: &MixtureFunction, site: &SingleSiteModel, quad: &QuadratureSpec) -> Result<f64> {
    let (m, q) = (rsb.m(), rsb.q());
    let corr: f64 = (1..=rsb.k()).map(|l| m[l] * (mix.theta(q[l + 1]) - mix.theta(q[l]))).sum();
    Ok(elog_zeta0(rsb, mix, site, quad)? - site.beta * site.beta / 2.0 * corr)
}

/// The SK functional written directly in `q`:
/// `E log ζ_0 − (β²/4) Σ m_l (q_{l+1}² − q_l²)` with fields `√(q_{p+1} − q_p)`.
pub fn parisi_functional_sk(rsb: &RsbParams, site: &SingleSiteModel, quad: &QuadratureSpec) -> Result<f64> {
    let (m, q) = (rsb.m(), rsb.q());
    let k = rsb.k();
    let amps = (0..k).map(|p| (q[p + 1] - q[p]).max(0.0).sqrt()).collect();
    let e = elog_zeta0_with(rsb, amps, q[k], site, quad)?;
    let corr: f64 = (1..=k).map(|l| m[l] * (q[l + 1] * q[l + 1] - q[l] * q[l])).sum();
    Ok(e - site.beta * site.beta / 4.0 * corr)
}
