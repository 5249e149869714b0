//! Suzuki–Trotter representation: the quantum partition function as a sum
//! over classical spin paths `σ ∈ {±1}^{M×N}`, periodic in the slice index.
//!
//! The transverse field becomes a ferromagnetic coupling `K` along
//! imaginary time with `tanh(βK) = e^{−2βb/M}`, and the normalization
//! `C_{M,N} = (½ sinh(2βb/M))^{MN/2}` makes `C Σ_σ e^{−βH}` converge to
//! `Tr e^{−βH}`. At `b = 0` the coupling is infinite and every slice locks
//! to one classical configuration.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantum::{build_sk_hamiltonian, classical_diagonal, log_partition, spectral_decompose, DisorderSample, ModelParams};
use crate::rsb::SelfOverlapKernel;
use crate::stochastics::{log_sum_exp, mc_estimate, par_map_indexed, LogSumExp, MCEstimate, RngStream};

pub const MAX_ENUMERATED_SPINS: usize = 24;
pub const MAX_IDENTITY_SPINS: usize = 16;
pub const MAX_TRANSFER_SPINS: usize = 12;

/// `βK = atanh(e^{−2βb/M})`; `b = 0` yields [`Error::ClassicalLimit`].
pub fn trotter_coupling(beta: f64, b: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(invalid(format!("need at least 2 Trotter slices, got {m}")));
    }
    if b == 0.0 {
        return Err(Error::ClassicalLimit);
    }
    let x = 2.0 * beta * b.abs() / m as f64;
    // atanh(e^{-x}) = ½ log1p(2 / (e^x − 1)), accurate at both ends.
    Ok(0.5 * (2.0 / x.exp_m1()).ln_1p())
}

/// `log C_{M,N} = (MN/2) log(½ sinh(2βb/M))`.
pub fn log_prefactor(beta: f64, b: f64, m: usize, n: usize) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::ClassicalLimit);
    }
    let x = 2.0 * beta * b.abs() / m as f64;
    Ok((m * n) as f64 / 2.0 * (0.5 * x.sinh()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrotterConfig {
    pub m_slices: usize,
    /// `βK`.
    pub coupling_k: f64,
    /// `log C_{M,N}`.
    pub log_prefactor: f64,
}

impl TrotterConfig {
    pub fn new(params: &ModelParams, m: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            m_slices: m,
            coupling_k: trotter_coupling(params.beta, params.b, m)?,
            log_prefactor: log_prefactor(params.beta, params.b, m, params.n_spins)?,
        })
    }
}

/// Spin field `σ_{l,i}`, stored slice-major and read periodically in `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConfiguration {
    m: usize,
    n: usize,
    spins: Vec<i8>,
}

impl PathConfiguration {
    pub fn new(m: usize, n: usize, spins: Vec<i8>) -> Result<Self> {
        if spins.len() != m * n {
            return Err(Error::DimensionMismatch {
                expected: m * n,
                got: spins.len(),
            });
        }
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(invalid("path spins must be ±1"));
        }
        Ok(Self { m, n, spins })
    }

    /// Bit `l·N + i` of `bits` set means `σ_{l,i} = −1`.
    pub fn from_bits(m: usize, n: usize, bits: u64) -> Self {
        let spins = (0..m * n).map(|k| if (bits >> k) & 1 == 0 { 1 } else { -1 }).collect();
        Self { m, n, spins }
    }

    pub fn m_slices(&self) -> usize {
        self.m
    }

    pub fn n_spins(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, l: isize, i: usize) -> f64 {
        let l = l.rem_euclid(self.m as isize) as usize;
        self.spins[l * self.n + i] as f64
    }

    pub fn slice(&self, l: usize) -> Vec<f64> {
        self.spins[l * self.n..(l + 1) * self.n].iter().map(|&s| s as f64).collect()
    }

    pub fn flipped(&self) -> Self {
        Self {
            m: self.m,
            n: self.n,
            spins: self.spins.iter().map(|s| -s).collect(),
        }
    }

    /// Self-overlap matrix `ρ_{l,l'} = (1/N) Σ_i σ_{l,i} σ_{l',i}`.
    pub fn overlap_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |a, b| self_overlap(self, self, a, b))
    }
}

/// `(1/N) Σ_i σ^a_{l,i} σ^b_{l',i}`.
pub fn self_overlap(a: &PathConfiguration, b: &PathConfiguration, l: usize, l2: usize) -> f64 {
    debug_assert_eq!(a.n, b.n);
    let mut acc = 0.0;
    for i in 0..a.n {
        acc += a.get(l as isize, i) * b.get(l2 as isize, i);
    }
    acc / a.n as f64
}

fn check_path(config: &PathConfiguration, sample: &DisorderSample, params: &ModelParams, trotter: &TrotterConfig) -> Result<()> {
    if sample.order() != 2 {
        return Err(invalid("path energies are defined for pair couplings"));
    }
    if config.n != params.n_spins || sample.n_spins() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            got: config.n,
        });
    }
    if config.m != trotter.m_slices {
        return Err(Error::DimensionMismatch {
            expected: trotter.m_slices,
            got: config.m,
        });
    }
    Ok(())
}

/// `H_{M,N}(σ)` including the imaginary-time bonds `K Σ σ_{l,i}σ_{l+1,i}`.
pub fn path_energy(
    config: &PathConfiguration,
    sample: &DisorderSample,
    params: &ModelParams,
    trotter: &TrotterConfig,
) -> Result<f64> {
    check_path(config, sample, params, trotter)?;
    let (m, n) = (config.m, config.n);
    let k = trotter.coupling_k / params.beta;
    let scale = 1.0 / (m as f64 * (n as f64).sqrt());
    let mut e = 0.0;
    for l in 0..m {
        let s = config.slice(l);
        e -= scale * sample.interaction(&s);
        e -= params.c / m as f64 * s.iter().sum::<f64>();
        for i in 0..n {
            e -= k * config.get(l as isize, i) * config.get(l as isize + 1, i);
        }
    }
    Ok(e)
}

/// Effective energy with general `(y_{l,l'})`:
/// `H + (βN/(4M²)) Σ_{l,l'} [t ρ_{l,l'}² − 2 ρ_{l,l'} y_{l,l'}]`.
pub fn effective_path_energy_matrix(
    config: &PathConfiguration,
    sample: &DisorderSample,
    params: &ModelParams,
    trotter: &TrotterConfig,
    t: f64,
    y: &DMatrix<f64>,
) -> Result<f64> {
    let base = path_energy(config, sample, params, trotter)?;
    let m = config.m;
    if y.nrows() != m || y.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: y.nrows(),
        });
    }
    let rho = config.overlap_matrix();
    let mut acc = 0.0;
    for a in 0..m {
        for b in 0..m {
            let r = rho[(a, b)];
            acc += t * r * r - 2.0 * r * y[(a, b)];
        }
    }
    let pref = params.beta * params.n_spins as f64 / (4.0 * (m * m) as f64);
    Ok(base + pref * acc)
}

pub fn effective_path_energy(
    config: &PathConfiguration,
    sample: &DisorderSample,
    params: &ModelParams,
    trotter: &TrotterConfig,
    t: f64,
    kernel: &SelfOverlapKernel,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must lie in [0, 1], got {t}")));
    }
    if kernel.m_slices() != config.m {
        return Err(Error::DimensionMismatch {
            expected: config.m,
            got: kernel.m_slices(),
        });
    }
    effective_path_energy_matrix(config, sample, params, trotter, t, &kernel.matrix())
}

/// Classical `log Σ_σ e^{−βH(σ)}` over `N` spins, the locked-slice limit.
pub fn classical_log_partition(params: &ModelParams, sample: &DisorderSample) -> Result<f64> {
    if params.n_spins > MAX_ENUMERATED_SPINS {
        return Err(Error::SizeCap {
            what: "n_spins",
            value: params.n_spins,
            cap: MAX_ENUMERATED_SPINS,
        });
    }
    let diag = classical_diagonal(sample, 1.0 / (params.n_spins as f64).sqrt(), params.c);
    Ok(log_sum_exp(diag.iter().map(|e| -params.beta * e)))
}

/// `log C_{M,N} + log Σ_σ e^{−βH_{M,N}(σ)}` by exhaustive enumeration.
///
/// Spins are visited in Gray-code order so each step flips one spin and
/// updates `−βH` in `O(N)`. The classical limit `b = 0` is routed to the
/// `N`-spin classical sum.
pub fn enumerate_log_partition(params: &ModelParams, sample: &DisorderSample, m: usize) -> Result<f64> {
    params.validate()?;
    if sample.order() != 2 || sample.n_spins() != params.n_spins {
        return Err(invalid("enumeration needs pair couplings sized for n_spins"));
    }
    let trotter = match TrotterConfig::new(params, m) {
        Ok(t) => t,
        Err(Error::ClassicalLimit) => return classical_log_partition(params, sample),
        Err(e) => return Err(e),
    };
    let n = params.n_spins;
    let total = m * n;
    if total > MAX_ENUMERATED_SPINS {
        return Err(Error::SizeCap {
            what: "m_slices * n_spins",
            value: total,
            cap: MAX_ENUMERATED_SPINS,
        });
    }
    let beta = params.beta;
    let jscale = beta / (m as f64 * (n as f64).sqrt());
    let hfield = beta * params.c / m as f64;
    let bk = trotter.coupling_k;
    let mut coupling = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            coupling[i * n + j] = jscale * sample.pair(i, j);
            coupling[j * n + i] = coupling[i * n + j];
        }
    }

    let mut spins = vec![1.0f64; total];
    // −βH at all spins up.
    let mut log_w = 0.0;
    for _l in 0..m {
        for i in 0..n {
            for j in i + 1..n {
                log_w += coupling[i * n + j];
            }
        }
    }
    log_w += (hfield + bk) * total as f64;

    let mut lse = LogSumExp::default();
    lse.add(log_w);
    for step in 1u64..(1u64 << total) {
        let k = step.trailing_zeros() as usize;
        let (l, i) = (k / n, k % n);
        let s = spins[k];
        let mut local = hfield;
        let row = l * n;
        for j in 0..n {
            local += coupling[i * n + j] * spins[row + j];
        }
        let up = ((l + 1) % m) * n + i;
        let down = ((l + m - 1) % m) * n + i;
        local += bk * (spins[up] + spins[down]);
        log_w -= 2.0 * s * local;
        spins[k] = -s;
        lse.add(log_w);
    }
    Ok(trotter.log_prefactor + lse.value())
}

/// The same Trotter path sum computed as `C Tr (D^{1/2} T D^{1/2})^M` with
/// the `2^N × 2^N` slice transfer matrix; exact for any `M`.
pub fn transfer_log_partition(params: &ModelParams, sample: &DisorderSample, m: usize) -> Result<f64> {
    params.validate()?;
    let trotter = match TrotterConfig::new(params, m) {
        Ok(t) => t,
        Err(Error::ClassicalLimit) => return classical_log_partition(params, sample),
        Err(e) => return Err(e),
    };
    let n = params.n_spins;
    if n > MAX_TRANSFER_SPINS {
        return Err(Error::SizeCap {
            what: "n_spins",
            value: n,
            cap: MAX_TRANSFER_SPINS,
        });
    }
    let diag = classical_diagonal(sample, 1.0 / (n as f64).sqrt(), params.c);
    let half: Vec<f64> = diag.iter().map(|e| -params.beta * e / (2.0 * m as f64)).collect();
    let bk = trotter.coupling_k;
    let dim = 1usize << n;
    let mat = DMatrix::from_fn(dim, dim, |a, b| {
        let differ = (a ^ b).count_ones() as f64;
        let same = n as f64 - differ;
        (half[a] + half[b] + bk * (same - differ)).exp()
    });
    let eig = SymmetricEigen::new(mat);
    let top = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) {
        return Err(Error::Estimator("transfer matrix has no positive eigenvalue".into()));
    }
    let rest: f64 = eig.eigenvalues.iter().map(|v| (v / top).powi(m as i32)).sum();
    Ok(trotter.log_prefactor + m as f64 * top.ln() + rest.ln())
}

/// Path sum for the largest tractable method: enumeration up to
/// [`MAX_ENUMERATED_SPINS`] path spins, transfer matrix beyond.
pub fn trotter_log_partition(params: &ModelParams, sample: &DisorderSample, m: usize) -> Result<f64> {
    if m * params.n_spins <= MAX_ENUMERATED_SPINS {
        enumerate_log_partition(params, sample, m)
    } else {
        transfer_log_partition(params, sample, m)
    }
}

/// One row of a Trotter convergence report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub m: usize,
    pub beta: f64,
    pub b: f64,
    pub c: f64,
    pub seed: u64,
    pub log_z_trotter: f64,
    pub log_z_exact: f64,
    pub abs_error: f64,
}

/// Trotter path sums at each `M` against the exact spectrum, for one SK
/// sample drawn from `seed`.
pub fn convergence_table(params: &ModelParams, ms: &[usize], seed: u64) -> Result<Vec<ConvergenceRow>> {
    params.validate()?;
    let sample = DisorderSample::gaussian(2, params.n_spins, &RngStream::new(seed))?;
    let h = build_sk_hamiltonian(params, &sample)?;
    let exact = log_partition(&spectral_decompose(&h)?, params.beta);
    ms.iter()
        .map(|&m| {
            let log_z_trotter = trotter_log_partition(params, &sample, m)?;
            Ok(ConvergenceRow {
                n: params.n_spins,
                m,
                beta: params.beta,
                b: params.b,
                c: params.c,
                seed,
                log_z_trotter,
                log_z_exact: exact,
                abs_error: (log_z_trotter - exact).abs(),
            })
        })
        .collect()
}

/// Both sides of the annealed self-overlap identity at finite `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// MC estimate of `E₁ Σ_σ e^{−βH(σ, g + ı g¹)}` scaled by `e^{−log_scale}`.
    pub lhs: MCEstimate,
    /// `e^{β²/4} Σ_σ e^{−βH^eff(σ)}` scaled by `e^{−log_scale}`.
    pub rhs: f64,
    pub log_scale: f64,
    /// `(lhs − rhs) / stderr(lhs)`.
    pub gap: f64,
}

/// Checks `E₁ Σ_σ e^{−βH(g + ıg¹)} = e^{β²/4} Σ_σ e^{−βH^eff}` at finite `M`
/// (the prefactor `C_{M,N}` multiplies both sides and is left out).
///
/// Configurations are grouped by their pair-product vector
/// `P_{ij} = Σ_l σ_{l,i}σ_{l,j}`, which is all the `g¹` phase depends on.
/// `imag_scale` multiplies `g¹`; anything other than 1 breaks the identity
/// and serves as a negative control.
pub fn corrected_identity_check(
    params: &ModelParams,
    sample: &DisorderSample,
    m: usize,
    n_mc: usize,
    seed: u64,
    imag_scale: f64,
) -> Result<IdentityCheck> {
    let trotter = TrotterConfig::new(params, m)?;
    let n = params.n_spins;
    if m * n > MAX_IDENTITY_SPINS {
        return Err(Error::SizeCap {
            what: "m_slices * n_spins",
            value: m * n,
            cap: MAX_IDENTITY_SPINS,
        });
    }
    if n_mc < 4 || n_mc % 2 == 1 {
        return Err(invalid(format!("n_mc must be even and >= 4, got {n_mc}")));
    }
    let beta = params.beta;
    let zero_y = DMatrix::zeros(m, m);
    let mut plain = Vec::with_capacity(1 << (m * n));
    let mut effective = Vec::with_capacity(1 << (m * n));
    let mut classes: HashMap<Vec<i32>, usize> = HashMap::new();
    let mut class_of = Vec::with_capacity(1 << (m * n));
    for bits in 0..(1u64 << (m * n)) {
        let cfg = PathConfiguration::from_bits(m, n, bits);
        plain.push(-beta * path_energy(&cfg, sample, params, &trotter)?);
        effective.push(-beta * effective_path_energy_matrix(&cfg, sample, params, &trotter, 1.0, &zero_y)?);
        let mut key = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                key.push((0..m).map(|l| (cfg.get(l as isize, i) * cfg.get(l as isize, j)) as i32).sum());
            }
        }
        let next = classes.len();
        class_of.push(*classes.entry(key).or_insert(next));
    }
    let log_scale = plain.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut keys = vec![Vec::new(); classes.len()];
    for (k, idx) in classes {
        keys[idx] = k;
    }
    let mut weights = vec![0.0; keys.len()];
    for (x, &cls) in class_of.iter().enumerate() {
        weights[cls] += (plain[x] - log_scale).exp();
    }

    let phase_scale = imag_scale * beta / (m as f64 * (n as f64).sqrt());
    let root = RngStream::new(seed);
    let n_pairs_coupling = n * (n - 1) / 2;
    let values: Vec<f64> = par_map_indexed(n_mc / 2, |j| {
        let g1 = crate::stochastics::gaussian_samples(&root.child(j as u64), n_pairs_coupling);
        keys.iter()
            .zip(&weights)
            .map(|(key, w)| {
                let dot: f64 = key.iter().zip(&g1).map(|(&p, g)| p as f64 * g).sum();
                w * (phase_scale * dot).cos()
            })
            .sum()
    });
    let lhs = mc_estimate(&values)?;
    let rhs = (beta * beta / 4.0 + log_sum_exp(effective.iter().copied()) - log_scale).exp();
    let gap = if lhs.stderr > 0.0 {
        (lhs.mean - rhs) / lhs.stderr
    } else if (lhs.mean - rhs).abs() <= 1e-12 * rhs.abs() {
        0.0
    } else {
        f64::INFINITY.copysign(lhs.mean - rhs)
    };
    Ok(IdentityCheck {
        lhs,
        rhs,
        log_scale,
        gap,
    })
}
