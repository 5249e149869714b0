//! Operator formalism on the full `2^N` Hilbert space.
//!
//! Basis state `x` encodes spin `i` in bit `i`: a clear bit is `σ_i = +1`
//! and a set bit is `σ_i = −1`. `S^z = diag(1, −1)` and `S^x` flips one bit.
//! Every Hamiltonian built here is real symmetric, so operators are stored
//! as `DMatrix<f64>`; the complex-coupled model is the one place complex
//! arithmetic appears.

use std::io::{Read, Write};

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stochastics::{gaussian_samples, mc_estimate, par_map_indexed, MCEstimate, RngStream};

pub const DEFAULT_MAX_SPINS: usize = 14;
pub const DEFAULT_MAX_COMPLEX_SPINS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub b: f64,
    pub c: f64,
    pub n_spins: usize,
}

impl ModelParams {
    pub fn new(beta: f64, b: f64, c: f64, n_spins: usize) -> Result<Self> {
        let p = Self { beta, b, c, n_spins };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !self.b.is_finite() || !self.c.is_finite() {
            return Err(invalid("fields b and c must be finite"));
        }
        if self.n_spins == 0 {
            return Err(invalid("n_spins must be at least 1"));
        }
        Ok(())
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// All strictly increasing `p`-tuples of `0..n` in lexicographic order.
pub fn index_tuples(n: usize, p: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, p));
    if p > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..p).collect();
    loop {
        out.push(cur.clone());
        let mut i = p;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - p + i {
                cur[i] += 1;
                for j in i + 1..p {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// One realization of the Gaussian couplings, indexed by increasing tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderSample {
    order: usize,
    n_spins: usize,
    values: Vec<f64>,
}

impl DisorderSample {
    pub fn new(order: usize, n_spins: usize, values: Vec<f64>) -> Result<Self> {
        if order == 0 || order % 2 == 1 {
            return Err(invalid(format!("interaction order must be even and positive, got {order}")));
        }
        let expected = binomial(n_spins, order);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            order,
            n_spins,
            values,
        })
    }

    pub fn zeros(order: usize, n_spins: usize) -> Result<Self> {
        Self::new(order, n_spins, vec![0.0; binomial(n_spins, order)])
    }

    pub fn gaussian(order: usize, n_spins: usize, stream: &RngStream) -> Result<Self> {
        Self::new(order, n_spins, gaussian_samples(stream, binomial(n_spins, order)))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn negated(&self) -> Self {
        Self {
            order: self.order,
            n_spins: self.n_spins,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Pair coupling `g_{ij}` for `i < j` (order-2 samples only).
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.order == 2 && i < j && j < self.n_spins);
        let n = self.n_spins;
        self.values[i * (2 * n - i - 1) / 2 + (j - i - 1)]
    }

    /// `Σ g_{i₁…i_p} σ_{i₁}⋯σ_{i_p}` for a ±1 configuration.
    pub fn interaction(&self, spins: &[f64]) -> f64 {
        if self.order == 2 {
            let n = self.n_spins;
            let mut acc = 0.0;
            let mut idx = 0;
            for i in 0..n {
                let mut row = 0.0;
                for j in i + 1..n {
                    row += self.values[idx] * spins[j];
                    idx += 1;
                }
                acc += spins[i] * row;
            }
            return acc;
        }
        index_tuples(self.n_spins, self.order)
            .iter()
            .zip(&self.values)
            .map(|(t, g)| g * t.iter().map(|&i| spins[i]).product::<f64>())
            .sum()
    }
}

/// Couplings `g + ı g¹` of the self-overlap corrected model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexCoupledSample {
    pub real_part: DisorderSample,
    pub imag_part: DisorderSample,
}

impl ComplexCoupledSample {
    pub fn new(real_part: DisorderSample, imag_part: DisorderSample) -> Result<Self> {
        if real_part.order != imag_part.order || real_part.n_spins != imag_part.n_spins {
            return Err(invalid("real and imaginary couplings differ in shape"));
        }
        Ok(Self {
            real_part,
            imag_part,
        })
    }
}

/// `√(p!/(2N^{p−1}))`, which is `1/√N` at `p = 2`.
pub fn pspin_scale(p: usize, n: usize) -> f64 {
    let fact: f64 = (1..=p).map(|i| i as f64).product();
    (fact / (2.0 * (n as f64).powi(p as i32 - 1))).sqrt()
}

#[inline]
pub fn spin_of(state: usize, site: usize) -> f64 {
    if (state >> site) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn basis_spins(state: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| spin_of(state, i)).collect()
}

fn check_size(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::SizeCap {
            what: "n_spins",
            value: n,
            cap,
        });
    }
    Ok(())
}

fn check_sample(params: &ModelParams, sample: &DisorderSample) -> Result<()> {
    params.validate()?;
    if sample.n_spins != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            got: sample.n_spins,
        });
    }
    Ok(())
}

/// Diagonal of the classical part `−scale·U(σ) − c Σσ` over the basis.
pub fn classical_diagonal(sample: &DisorderSample, scale: f64, c: f64) -> Vec<f64> {
    let n = sample.n_spins;
    (0..1usize << n)
        .map(|x| {
            let s = basis_spins(x, n);
            -scale * sample.interaction(&s) - c * s.iter().sum::<f64>()
        })
        .collect()
}

fn hamiltonian_from_diagonal(diag: &[f64], n: usize, b: f64) -> DMatrix<f64> {
    let dim = 1usize << n;
    let mut h = DMatrix::zeros(dim, dim);
    for (x, &d) in diag.iter().enumerate() {
        h[(x, x)] = d;
        if b != 0.0 {
            for i in 0..n {
                h[(x, x ^ (1 << i))] -= b;
            }
        }
    }
    h
}

pub fn build_sk_hamiltonian(params: &ModelParams, sample: &DisorderSample) -> Result<DMatrix<f64>> {
    build_sk_hamiltonian_capped(params, sample, DEFAULT_MAX_SPINS)
}

/// `−(1/√N) Σ_{i<j} g_ij S^z_i S^z_j − Σ_j (c S^z_j + b S^x_j)`.
pub fn build_sk_hamiltonian_capped(
    params: &ModelParams,
    sample: &DisorderSample,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_sample(params, sample)?;
    if sample.order != 2 {
        return Err(invalid("SK Hamiltonian needs pair couplings"));
    }
    check_size(params.n_spins, cap)?;
    let n = params.n_spins;
    let diag = classical_diagonal(sample, 1.0 / (n as f64).sqrt(), params.c);
    Ok(hamiltonian_from_diagonal(&diag, n, params.b))
}

/// p-spin Hamiltonian with interaction prefactor `−√(p!/(2N^{p−1}))`.
pub fn build_pspin_hamiltonian(params: &ModelParams, sample: &DisorderSample) -> Result<DMatrix<f64>> {
    check_sample(params, sample)?;
    check_size(params.n_spins, DEFAULT_MAX_SPINS)?;
    let n = params.n_spins;
    let diag = classical_diagonal(sample, pspin_scale(sample.order, n), params.c);
    Ok(hamiltonian_from_diagonal(&diag, n, params.b))
}

/// `S^z_site` on `n` spins.
pub fn sz(n: usize, site: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(1 << n, |x, _| spin_of(x, site)))
}

/// `S^x_site` on `n` spins.
pub fn sx(n: usize, site: usize) -> DMatrix<f64> {
    let dim = 1usize << n;
    let mut m = DMatrix::zeros(dim, dim);
    for x in 0..dim {
        m[(x, x ^ (1 << site))] = 1.0;
    }
    m
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Boltzmann weights `e^{−β(E_i − E_0)}` and `log Z`.
    fn weights(&self, beta: f64) -> (Vec<f64>, f64) {
        let e0 = self.eigenvalues[0];
        let w: Vec<f64> = self.eigenvalues.iter().map(|e| (-beta * (e - e0)).exp()).collect();
        let z_shift: f64 = w.iter().sum();
        (w, -beta * e0 + z_shift.ln())
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose()
    }

    fn rotate(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.eigenvectors.transpose() * a * &self.eigenvectors
    }

    fn check_dim(&self, a: &DMatrix<f64>) -> Result<()> {
        if a.nrows() != self.dim() || a.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: a.nrows(),
            });
        }
        Ok(())
    }
}

pub fn max_asymmetry(h: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..h.nrows() {
        for j in 0..i {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

pub fn spectral_decompose(h: &DMatrix<f64>) -> Result<SpectralData> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: h.ncols(),
        });
    }
    let scale = h.amax().max(1.0);
    let asym = max_asymmetry(h);
    if asym > 1e-12 * scale {
        return Err(Error::NotHermitian(asym));
    }
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let eigenvalues = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors = DMatrix::from_fn(h.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SpectralData {
        eigenvalues,
        eigenvectors,
    })
}

pub fn log_partition(spec: &SpectralData, beta: f64) -> f64 {
    spec.weights(beta).1
}

/// `Tr(A e^{−βH}) / Z`.
pub fn gibbs_expectation(a: &DMatrix<f64>, spec: &SpectralData, beta: f64) -> Result<f64> {
    spec.check_dim(a)?;
    let (w, _) = spec.weights(beta);
    let av = a * &spec.eigenvectors;
    let mut num = 0.0;
    for (i, wi) in w.iter().enumerate() {
        num += wi * spec.eigenvectors.column(i).dot(&av.column(i));
    }
    Ok(num / w.iter().sum::<f64>())
}

/// `(e^{−βE} − e^{−βE'})/(β(E' − E))`, with both energies already shifted.
fn duhamel_kernel(e: f64, e2: f64, beta: f64) -> f64 {
    let lo = e.min(e2);
    let gap = (e - e2).abs();
    if gap <= 1e-12 * e.abs().max(e2.abs()).max(1.0) {
        return (-beta * lo).exp();
    }
    (-beta * lo).exp() * (-(-beta * gap).exp_m1()) / (beta * gap)
}

/// Duhamel two-point function `(A, B)` in the eigenbasis of `H`.
pub fn duhamel(a: &DMatrix<f64>, b: &DMatrix<f64>, spec: &SpectralData, beta: f64) -> Result<f64> {
    spec.check_dim(a)?;
    spec.check_dim(b)?;
    let (w, _) = spec.weights(beta);
    let z: f64 = w.iter().sum();
    let e0 = spec.eigenvalues[0];
    let at = spec.rotate(a);
    let bt = spec.rotate(b);
    let d = spec.dim();
    let mut acc = 0.0;
    for m in 0..d {
        let em = spec.eigenvalues[m] - e0;
        for n in 0..d {
            let en = spec.eigenvalues[n] - e0;
            acc += at[(m, n)] * bt[(n, m)] * duhamel_kernel(em, en, beta);
        }
    }
    Ok(acc / z)
}

/// Gibbs weights of the computational basis states, `⟨x|e^{−βH}|x⟩/Z`.
pub fn diagonal_density(spec: &SpectralData, beta: f64) -> Vec<f64> {
    let (w, _) = spec.weights(beta);
    let z: f64 = w.iter().sum();
    let v = &spec.eigenvectors;
    (0..spec.dim())
        .map(|x| (0..spec.dim()).map(|i| w[i] * v[(x, i)] * v[(x, i)]).sum::<f64>() / z)
        .collect()
}

/// `⟨S^z_i S^z_j⟩` for all pairs.
pub fn zz_correlations(spec: &SpectralData, beta: f64) -> DMatrix<f64> {
    let rho = diagonal_density(spec, beta);
    let n = spec.dim().trailing_zeros() as usize;
    let mut corr = DMatrix::zeros(n, n);
    for (x, p) in rho.iter().enumerate() {
        let s = basis_spins(x, n);
        for i in 0..n {
            for j in 0..n {
                corr[(i, j)] += p * s[i] * s[j];
            }
        }
    }
    corr
}

/// `⟨R_{1,2}²⟩ = (1/N²) Σ_{ij} ⟨S^z_i S^z_j⟩²` on two independent replicas.
pub fn overlap_second_moment(spec: &SpectralData, beta: f64) -> f64 {
    let corr = zz_correlations(spec, beta);
    let n = corr.nrows() as f64;
    corr.iter().map(|c| c * c).sum::<f64>() / (n * n)
}

/// `(1/N) E log Z` over fresh SK disorder drawn from `seed`.
pub fn quenched_free_energy(params: &ModelParams, n_samples: usize, seed: u64) -> Result<MCEstimate> {
    params.validate()?;
    check_size(params.n_spins, DEFAULT_MAX_SPINS)?;
    if n_samples < 2 {
        return Err(invalid("n_samples must be at least 2"));
    }
    let root = RngStream::new(seed);
    let n = params.n_spins;
    let values: Result<Vec<f64>> = par_map_indexed(n_samples, |j| {
        let g = DisorderSample::gaussian(2, n, &root.child(j as u64))?;
        let h = build_sk_hamiltonian(params, &g)?;
        Ok(log_partition(&spectral_decompose(&h)?, params.beta) / n as f64)
    })
    .into_iter()
    .collect();
    mc_estimate(&values?)
}

/// `log Tr e^{−β H(g + ı g¹)}` pair-averaged over `±g¹`, returned as
/// `(log of the real pair average, imaginary residual relative to it)`.
fn complex_pair_trace(h: &DMatrix<f64>, imag_diag: &[f64], beta: f64, e0: f64) -> (f64, f64) {
    let dim = h.nrows();
    let traces: Vec<Complex<f64>> = [1.0, -1.0]
        .iter()
        .map(|&sign| {
            let m = DMatrix::from_fn(dim, dim, |r, c| {
                let mut re = -beta * h[(r, c)];
                let mut im = 0.0;
                if r == c {
                    re += beta * e0;
                    im = -beta * sign * imag_diag[r];
                }
                Complex::new(re, im)
            });
            m.exp().trace()
        })
        .collect();
    let avg = (traces[0] + traces[1]) * 0.5;
    (avg.re, avg.im.abs() / avg.re.abs().max(f64::MIN_POSITIVE))
}

/// Estimate of `log E₁ Tr e^{−βH(g + ı g¹)}` for fixed real couplings `g`.
///
/// `g¹` is drawn in antithetic pairs, so each pair contributes the real part
/// of one complex trace. A nonpositive average is an error: it means
/// `n_inner` is too small for the oscillation at this `β`.
pub fn corrected_log_partition(
    params: &ModelParams,
    g: &DisorderSample,
    n_inner: usize,
    stream: &RngStream,
) -> Result<f64> {
    check_sample(params, g)?;
    check_size(params.n_spins, DEFAULT_MAX_COMPLEX_SPINS)?;
    if n_inner < 2 || n_inner % 2 == 1 {
        return Err(invalid(format!("n_inner must be even and >= 2, got {n_inner}")));
    }
    let n = params.n_spins;
    let h = build_sk_hamiltonian_capped(params, g, DEFAULT_MAX_COMPLEX_SPINS)?;
    // The real spectrum bounds the growth of the complex exponential.
    let e0 = spectral_decompose(&h)?.eigenvalues[0];
    let scale = 1.0 / (n as f64).sqrt();
    let pairs = n_inner / 2;
    let results: Result<Vec<f64>> = par_map_indexed(pairs, |j| {
        let g1 = DisorderSample::gaussian(2, n, &stream.child(j as u64))?;
        let imag_diag = classical_diagonal(&g1, scale, 0.0);
        let (re, resid) = complex_pair_trace(&h, &imag_diag, params.beta, e0);
        if resid > 1e-9 {
            return Err(Error::Estimator(format!(
                "pair-averaged trace has imaginary residual {resid:e}"
            )));
        }
        Ok(re)
    })
    .into_iter()
    .collect();
    let results = results?;
    let mean = results.iter().sum::<f64>() / pairs as f64;
    if !(mean > 0.0) {
        return Err(Error::Estimator(format!(
            "nonpositive average trace {mean:e}; increase n_inner"
        )));
    }
    Ok(-params.beta * e0 + mean.ln())
}

/// Exact corrected log-partition at `b = 0`: the annealed pair couplings
/// only see `σ_i² = 1`, giving `log Z_g − β²(N − 1)/4`.
pub fn classical_corrected_log_partition(params: &ModelParams, g: &DisorderSample) -> Result<f64> {
    check_sample(params, g)?;
    check_size(params.n_spins, 24)?;
    let n = params.n_spins;
    let diag = classical_diagonal(g, 1.0 / (n as f64).sqrt(), params.c);
    let log_z = crate::stochastics::log_sum_exp(diag.iter().map(|e| -params.beta * e));
    Ok(log_z - params.beta * params.beta * (n as f64 - 1.0) / 4.0)
}

/// Samples of `log E₁Z_{L+M} − log E₁Z_L − log E₁Z_M + β²/4` with
/// independent disorder per size; nonnegative in expectation.
#[allow(clippy::too_many_arguments)]
pub fn superadditivity_gap(
    l: usize,
    m_spins: usize,
    beta: f64,
    b: f64,
    c: f64,
    n_samples: usize,
    n_inner: usize,
    seed: u64,
) -> Result<MCEstimate> {
    if l < 2 || m_spins < 2 {
        return Err(invalid("superadditivity needs L, M >= 2"));
    }
    let root = RngStream::new(seed);
    let sizes = [l + m_spins, l, m_spins];
    let values: Result<Vec<f64>> = par_map_indexed(n_samples, |j| {
        let s = root.child(j as u64);
        let mut logs = [0.0; 3];
        for (slot, &n) in sizes.iter().enumerate() {
            let params = ModelParams::new(beta, b, c, n)?;
            let sub = s.child(slot as u64);
            let g = DisorderSample::gaussian(2, n, &sub.child(0))?;
            logs[slot] = if b == 0.0 {
                classical_corrected_log_partition(&params, &g)?
            } else {
                corrected_log_partition(&params, &g, n_inner, &sub.child(1))?
            };
        }
        Ok(logs[0] - logs[1] - logs[2] + beta * beta / 4.0)
    })
    .into_iter()
    .collect();
    mc_estimate(&values?)
}

const DUMP_MAGIC: &[u8; 4] = b"QPOP";
const DUMP_VERSION: u32 = 1;

/// Binary operator dump: `"QPOP"`, `u32` version, `u64` dimension, then
/// row-major `(re, im)` pairs of little-endian `f64`.
pub fn write_operator_dump<W: Write>(mut w: W, op: &DMatrix<f64>) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(op.nrows() as u64).to_le_bytes())?;
    for r in 0..op.nrows() {
        for c in 0..op.ncols() {
            w.write_all(&op[(r, c)].to_le_bytes())?;
            w.write_all(&0.0f64.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_operator_dump<R: Read>(mut r: R) -> Result<DMatrix<Complex<f64>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(invalid("not an operator dump"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    if u32::from_le_bytes(v) != DUMP_VERSION {
        return Err(invalid("unsupported operator dump version"));
    }
    let mut d = [0u8; 8];
    r.read_exact(&mut d)?;
    let dim = u64::from_le_bytes(d) as usize;
    let mut out = DMatrix::zeros(dim, dim);
    let mut buf = [0u8; 8];
    for row in 0..dim {
        for col in 0..dim {
            r.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf);
            r.read_exact(&mut buf)?;
            let im = f64::from_le_bytes(buf);
            out[(row, col)] = Complex::new(re, im);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::{gauss_hermite, gauss_legendre_unit};
    use approx::assert_abs_diff_eq;

    fn params(beta: f64, b: f64, c: f64, n: usize) -> ModelParams {
        ModelParams::new(beta, b, c, n).unwrap()
    }

    fn sk(n: usize, seed: u64) -> DisorderSample {
        DisorderSample::gaussian(2, n, &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn tuples_and_pair_index_agree() {
        let t = index_tuples(5, 2);
        assert_eq!(t.len(), 10);
        let g = DisorderSample::new(2, 5, (0..10).map(|v| v as f64).collect()).unwrap();
        for (idx, pair) in t.iter().enumerate() {
            assert_eq!(g.pair(pair[0], pair[1]), idx as f64);
        }
        assert_eq!(index_tuples(4, 4), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn disorder_shape_checked() {
        assert!(DisorderSample::new(2, 3, vec![0.0; 2]).is_err());
        assert!(DisorderSample::new(3, 3, vec![0.0; 1]).is_err());
        let h = build_sk_hamiltonian(&params(1.0, 0.0, 0.0, 3), &sk(2, 0));
        assert!(matches!(h, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cap_enforced() {
        let p = params(1.0, 0.0, 0.0, 15);
        let g = DisorderSample::zeros(2, 15).unwrap();
        assert!(matches!(build_sk_hamiltonian(&p, &g), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn single_spin_transverse() {
        let h = build_sk_hamiltonian(&params(1.0, 1.0, 0.0, 1), &DisorderSample::zeros(2, 1).unwrap()).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
        let spec = spectral_decompose(&h).unwrap();
        assert_abs_diff_eq!(spec.eigenvalues[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(spec.eigenvalues[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn two_spin_diagonal() {
        let g = DisorderSample::new(2, 2, vec![1.0]).unwrap();
        let h = build_sk_hamiltonian(&params(1.0, 0.0, 0.0, 2), &g).unwrap();
        let r = 1.0 / 2f64.sqrt();
        for (x, expected) in [-r, r, r, -r].iter().enumerate() {
            assert_abs_diff_eq!(h[(x, x)], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn z2_spectrum_symmetric_at_zero_field() {
        let g = sk(4, 3);
        let h = build_sk_hamiltonian(&params(1.0, 0.0, 0.0, 4), &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let d = spec.dim();
        // Global flip maps x to its complement with the same energy.
        for x in 0..d {
            assert_abs_diff_eq!(h[(x, x)], h[(d - 1 - x, d - 1 - x)], epsilon = 1e-14);
        }
    }

    #[test]
    fn pspin_two_matches_sk() {
        let g = sk(5, 9);
        let p = params(1.0, 0.3, 0.2, 5);
        let a = build_sk_hamiltonian(&p, &g).unwrap();
        let b = build_pspin_hamiltonian(&p, &g).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn pspin_four_single_coupling() {
        let g = DisorderSample::new(4, 4, vec![0.7]).unwrap();
        let h = build_pspin_hamiltonian(&params(1.0, 0.0, 0.0, 4), &g).unwrap();
        let amp = (24.0f64 / (2.0 * 64.0)).sqrt() * 0.7;
        for x in 0..16usize {
            let parity = if x.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            assert_abs_diff_eq!(h[(x, x)], -amp * parity, epsilon = 1e-15);
        }
    }

    #[test]
    fn field_only_spectrum() {
        let c = 0.4;
        for p in [2, 4] {
            let g = DisorderSample::zeros(p, 4).unwrap();
            let h = build_pspin_hamiltonian(&params(1.0, 0.0, c, 4), &g).unwrap();
            let spec = spectral_decompose(&h).unwrap();
            let mut expected: Vec<f64> = (0..16usize)
                .map(|x| -c * (4.0 - 2.0 * x.count_ones() as f64))
                .collect();
            expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, x) in spec.eigenvalues.iter().zip(&expected) {
                assert_abs_diff_eq!(e, x, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_odd_order_and_asymmetric() {
        assert!(DisorderSample::zeros(3, 4).is_err());
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 1e-3;
        assert!(matches!(spectral_decompose(&m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let g = sk(3, 11);
        let h = build_sk_hamiltonian(&params(1.0, 0.7, 0.2, 3), &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let err = (spec.reconstruct() - &h).norm() / h.norm();
        assert!(err < 1e-10);
        let gram = spec.eigenvectors.transpose() * &spec.eigenvectors;
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-10);
        assert!(spec.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn log_partition_closed_forms() {
        let spec = spectral_decompose(
            &build_sk_hamiltonian(&params(1.0, 0.6, -0.8, 1), &DisorderSample::zeros(2, 1).unwrap()).unwrap(),
        )
        .unwrap();
        for beta in [0.3, 1.0, 2.5] {
            assert_abs_diff_eq!(log_partition(&spec, beta), (2.0 * (beta * 1.0f64).cosh()).ln(), epsilon = 1e-12);
        }
        let g = DisorderSample::new(2, 2, vec![1.3]).unwrap();
        let spec = spectral_decompose(&build_sk_hamiltonian(&params(1.0, 0.0, 0.0, 2), &g).unwrap()).unwrap();
        let beta = 0.9;
        assert_abs_diff_eq!(
            log_partition(&spec, beta),
            (4.0 * (beta * 1.3 / 2f64.sqrt()).cosh()).ln(),
            epsilon = 1e-12
        );
        let g = sk(4, 2);
        let spec = spectral_decompose(&build_sk_hamiltonian(&params(1.0, 0.5, 0.1, 4), &g).unwrap()).unwrap();
        assert_abs_diff_eq!(log_partition(&spec, 1e-8), 4.0 * 2f64.ln(), epsilon = 1e-6);
        assert!(log_partition(&spec, 1e4).is_finite());
    }

    #[test]
    fn gibbs_expectation_cases() {
        let g = sk(3, 5);
        let h = build_sk_hamiltonian(&params(1.0, 0.5, 0.3, 3), &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let beta = 0.8;
        assert_abs_diff_eq!(gibbs_expectation(&DMatrix::identity(8, 8), &spec, beta).unwrap(), 1.0, epsilon = 1e-13);
        let d = 1e-5;
        let fd = -(log_partition(&spec, beta + d) - log_partition(&spec, beta - d)) / (2.0 * d);
        let e = gibbs_expectation(&h, &spec, beta).unwrap();
        assert!(((e - fd) / e).abs() < 1e-6);

        let single = build_sk_hamiltonian(&params(1.0, 0.0, 0.7, 1), &DisorderSample::zeros(2, 1).unwrap()).unwrap();
        let s = spectral_decompose(&single).unwrap();
        assert_abs_diff_eq!(gibbs_expectation(&sz(1, 0), &s, 1.3).unwrap(), (1.3f64 * 0.7).tanh(), epsilon = 1e-13);
        assert!(gibbs_expectation(&sz(2, 0), &s, 1.0).is_err());
    }

    #[test]
    fn duhamel_against_quadrature() {
        let h = build_sk_hamiltonian(&params(1.0, 1.0, 0.0, 1), &DisorderSample::zeros(2, 1).unwrap()).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let beta = 1.0;
        let a = sz(1, 0);
        let value = duhamel(&a, &a, &spec, beta).unwrap();
        let (nodes, weights) = gauss_legendre_unit(64).unwrap();
        let z = log_partition(&spec, beta).exp();
        let mut integral = 0.0;
        for (tau, w) in nodes.iter().zip(&weights) {
            let left = (&h * (-beta * (1.0 - tau))).exp();
            let right = (&h * (-beta * tau)).exp();
            integral += w * (left * &a * right * &a).trace();
        }
        assert_abs_diff_eq!(value, integral / z, epsilon = 1e-8);
    }

    #[test]
    fn duhamel_identity_symmetry_and_commuting_limit() {
        let g = sk(3, 8);
        let h = build_sk_hamiltonian(&params(1.0, 0.4, 0.2, 3), &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let id = DMatrix::identity(8, 8);
        assert_abs_diff_eq!(duhamel(&id, &id, &spec, 1.1).unwrap(), 1.0, epsilon = 1e-12);
        let a = sz(3, 0);
        let b = sx(3, 2) + sz(3, 1);
        let ab = duhamel(&a, &b, &spec, 1.1).unwrap();
        let ba = duhamel(&b, &a, &spec, 1.1).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert!(duhamel(&b, &b, &spec, 1.1).unwrap() >= 0.0);

        let h0 = build_sk_hamiltonian(&params(1.0, 0.0, 0.2, 3), &g).unwrap();
        let spec0 = spectral_decompose(&h0).unwrap();
        let a = sz(3, 0);
        let b = sz(3, 1);
        let direct = gibbs_expectation(&(&a * &b), &spec0, 0.7).unwrap();
        assert_abs_diff_eq!(duhamel(&a, &b, &spec0, 0.7).unwrap(), direct, epsilon = 1e-10);
    }

    #[test]
    fn overlap_second_moment_cases() {
        let one = spectral_decompose(
            &build_sk_hamiltonian(&params(1.0, 0.8, 0.3, 1), &DisorderSample::zeros(2, 1).unwrap()).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(overlap_second_moment(&one, 1.0), 1.0, epsilon = 1e-14);

        let g = sk(4, 1);
        let spec = spectral_decompose(&build_sk_hamiltonian(&params(1.0, 0.5, 0.0, 4), &g).unwrap()).unwrap();
        assert_abs_diff_eq!(overlap_second_moment(&spec, 1e-9), 0.25, epsilon = 1e-7);

        // Product-space trace of R² on two replicas, N = 2.
        let g = DisorderSample::new(2, 2, vec![0.9]).unwrap();
        let h = build_sk_hamiltonian(&params(1.0, 0.0, 0.0, 2), &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let beta = 1.2;
        let id = DMatrix::<f64>::identity(4, 4);
        let h2 = h.kronecker(&id) + id.kronecker(&h);
        let mut r = DMatrix::zeros(16, 16);
        for i in 0..2 {
            r += sz(2, i).kronecker(&sz(2, i)) * 0.5;
        }
        let spec2 = spectral_decompose(&h2).unwrap();
        let product = gibbs_expectation(&(&r * &r), &spec2, beta).unwrap();
        assert_abs_diff_eq!(overlap_second_moment(&spec, beta), product, epsilon = 1e-10);
    }

    #[test]
    fn quenched_free_energy_oracles() {
        let tiny = quenched_free_energy(&params(1e-6, 0.0, 0.0, 3), 4, 1).unwrap();
        assert_abs_diff_eq!(tiny.mean, 2f64.ln(), epsilon = 1e-5);

        let beta = 1.4;
        let est = quenched_free_energy(&params(beta, 0.0, 0.0, 2), 4000, 17).unwrap();
        let rule = gauss_hermite(20).unwrap();
        let exact = rule.expect(|g| (4.0 * (beta * g / 2f64.sqrt()).cosh()).ln()) / 2.0;
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");

        let again = quenched_free_energy(&params(beta, 0.0, 0.0, 2), 4000, 17).unwrap();
        assert_eq!(est.mean.to_bits(), again.mean.to_bits());
        assert_eq!(est.stderr.to_bits(), again.stderr.to_bits());
    }

    #[test]
    fn corrected_pair_is_real_and_zero_imag_reduces() {
        let p = params(0.7, 0.5, 0.1, 3);
        let g = sk(3, 4);
        let h = build_sk_hamiltonian(&p, &g).unwrap();
        let spec = spectral_decompose(&h).unwrap();
        let zero = vec![0.0; 8];
        let (re, resid) = complex_pair_trace(&h, &zero, p.beta, spec.eigenvalues[0]);
        assert_abs_diff_eq!(-p.beta * spec.eigenvalues[0] + re.ln(), log_partition(&spec, p.beta), epsilon = 1e-10);
        assert!(resid < 1e-12);
        let imag = classical_diagonal(&sk(3, 99), 1.0 / 3f64.sqrt(), 0.0);
        let (_, resid) = complex_pair_trace(&h, &imag, p.beta, spec.eigenvalues[0]);
        assert!(resid < 1e-9);
    }

    #[test]
    fn corrected_log_partition_small_beta() {
        let p = params(1e-4, 0.5, 0.0, 2);
        let v = corrected_log_partition(&p, &sk(2, 1), 8, &RngStream::new(3)).unwrap();
        assert_abs_diff_eq!(v, 2.0 * 2f64.ln(), epsilon = 1e-6);
        assert!(corrected_log_partition(&p, &sk(2, 1), 7, &RngStream::new(3)).is_err());
    }

    #[test]
    fn corrected_matches_classical_closed_form() {
        // b = 0: the complex trace is diagonal, and E₁ of each phase is exact Gaussian.
        let p = params(0.6, 0.0, 0.2, 3);
        let g = sk(3, 21);
        let exact = classical_corrected_log_partition(&p, &g).unwrap();
        let mc = corrected_log_partition(&p, &g, 20_000, &RngStream::new(5)).unwrap();
        assert!((mc - exact).abs() < 5e-3, "{mc} vs {exact}");
    }

    #[test]
    fn superadditivity_classical_and_small_beta() {
        let gap = superadditivity_gap(2, 2, 0.5, 0.0, 0.0, 400, 0, 3).unwrap();
        assert!(gap.mean >= -3.0 * gap.stderr, "{gap:?}");
        let tiny = superadditivity_gap(2, 2, 1e-3, 0.0, 0.0, 8, 0, 3).unwrap();
        assert!(tiny.mean >= -3.0 * tiny.stderr && tiny.mean.abs() < 1e-5, "{tiny:?}");
    }

    #[test]
    fn operator_dump_roundtrip() {
        let h = build_sk_hamiltonian(&params(1.0, 0.5, 0.1, 2), &sk(2, 0)).unwrap();
        let mut buf = Vec::new();
        write_operator_dump(&mut buf, &h).unwrap();
        assert_eq!(buf.len(), 16 + 16 * 16);
        let back = read_operator_dump(buf.as_slice()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(back[(r, c)].re, h[(r, c)]);
                assert_eq!(back[(r, c)].im, 0.0);
            }
        }
        assert!(read_operator_dump(&b"NOPE"[..]).is_err());
    }
}
