//! Deterministic randomness and integration substrate.
//!
//! Every random quantity in the crate is drawn from an [`RngStream`], a value
//! identified by a root seed and a path of integer labels. Sub-streams are
//! derived by hashing the path, so a disorder loop can hand sample `j` the
//! stream `root.child(j)` and get the same numbers no matter which worker
//! evaluates it or in what order.
//!
//! Gaussian expectations use the standard-normal convention throughout:
//! `E f(z) = ∫ f(z) e^{-z²/2} / √(2π) dz`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A reproducible random stream addressed by `(seed, path)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Sub-stream with one more label appended to the path.
    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self {
            seed: self.seed,
            path,
        }
    }

    fn key(&self) -> [u8; 32] {
        // Chain the labels through splitmix so that (1, 2) and (2, 1) differ.
        let mut h = splitmix64(self.seed);
        for (depth, &label) in self.path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(label.wrapping_add((depth as u64) << 56)));
        }
        let mut key = [0u8; 32];
        let mut state = h;
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        key
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.key())
    }
}

/// `count` standard normal draws from the start of `stream`.
pub fn gaussian_samples(stream: &RngStream, count: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fill `out` with standard normal draws from an existing generator.
pub fn fill_gaussian<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Nodes and weights for expectations against the standard normal density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = NeumaierSum::default();
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * f(x));
        }
        acc.sum()
    }
}

/// Normalized probabilists' Hermite values ψ_{n}(x), ψ_{n-1}(x) with
/// ψ_k = He_k / √(k!).
fn normalized_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Gauss–Hermite rule for the standard normal weight, exact for polynomials
/// up to degree `2n - 1`.
///
/// Nodes come from the Golub–Welsch eigenproblem and are then polished by
/// Newton steps on the normalized Hermite recurrence.
pub fn gauss_hermite(n_nodes: usize) -> Result<QuadratureRule> {
    if !(2..=128).contains(&n_nodes) {
        return Err(invalid(format!(
            "Gauss-Hermite node count must be in 2..=128, got {n_nodes}"
        )));
    }
    let n = n_nodes;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    for x in nodes.iter_mut() {
        for _ in 0..8 {
            let (p, pm1) = normalized_hermite(n, *x);
            let dp = (n as f64).sqrt() * pm1;
            let step = p / dp;
            *x -= step;
            if step.abs() < 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
    }
    // Exact reflection symmetry kills odd moments to rounding.
    for i in 0..n / 2 {
        let a = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -a;
        nodes[n - 1 - i] = a;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, pm1) = normalized_hermite(n, x);
            1.0 / (n as f64 * pm1 * pm1)
        })
        .collect();
    for i in 0..n / 2 {
        let w = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > 256 {
        return Err(invalid(format!("Gauss-Legendre order {n} out of range")));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let step = pn / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    Ok((nodes, weights))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MCEstimate {
    /// `(self - other)` in units of the combined standard error of two
    /// independent estimates.
    pub fn z_score_against(&self, other: &MCEstimate) -> f64 {
        let se = (self.stderr.powi(2) + other.stderr.powi(2)).sqrt();
        (self.mean - other.mean) / se
    }

    pub fn scaled(&self, factor: f64) -> MCEstimate {
        MCEstimate {
            mean: self.mean * factor,
            stderr: self.stderr * factor.abs(),
            n: self.n,
        }
    }
}

pub fn mc_estimate(values: &[f64]) -> Result<MCEstimate> {
    let n = values.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 samples, got {n}")));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Estimator(format!("non-finite sample value {bad}")));
    }
    let mut acc = NeumaierSum::default();
    values.iter().for_each(|&v| acc.add(v));
    let mean = acc.sum() / n as f64;
    let mut sq = NeumaierSum::default();
    values.iter().for_each(|&v| sq.add((v - mean) * (v - mean)));
    let var = sq.sum() / (n - 1) as f64;
    Ok(MCEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    })
}

/// Neumaier's compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Streaming `log Σ exp(x_i)` that rescales whenever a new maximum appears.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    acc: NeumaierSum,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            acc: NeumaierSum::default(),
        }
    }
}

impl LogSumExp {
    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            let scale = (self.max - x).exp();
            let old = self.acc.sum() * scale;
            self.acc = NeumaierSum::default();
            self.acc.add(old);
            self.max = x;
        }
        self.acc.add((x - self.max).exp());
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.acc.sum().ln()
        }
    }
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut lse = LogSumExp::default();
    values.into_iter().for_each(|v| lse.add(v));
    lse.value()
}

/// Run `f` on a dedicated pool of `workers` threads (global pool if `None`).
///
/// Everything in the crate reduces parallel results in index order, so the
/// worker count never changes a number.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| invalid(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Order-preserving parallel map over `0..n`.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
