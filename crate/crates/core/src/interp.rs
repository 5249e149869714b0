//! Interpolation between the Trotter path model and independent sites in
//! hierarchical Gaussian cavity fields (SK couplings).
//!
//! One replica at `(s, t)` carries
//!
//! ```text
//! −βH = (β/M) Σ_l [ √(s/N) Σ_{i<j} (g_ij + ı√t g^k_ij) σ_{l,i}σ_{l,j}
//!                   + √(1−s) Σ_i Σ_{p=0}^{k} a_p z^p_i σ_{l,i} + c Σ_i σ_{l,i} ]
//!       + βK Σ_{l,i} σ_{l,i}σ_{l+1,i} + (β²/(2M²)) Σ_i Σ_{l,l'} y_{l,l'} σ_{l,i}σ_{l',i}
//! ```
//!
//! with `a_p = √(q_{p+1} − q_p)` for `p < k` and `a_k = ı√q_k`. Both imaginary
//! families are averaged before anything is sampled, which leaves the real
//! penalties `−(β² s t/(2M²N)) Σ_{i<j} P_ij² − (β²(1−s) q_k/(2M²)) Σ_i S_i²`
//! with `P_ij = Σ_l σ_{l,i}σ_{l,j}` and `S_i = Σ_l σ_{l,i}`. The annealed
//! couplings are drawn per replica.
//!
//! Inner levels `1..k−1` are integrated by a tensor rule over `N` dimensional
//! Gaussians (`2N` when two replicas are independent at that level); level 0
//! and `g` are sampled.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quantum::{DisorderSample, ModelParams};
use crate::rsb::{elog_zeta0, parisi_functional_sk, MixtureFunction, QuadMode, QuadratureSpec, RsbParams, SelfOverlapKernel, SingleSiteModel};
use crate::stochastics::{gauss_hermite, gauss_legendre_unit, gaussian_samples, log_sum_exp, mc_estimate, par_map_indexed, MCEstimate, RngStream};
use crate::trotter::{log_prefactor, trotter_coupling, PathConfiguration};

/// Cap on `M·N` for one replica (the path sum is exhaustive).
pub const MAX_INTERP_SPINS: usize = 18;
/// Cap on `2·M·N` for replica-pair sums.
pub const MAX_PAIR_SPINS: usize = 24;
/// Cap on the number of points of one inner quadrature level.
pub const MAX_INNER_POINTS: usize = 20_000;
pub const MAX_INTERP_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpPoint {
    s: f64,
    t: f64,
}

impl InterpPoint {
    pub fn new(s: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("interpolation point must lie in [0,1]², got ({s}, {t})")));
        }
        Ok(Self { s, t })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

/// Exponents of the two-replica recursion: `n_p = m_p/2` below the splitting
/// level `r`, `n_p = m_p` from `r` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSequence {
    r: usize,
    n: Vec<f64>,
}

impl NSequence {
    pub fn new(rsb: &RsbParams, r: usize) -> Result<Self> {
        let k = rsb.k();
        if r == 0 || r > k {
            return Err(invalid(format!("splitting level must be in 1..={k}, got {r}")));
        }
        let n = rsb.m().iter().enumerate().map(|(p, &m)| if p < r { m / 2.0 } else { m }).collect();
        Ok(Self { r, n })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> &[f64] {
        &self.n
    }

    /// `n_p − n_{p−1}` for `p = 1..k`.
    pub fn increments(&self) -> Vec<f64> {
        self.n.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Threshold `u` and strength `λ` of the tilted pair partition functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltParams {
    pub r: usize,
    pub u: f64,
    pub lambda: f64,
}

impl TiltParams {
    pub fn new(r: usize, u: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=4.0).contains(&u) {
            return Err(invalid(format!("u must lie in [0, 4], got {u}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { r, u, lambda })
    }
}

/// One draw of every Gaussian in the two-replica model.
///
/// `z[p][1]` equals `z[p][0]` for `p < r` (and always for `p = 0`); the
/// annealed couplings `g^k` are independent per replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLevels {
    r: usize,
    g: DisorderSample,
    g_annealed: [DisorderSample; 2],
    z: Vec<[Vec<f64>; 2]>,
}

impl GaussianLevels {
    pub fn sample(n: usize, k: usize, r: usize, stream: &RngStream) -> Result<Self> {
        if k == 0 || r == 0 || r > k {
            return Err(invalid(format!("need 1 <= r <= k, got r = {r}, k = {k}")));
        }
        let g = DisorderSample::gaussian(2, n, &stream.child(0))?;
        let g_annealed = [
            DisorderSample::gaussian(2, n, &stream.child(1))?,
            DisorderSample::gaussian(2, n, &stream.child(2))?,
        ];
        let z = (0..=k)
            .map(|p| {
                let first = gaussian_samples(&stream.child(16 + p as u64), n);
                let second = if p < r.max(1) {
                    first.clone()
                } else {
                    gaussian_samples(&stream.child(1024 + p as u64), n)
                };
                [first, second]
            })
            .collect();
        Ok(Self { r, g, g_annealed, z })
    }

    pub fn n_spins(&self) -> usize {
        self.g.n_spins()
    }

    pub fn k(&self) -> usize {
        self.z.len() - 1
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn g(&self) -> &DisorderSample {
        &self.g
    }

    pub fn g_annealed(&self, replica: usize) -> &DisorderSample {
        &self.g_annealed[replica]
    }

    pub fn z(&self, p: usize, replica: usize) -> &[f64] {
        &self.z[p][replica]
    }
}

/// Slice sums of one path.
struct PathStats {
    /// `S_i`.
    site: Vec<i32>,
    /// `P_ij`, `i < j`, in coupling order.
    pairs: Vec<i32>,
    /// `Σ_{l,i} σ_{l,i}σ_{l+1,i}`.
    bonds: i32,
    /// `Σ_i Σ_{l,l'} y_{l,l'} σ_{l,i}σ_{l',i}`.
    ysum: f64,
}

fn path_stats(config: &PathConfiguration, kernel: &SelfOverlapKernel) -> PathStats {
    let (m, n) = (config.m_slices(), config.n_spins());
    let at = |l: usize, i: usize| config.get(l as isize, i) as i32;
    let site: Vec<i32> = (0..n).map(|i| (0..m).map(|l| at(l, i)).sum()).collect();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((0..m).map(|l| at(l, i) * at(l, j)).sum());
        }
    }
    let bonds = if m > 1 {
        (0..m).map(|l| (0..n).map(|i| at(l, i) * at((l + 1) % m, i)).sum::<i32>()).sum()
    } else {
        0
    };
    let mut ysum = 0.0;
    for l in 0..m {
        for l2 in 0..m {
            let y = kernel.at(l, l2);
            if y != 0.0 {
                ysum += y * (0..n).map(|i| at(l, i) * at(l2, i)).sum::<i32>() as f64;
            }
        }
    }
    PathStats {
        site,
        pairs,
        bonds,
        ysum,
    }
}

/// Coefficients of the annealed single-replica weight at one point.
#[derive(Debug, Clone, Copy)]
struct Weights {
    beta: f64,
    c: f64,
    /// `βK`, absent when the slices are locked.
    bk: Option<f64>,
    m: f64,
    n: f64,
    qk: f64,
    s: f64,
    t: f64,
}

impl Weights {
    /// Everything except the `g` and real cavity-field terms.
    fn base(&self, st: &PathStats) -> f64 {
        let (beta, m, n) = (self.beta, self.m, self.n);
        let sum_s: i32 = st.site.iter().sum();
        let sum_s2: f64 = st.site.iter().map(|&v| (v * v) as f64).sum();
        let sum_p2: f64 = st.pairs.iter().map(|&v| (v * v) as f64).sum();
        let mut w = beta * self.c / m * sum_s as f64 + beta * beta / (2.0 * m * m) * st.ysum;
        if let Some(bk) = self.bk {
            w += bk * st.bonds as f64;
        }
        w -= beta * beta * self.s * self.t / (2.0 * m * m * n) * sum_p2;
        w -= beta * beta * (1.0 - self.s) * self.qk / (2.0 * m * m) * sum_s2;
        w
    }

    /// Coefficient of `Σ_{i<j} g_ij P_ij`.
    fn g_scale(&self) -> f64 {
        self.beta / self.m * (self.s / self.n).sqrt()
    }

    /// Coefficient of `Σ_i h_i S_i`.
    fn field_scale(&self) -> f64 {
        self.beta / self.m * (1.0 - self.s).sqrt()
    }
}

fn weights_for(point: &InterpPoint, rsb: &RsbParams, params: &ModelParams, m: usize) -> Result<Weights> {
    let bk = if params.b == 0.0 {
        None
    } else {
        Some(trotter_coupling(params.beta, params.b, m)?)
    };
    Ok(Weights {
        beta: params.beta,
        c: params.c,
        bk,
        m: m as f64,
        n: params.n_spins as f64,
        qk: rsb.q()[rsb.k()],
        s: point.s,
        t: point.t,
    })
}

fn amplitudes(rsb: &RsbParams) -> Vec<f64> {
    let q = rsb.q();
    (0..rsb.k()).map(|p| (q[p + 1] - q[p]).max(0.0).sqrt()).collect()
}

/// Real cavity field `h_i = Σ_{p<k} a_p z^p_i` of one replica.
fn cavity_field(levels: &GaussianLevels, replica: usize, rsb: &RsbParams) -> Vec<f64> {
    let n = levels.n_spins();
    let amps = amplitudes(rsb);
    (0..n).map(|i| amps.iter().enumerate().map(|(p, a)| a * levels.z(p, replica)[i]).sum()).collect()
}

fn check_path_shapes(
    config: &PathConfiguration,
    levels: &GaussianLevels,
    rsb: &RsbParams,
    kernel: &SelfOverlapKernel,
    params: &ModelParams,
) -> Result<()> {
    params.validate()?;
    let n = params.n_spins;
    if config.n_spins() != n || levels.n_spins() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: config.n_spins(),
        });
    }
    if config.m_slices() != kernel.m_slices() {
        return Err(Error::DimensionMismatch {
            expected: kernel.m_slices(),
            got: config.m_slices(),
        });
    }
    if levels.k() != rsb.k() {
        return Err(Error::DimensionMismatch {
            expected: rsb.k(),
            got: levels.k(),
        });
    }
    if params.b == 0.0 {
        let m = config.m_slices();
        let locked = (1..m).all(|l| (0..n).all(|i| config.get(l as isize, i) == config.get(0, i)));
        if !locked {
            return Err(invalid("at b = 0 every Trotter slice must carry the same configuration"));
        }
    }
    Ok(())
}

/// `−βH` of one replica with both imaginary families averaged out.
/// The Trotter normalization `C_{M,N}` is not included.
pub fn interp_path_energy(
    point: &InterpPoint,
    config: &PathConfiguration,
    levels: &GaussianLevels,
    replica: usize,
    rsb: &RsbParams,
    kernel: &SelfOverlapKernel,
    params: &ModelParams,
) -> Result<f64> {
    check_path_shapes(config, levels, rsb, kernel, params)?;
    let w = weights_for(point, rsb, params, config.m_slices())?;
    let st = path_stats(config, kernel);
    let h = cavity_field(levels, replica, rsb);
    let g: f64 = levels.g().values().iter().zip(&st.pairs).map(|(g, p)| g * *p as f64).sum();
    let f: f64 = h.iter().zip(&st.site).map(|(h, s)| h * *s as f64).sum();
    Ok(w.base(&st) + w.g_scale() * g + w.field_scale() * f)
}

/// `−βH` before the imaginary families are averaged, as `(re, im)`; the
/// penalties of [`interp_path_energy`] are `−½ Var(im)`.
pub fn interp_path_energy_unannealed(
    point: &InterpPoint,
    config: &PathConfiguration,
    levels: &GaussianLevels,
    replica: usize,
    rsb: &RsbParams,
    kernel: &SelfOverlapKernel,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    check_path_shapes(config, levels, rsb, kernel, params)?;
    let mut w = weights_for(point, rsb, params, config.m_slices())?;
    let st = path_stats(config, kernel);
    let (s, t) = (w.s, w.t);
    w.t = 0.0;
    w.qk = 0.0;
    let h = cavity_field(levels, replica, rsb);
    let g: f64 = levels.g().values().iter().zip(&st.pairs).map(|(g, p)| g * *p as f64).sum();
    let f: f64 = h.iter().zip(&st.site).map(|(h, s)| h * *s as f64).sum();
    let re = w.base(&st) + w.g_scale() * g + w.field_scale() * f;
    let gk: f64 = levels.g_annealed(replica).values().iter().zip(&st.pairs).map(|(g, p)| g * *p as f64).sum();
    let zk: f64 = levels.z(rsb.k(), replica).iter().zip(&st.site).map(|(z, s)| z * *s as f64).sum();
    let qk = rsb.q()[rsb.k()];
    let im = w.beta / w.m * ((s * t / w.n).sqrt() * gk + ((1.0 - s) * qk).sqrt() * zk);
    Ok((re, im))
}

/// `D_r² = (1/M) Σ_l (ρ^{1,2}_l − q_r)²`.
pub fn deviation_moment(a: &PathConfiguration, b: &PathConfiguration, q_r: f64) -> Result<f64> {
    if a.m_slices() != b.m_slices() || a.n_spins() != b.n_spins() {
        return Err(Error::DimensionMismatch {
            expected: a.m_slices() * a.n_spins(),
            got: b.m_slices() * b.n_spins(),
        });
    }
    let m = a.m_slices();
    let acc: f64 = (0..m)
        .map(|l| {
            let rho = crate::trotter::self_overlap(a, b, l, l);
            (rho - q_r).powi(2)
        })
        .sum();
    Ok(acc / m as f64)
}

/// `ψ_k(s) = E log ζ_0 − (s β²/2) Σ_l m_l (θ(q_{l+1}) − θ(q_l))`.
pub fn psi(s: f64, rsb: &RsbParams, mix: &MixtureFunction, site: &SingleSiteModel, quad: &QuadratureSpec) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("s must lie in [0, 1], got {s}")));
    }
    let (m, q) = (rsb.m(), rsb.q());
    let corr: f64 = (1..=rsb.k()).map(|l| m[l] * (mix.theta(q[l + 1]) - mix.theta(q[l]))).sum();
    Ok(elog_zeta0(rsb, mix, site, quad)? - s * site.beta * site.beta / 2.0 * corr)
}

/// Quadrature over one `dim`-dimensional standard Gaussian level.
#[derive(Debug, Clone)]
struct InnerRule {
    dim: usize,
    points: Vec<f64>,
    log_w: Vec<f64>,
}

impl InnerRule {
    fn new(quad: &QuadratureSpec, dim: usize) -> Result<Self> {
        match quad.mode {
            QuadMode::GaussHermite => {
                let rule = gauss_hermite(quad.nodes)?;
                let n = rule.len();
                let total = (n as f64).powi(dim as i32);
                if total > MAX_INNER_POINTS as f64 {
                    return Err(Error::SizeCap {
                        what: "inner quadrature points",
                        value: total.min(usize::MAX as f64) as usize,
                        cap: MAX_INNER_POINTS,
                    });
                }
                let total = total as usize;
                let mut points = Vec::with_capacity(total * dim);
                let mut log_w = Vec::with_capacity(total);
                for mut idx in 0..total {
                    let mut lw = 0.0;
                    for _ in 0..dim {
                        let j = idx % n;
                        idx /= n;
                        points.push(rule.nodes[j]);
                        lw += rule.weights[j].ln();
                    }
                    log_w.push(lw);
                }
                Ok(Self { dim, points, log_w })
            }
            QuadMode::MonteCarlo => {
                if quad.nodes < 2 || quad.nodes > MAX_INNER_POINTS {
                    return Err(invalid(format!("inner MC sample count must be in 2..={MAX_INNER_POINTS}")));
                }
                let points = gaussian_samples(&RngStream::new(quad.seed).child(0x1a7e).child(dim as u64), quad.nodes * dim);
                let log_w = vec![-(quad.nodes as f64).ln(); quad.nodes];
                Ok(Self { dim, points, log_w })
            }
        }
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }

    fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }
}

/// Every path of one replica with its `g`-free weight and slice sums.
struct ConfigTable {
    n: usize,
    m: usize,
    npairs: usize,
    bits: Vec<u64>,
    base: Vec<f64>,
    pairs: Vec<i16>,
    class: Vec<u32>,
    /// `S_i` per class.
    class_s: Vec<f64>,
    n_classes: usize,
    rho2: Vec<f64>,
    extra: Vec<f64>,
    n_extra: usize,
    weights: Weights,
    log_c: f64,
}

type ExtraObservables<'a> = Option<(usize, &'a (dyn Fn(&PathConfiguration) -> Vec<f64> + Sync))>;

impl ConfigTable {
    fn build(model: &InterpModel, point: &InterpPoint, extra: ExtraObservables<'_>) -> Result<Self> {
        let (n, m) = (model.params.n_spins, model.kernel.m_slices());
        let weights = weights_for(point, &model.rsb, &model.params, m)?;
        let locked = model.bk.is_none();
        let free_bits = if locked { n } else { m * n };
        let n_cfg = 1usize << free_bits;
        let npairs = n * n.saturating_sub(1) / 2;
        let n_extra = extra.map_or(0, |e| e.0);
        let mut t = ConfigTable {
            n,
            m,
            npairs,
            bits: Vec::with_capacity(n_cfg),
            base: Vec::with_capacity(n_cfg),
            pairs: Vec::with_capacity(n_cfg * npairs),
            class: Vec::with_capacity(n_cfg),
            class_s: Vec::new(),
            n_classes: 0,
            rho2: Vec::with_capacity(n_cfg),
            extra: Vec::with_capacity(n_cfg * n_extra),
            n_extra,
            weights,
            log_c: model.log_c,
        };
        let mut ids: HashMap<Vec<i32>, u32> = HashMap::new();
        let site_mask = (1u64 << n) - 1;
        for raw in 0..n_cfg as u64 {
            let bits = if locked {
                (0..m).fold(0u64, |acc, l| acc | (raw & site_mask) << (l * n))
            } else {
                raw
            };
            let config = PathConfiguration::from_bits(m, n, bits);
            let st = path_stats(&config, &model.kernel);
            let next = ids.len() as u32;
            let id = *ids.entry(st.site.clone()).or_insert_with(|| {
                t.class_s.extend(st.site.iter().map(|&v| v as f64));
                next
            });
            let sum_p2: f64 = st.pairs.iter().map(|&v| (v * v) as f64).sum();
            t.rho2.push(((n * m * m) as f64 + 2.0 * sum_p2) / ((m * m * n * n) as f64));
            t.base.push(weights.base(&st));
            t.pairs.extend(st.pairs.iter().map(|&v| v as i16));
            t.class.push(id);
            t.bits.push(bits);
            if let Some((len, f)) = extra {
                let v = f(&config);
                if v.len() != len {
                    return Err(Error::DimensionMismatch { expected: len, got: v.len() });
                }
                t.extra.extend(v);
            }
        }
        t.n_classes = ids.len();
        Ok(t)
    }

    fn len(&self) -> usize {
        self.base.len()
    }

    /// `base + g_scale Σ g P` per path.
    fn log_weights(&self, g: &DisorderSample) -> Vec<f64> {
        let gs = self.weights.g_scale();
        let gv = g.values();
        (0..self.len())
            .map(|c| {
                let mut acc = 0.0;
                if gs != 0.0 {
                    let p = &self.pairs[c * self.npairs..(c + 1) * self.npairs];
                    for (gij, pij) in gv.iter().zip(p) {
                        acc += gij * *pij as f64;
                    }
                }
                self.base[c] + gs * acc
            })
            .collect()
    }

    /// Observable layout: `[1, Σρ²/M², C_ij (i<j), m_i, extra…]`.
    fn n_obs(&self) -> usize {
        2 + self.npairs + self.n + self.n_extra
    }
}

/// Per-class aggregates of the weighted paths for one `g`.
struct ClassTable {
    log_a: Vec<f64>,
    obs: Vec<f64>,
}

impl ClassTable {
    fn build(ct: &ConfigTable, g: &DisorderSample) -> Self {
        let lw = ct.log_weights(g);
        let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let no = ct.n_obs();
        let mut mass = vec![0.0; ct.n_classes];
        let mut obs = vec![0.0; ct.n_classes * no];
        let inv_m = 1.0 / ct.m as f64;
        for c in 0..ct.len() {
            let e = (lw[c] - top).exp();
            let id = ct.class[c] as usize;
            mass[id] += e;
            let row = &mut obs[id * no..(id + 1) * no];
            row[1] += e * ct.rho2[c];
            for (q, p) in ct.pairs[c * ct.npairs..(c + 1) * ct.npairs].iter().enumerate() {
                row[2 + q] += e * *p as f64 * inv_m;
            }
            let off = 2 + ct.npairs + ct.n;
            for q in 0..ct.n_extra {
                row[off + q] += e * ct.extra[c * ct.n_extra + q];
            }
        }
        let mut log_a = vec![f64::NEG_INFINITY; ct.n_classes];
        for id in 0..ct.n_classes {
            let row = &mut obs[id * no..(id + 1) * no];
            if mass[id] > 0.0 {
                log_a[id] = top + mass[id].ln();
                for v in row.iter_mut() {
                    *v /= mass[id];
                }
            }
            row[0] = 1.0;
            for i in 0..ct.n {
                row[2 + ct.npairs + i] = ct.class_s[id * ct.n + i] * inv_m;
            }
        }
        Self { log_a, obs }
    }
}

/// Replica-pair sums grouped by the two classes.
struct PairTable {
    n_classes: usize,
    log_z: Vec<f64>,
    log_w: Vec<f64>,
    log_v: Vec<f64>,
}

impl PairTable {
    fn build(ct: &ConfigTable, g: &DisorderSample, q_r: f64, u: f64, lambda: f64) -> Self {
        let lw = ct.log_weights(g);
        let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lw.iter().map(|v| (v - top).exp()).collect();
        let nc = ct.n_classes;
        let (n, m) = (ct.n, ct.m);
        let mask = (1u64 << n) - 1;
        let mut z = vec![0.0; nc * nc];
        let mut w = vec![0.0; nc * nc];
        let mut v = vec![0.0; nc * nc];
        let nf = n as f64;
        for a in 0..ct.len() {
            if e[a] == 0.0 {
                continue;
            }
            let ca = ct.class[a] as usize * nc;
            for b in 0..ct.len() {
                let x = ct.bits[a] ^ ct.bits[b];
                let mut d2 = 0.0;
                for l in 0..m {
                    let diff = ((x >> (l * n)) & mask).count_ones() as f64;
                    let rho = (nf - 2.0 * diff) / nf;
                    d2 += (rho - q_r).powi(2);
                }
                d2 /= m as f64;
                let ew = e[a] * e[b];
                let key = ca + ct.class[b] as usize;
                z[key] += ew;
                if d2 >= u {
                    w[key] += ew;
                }
                v[key] += ew * (nf * lambda * (d2 - u)).exp();
            }
        }
        let to_log = |x: Vec<f64>| x.into_iter().map(|s| if s > 0.0 { 2.0 * top + s.ln() } else { f64::NEG_INFINITY }).collect();
        Self {
            n_classes: nc,
            log_z: to_log(z),
            log_w: to_log(w),
            log_v: to_log(v),
        }
    }
}

/// Bracket value `[f]_l` together with `log Z_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketValue {
    pub log_z: f64,
    pub value: f64,
}

/// What a modified bracket averages.
pub enum BracketObservable<'a> {
    One,
    /// `(1/M²) Σ_{l,l'} ρ_{l,l'}²` of one replica.
    SelfOverlapSq,
    /// `⟨σ_{l,i}⟩` for site `i` (any slice).
    Magnetization(usize),
    /// Any function of one path.
    Path(&'a (dyn Fn(&PathConfiguration) -> f64 + Sync)),
    /// `⟨(ρ^{1,2}_l − q_r)²⟩` of two replicas split at level `r`.
    PairDeviation(usize),
}

/// `log Z`, `log W`, `log V` of the pair recursion and the bracket of the
/// event probability `W/Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedSample {
    pub log_z2: f64,
    pub log_w: f64,
    pub log_v: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedPartitions {
    pub s: f64,
    pub tilt: TiltParams,
    /// `(1/N) E log W_0`; `None` when the event never fires on some sample.
    pub omega: Option<MCEstimate>,
    pub zero_event_samples: usize,
    /// `(1/N) E log V_0`.
    pub log_v: MCEstimate,
    /// `(1/N) E log Z_{2,0}`, the untilted pair value.
    pub log_z2: MCEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuerraReport {
    pub t: f64,
    /// `φ_k(1, t)`.
    pub lhs: MCEstimate,
    pub parisi: f64,
    /// `(β²/4) Σ_r (m_r − m_{r−1}) ∫ ds E[⟨(ρ^{1,2} − q_r)²⟩]^r_0`.
    pub remainder: MCEstimate,
    /// `(β²/(4M²)) ∫_t^1 dt' E Σ_{l,l'} ⟨ρ_{l,l'}²⟩`.
    pub self_overlap_term: MCEstimate,
    pub rhs: MCEstimate,
    /// Paired per-sample `lhs − rhs`.
    pub gap: MCEstimate,
    pub gap_in_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiag {
    pub t: f64,
    pub n: usize,
    pub m: usize,
    /// `(1/M²) Σ_{l,l'} E[⟨ρ²⟩ − ⟨ρ⟩²]`.
    pub intra: MCEstimate,
    /// `(1/M²) Σ_{l,l'} Var_g ⟨ρ_{l,l'}⟩`.
    pub inter: f64,
    pub total: f64,
    /// Mean thermal variance of each `ρ_{l,l'}`, row-major `M×M`.
    pub thermal: Vec<f64>,
}

/// The interpolated model at fixed `(β, b, c, N, M, m, q, y)`.
#[derive(Debug, Clone)]
pub struct InterpModel {
    params: ModelParams,
    rsb: RsbParams,
    kernel: SelfOverlapKernel,
    quad: QuadratureSpec,
    bk: Option<f64>,
    log_c: f64,
    amps: Vec<f64>,
    inner: Option<InnerRule>,
}

impl InterpModel {
    /// `M` is taken from the kernel. At `b = 0` the slices lock and only
    /// `2^N` paths are summed.
    pub fn new(params: ModelParams, rsb: RsbParams, kernel: SelfOverlapKernel, quad: QuadratureSpec) -> Result<Self> {
        params.validate()?;
        let (n, m) = (params.n_spins, kernel.m_slices());
        if rsb.k() > MAX_INTERP_DEPTH {
            return Err(Error::SizeCap {
                what: "rsb depth k",
                value: rsb.k(),
                cap: MAX_INTERP_DEPTH,
            });
        }
        if n < 2 {
            return Err(invalid("need at least 2 spins"));
        }
        let (bk, log_c, free) = if params.b == 0.0 {
            (None, 0.0, n)
        } else {
            (
                Some(trotter_coupling(params.beta, params.b, m)?),
                log_prefactor(params.beta, params.b, m, n)?,
                m * n,
            )
        };
        if free > MAX_INTERP_SPINS {
            return Err(Error::SizeCap {
                what: "m_slices * n_spins",
                value: free,
                cap: MAX_INTERP_SPINS,
            });
        }
        let inner = if rsb.k() >= 2 { Some(InnerRule::new(&quad, n)?) } else { None };
        Ok(Self {
            amps: amplitudes(&rsb),
            params,
            rsb,
            kernel,
            quad,
            bk,
            log_c,
            inner,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn rsb(&self) -> &RsbParams {
        &self.rsb
    }

    pub fn kernel(&self) -> &SelfOverlapKernel {
        &self.kernel
    }

    pub fn quad(&self) -> &QuadratureSpec {
        &self.quad
    }

    pub fn m_slices(&self) -> usize {
        self.kernel.m_slices()
    }

    fn k(&self) -> usize {
        self.rsb.k()
    }

    fn draw(&self, root: &RngStream, j: usize, r: usize) -> Result<GaussianLevels> {
        GaussianLevels::sample(self.params.n_spins, self.k(), r, &root.child(j as u64))
    }

    fn level_field(&self, levels: &GaussianLevels, upto: usize) -> Vec<f64> {
        let n = self.params.n_spins;
        (0..n)
            .map(|i| (0..=upto.min(self.k() - 1)).map(|p| self.amps[p] * levels.z(p, 0)[i]).sum())
            .collect()
    }

    /// Level `k−1` from the class table at real field `h`.
    fn base_eval(&self, ct: &ConfigTable, cls: &ClassTable, h: &[f64]) -> (f64, Vec<f64>) {
        let fs = ct.weights.field_scale();
        let n = ct.n;
        let terms: Vec<f64> = (0..ct.n_classes)
            .map(|id| {
                let s = &ct.class_s[id * n..(id + 1) * n];
                cls.log_a[id] + fs * s.iter().zip(h).map(|(s, h)| s * h).sum::<f64>()
            })
            .collect();
        let lse = log_sum_exp(terms.iter().cloned());
        let no = ct.n_obs();
        let mut obs = vec![0.0; no];
        for (id, t) in terms.iter().enumerate() {
            let p = (t - lse).exp();
            if p == 0.0 {
                continue;
            }
            for (o, v) in obs.iter_mut().zip(&cls.obs[id * no..(id + 1) * no]) {
                *o += p * v;
            }
        }
        obs[0] = 1.0;
        (ct.log_c + lse, obs)
    }

    /// `(log Z_l, [obs]_l)` at the cavity field accumulated through level `l`.
    /// `collapse = (r, q_r)` replaces the observables by the two-replica
    /// deviation once level `r − 1` is reached.
    fn eval(&self, ct: &ConfigTable, cls: &ClassTable, l: usize, h: &[f64], collapse: Option<(usize, f64)>) -> Result<(f64, Vec<f64>)> {
        let k = self.k();
        let (lz, obs) = if l + 1 == k || ct.weights.field_scale() == 0.0 {
            self.base_eval(ct, cls, h)
        } else {
            self.integrate_level(ct, cls, l + 1, h, collapse)?
        };
        let obs = match collapse {
            Some((r, q)) if l + 1 == r => vec![1.0, pair_deviation(ct, &obs, q)],
            _ => obs,
        };
        Ok((lz, obs))
    }

    fn integrate_level(&self, ct: &ConfigTable, cls: &ClassTable, level: usize, h: &[f64], collapse: Option<(usize, f64)>) -> Result<(f64, Vec<f64>)> {
        let a = self.amps[level];
        if a == 0.0 {
            return self.eval(ct, cls, level, h, collapse);
        }
        let rule = self.inner.as_ref().expect("inner rule exists for k >= 2");
        let ml = self.rsb.m()[level];
        let mut vals = Vec::with_capacity(rule.len());
        for j in 0..rule.len() {
            let hz: Vec<f64> = h.iter().zip(rule.point(j)).map(|(h, z)| h + a * z).collect();
            let (lz, obs) = self.eval(ct, cls, level, &hz, collapse)?;
            vals.push((rule.log_w[j] + ml * lz, obs));
        }
        let lse = log_sum_exp(vals.iter().map(|v| v.0));
        if !lse.is_finite() {
            return Err(Error::Estimator(format!("vanishing bracket denominator at level {level}")));
        }
        let mut obs = vec![0.0; vals[0].1.len()];
        for (t, o) in &vals {
            let p = (t - lse).exp();
            for (acc, v) in obs.iter_mut().zip(o) {
                *acc += p * v;
            }
        }
        Ok((lse / ml, obs))
    }

    fn shared_table(&self, ct: &ConfigTable) -> Option<ClassTable> {
        if ct.weights.g_scale() == 0.0 {
            Some(ClassTable::build(ct, &DisorderSample::zeros(2, self.params.n_spins).ok()?))
        } else {
            None
        }
    }

    /// `(1/N) log Z_{M,N,0}(s,t)` per disorder sample.
    pub fn phi_samples(&self, point: &InterpPoint, n_disorder: usize, seed: u64) -> Result<Vec<f64>> {
        let ct = ConfigTable::build(self, point, None)?;
        let shared = self.shared_table(&ct);
        let root = RngStream::new(seed);
        let n = self.params.n_spins as f64;
        let out = par_map_indexed(n_disorder, |j| -> Result<f64> {
            let levels = self.draw(&root, j, self.k())?;
            let own;
            let cls = match &shared {
                Some(c) => c,
                None => {
                    own = ClassTable::build(&ct, levels.g());
                    &own
                }
            };
            let (lz, _) = self.eval(&ct, cls, 0, &self.level_field(&levels, 0), None)?;
            if !lz.is_finite() {
                return Err(Error::Estimator(format!("non-finite log Z at disorder sample {j} (seed {seed})")));
            }
            Ok(lz / n)
        });
        out.into_iter().collect()
    }

    /// `φ_k(s,t) = (1/N) E log Z_{M,N,0}(s,t)`.
    pub fn phi_estimate(&self, point: &InterpPoint, n_disorder: usize, seed: u64) -> Result<MCEstimate> {
        mc_estimate(&self.phi_samples(point, n_disorder, seed)?)
    }

    fn table_for(&self, point: &InterpPoint, obs: &BracketObservable<'_>) -> Result<ConfigTable> {
        match obs {
            BracketObservable::Path(f) => {
                let wrap = |c: &PathConfiguration| vec![f(c)];
                ConfigTable::build(self, point, Some((1, &wrap)))
            }
            _ => ConfigTable::build(self, point, None),
        }
    }

    fn observable_index(&self, ct: &ConfigTable, obs: &BracketObservable<'_>) -> Result<usize> {
        Ok(match obs {
            BracketObservable::One | BracketObservable::PairDeviation(_) => 0,
            BracketObservable::SelfOverlapSq => 1,
            BracketObservable::Magnetization(i) => {
                if *i >= ct.n {
                    return Err(invalid(format!("site {i} out of range")));
                }
                2 + ct.npairs + i
            }
            BracketObservable::Path(_) => 2 + ct.npairs + ct.n,
        })
    }

    fn bracket_with(
        &self,
        ct: &ConfigTable,
        cls: &ClassTable,
        levels: &GaussianLevels,
        level: usize,
        obs: &BracketObservable<'_>,
    ) -> Result<BracketValue> {
        let k = self.k();
        if level >= k {
            return Err(invalid(format!("bracket level must be below k = {k}")));
        }
        let collapse = match obs {
            BracketObservable::PairDeviation(r) => {
                if *r == 0 || *r > k {
                    return Err(invalid(format!("splitting level must be in 1..={k}")));
                }
                if level >= *r {
                    return Err(invalid("pair brackets at or above the splitting level factor into single-replica brackets"));
                }
                Some((*r, self.rsb.q()[*r]))
            }
            _ => None,
        };
        let (lz, v) = self.eval(ct, cls, level, &self.level_field(levels, level), collapse)?;
        let value = if collapse.is_some() { v[1] } else { v[self.observable_index(ct, obs)?] };
        Ok(BracketValue { log_z: lz, value })
    }

    /// `[f]_level` for the draw `levels` (only `g` and `z^0..z^level` of
    /// replica 0 are read).
    pub fn modified_bracket(&self, point: &InterpPoint, levels: &GaussianLevels, level: usize, obs: &BracketObservable<'_>) -> Result<BracketValue> {
        let ct = self.table_for(point, obs)?;
        let cls = ClassTable::build(&ct, levels.g());
        self.bracket_with(&ct, &cls, levels, level, obs)
    }

    /// Per-sample `[f]_0`.
    pub fn bracket_samples(&self, point: &InterpPoint, obs: &BracketObservable<'_>, n_disorder: usize, seed: u64) -> Result<Vec<f64>> {
        let ct = self.table_for(point, obs)?;
        let shared = self.shared_table(&ct);
        let root = RngStream::new(seed);
        let out = par_map_indexed(n_disorder, |j| -> Result<f64> {
            let levels = self.draw(&root, j, self.k())?;
            let own;
            let cls = match &shared {
                Some(c) => c,
                None => {
                    own = ClassTable::build(&ct, levels.g());
                    &own
                }
            };
            Ok(self.bracket_with(&ct, cls, &levels, 0, obs)?.value)
        });
        out.into_iter().collect()
    }

    /// `E[f]_0`.
    pub fn bracket_estimate(&self, point: &InterpPoint, obs: &BracketObservable<'_>, n_disorder: usize, seed: u64) -> Result<MCEstimate> {
        mc_estimate(&self.bracket_samples(point, obs, n_disorder, seed)?)
    }

    /// The variational value with the same inner rule.
    pub fn parisi_value(&self) -> Result<f64> {
        let site = SingleSiteModel::new(self.params.beta, self.params.b, self.params.c, self.kernel.clone())?;
        let quad = match self.quad.mode {
            QuadMode::GaussHermite => self.quad,
            QuadMode::MonteCarlo => QuadratureSpec::gauss_hermite(40),
        };
        parisi_functional_sk(&self.rsb, &site, &quad)
    }

    /// Both sides of the interpolation identity
    /// `φ_k(1,t) = P_k + tβ²/(4N) − R + (β²/(4M²)) ∫_t^1 dt' E Σ⟨ρ²⟩`
    /// with `R = (β²/4) Σ_r (m_r − m_{r−1}) ∫_0^1 ds E[⟨(ρ^{1,2} − q_r)²⟩]^r_0`.
    /// Integrals use `gl_nodes`-point Gauss–Legendre; every term is evaluated
    /// on the same disorder draws and the gap is their paired difference.
    pub fn guerra_identity_residual(&self, t: f64, n_disorder: usize, seed: u64, gl_nodes: usize) -> Result<GuerraReport> {
        let lhs_point = InterpPoint::new(1.0, t)?;
        let (beta, n) = (self.params.beta, self.params.n_spins as f64);
        let k = self.k();
        let (nodes, weights) = gauss_legendre_unit(gl_nodes)?;
        let lhs = self.phi_samples(&lhs_point, n_disorder, seed)?;

        let mut remainder = vec![0.0; n_disorder];
        for (x, w) in nodes.iter().zip(&weights) {
            let point = InterpPoint::new(*x, 1.0)?;
            for r in 1..=k {
                let coef = self.rsb.m()[r] - self.rsb.m()[r - 1];
                if coef == 0.0 {
                    continue;
                }
                let vals = self.bracket_samples(&point, &BracketObservable::PairDeviation(r), n_disorder, seed)?;
                for (acc, v) in remainder.iter_mut().zip(vals) {
                    *acc += beta * beta / 4.0 * coef * w * v;
                }
            }
        }

        let mut self_term = vec![0.0; n_disorder];
        if t < 1.0 {
            for (x, w) in nodes.iter().zip(&weights) {
                let point = InterpPoint::new(t + (1.0 - t) * x, 1.0)?;
                let vals = self.bracket_samples(&point, &BracketObservable::SelfOverlapSq, n_disorder, seed)?;
                // Σ_{l,l'} ⟨ρ²⟩ / M² is the observable itself.
                for (acc, v) in self_term.iter_mut().zip(vals) {
                    *acc += beta * beta / 4.0 * (1.0 - t) * w * v;
                }
            }
        }

        let parisi = self.parisi_value()?;
        let shift = parisi + t * beta * beta / (4.0 * n);
        let rhs: Vec<f64> = remainder.iter().zip(&self_term).map(|(r, s)| shift - r + s).collect();
        let gap: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let gap_est = mc_estimate(&gap)?;
        let gap_in_stderr = if gap_est.stderr > 0.0 {
            gap_est.mean / gap_est.stderr
        } else if gap_est.mean.abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY.copysign(gap_est.mean)
        };
        Ok(GuerraReport {
            t,
            lhs: mc_estimate(&lhs)?,
            parisi,
            remainder: mc_estimate(&remainder)?,
            self_overlap_term: mc_estimate(&self_term)?,
            rhs: mc_estimate(&rhs)?,
            gap: gap_est,
            gap_in_stderr,
        })
    }

    fn pair_table(&self, ct: &ConfigTable, g: &DisorderSample, r: usize, u: f64, lambda: f64) -> PairTable {
        PairTable::build(ct, g, self.rsb.q()[r], u, lambda)
    }

    fn pair_base(&self, ct: &ConfigTable, pt: &PairTable, h1: &[f64], h2: &[f64]) -> TiltedSample {
        let fs = ct.weights.field_scale();
        let n = ct.n;
        let nc = pt.n_classes;
        let proj = |h: &[f64]| -> Vec<f64> {
            (0..nc)
                .map(|id| fs * ct.class_s[id * n..(id + 1) * n].iter().zip(h).map(|(s, h)| s * h).sum::<f64>())
                .collect()
        };
        let (u1, u2) = (proj(h1), proj(h2));
        let lse = |tab: &[f64]| log_sum_exp((0..nc * nc).map(|key| tab[key] + u1[key / nc] + u2[key % nc]));
        let log_z2 = 2.0 * ct.log_c + lse(&pt.log_z);
        let log_w = 2.0 * ct.log_c + lse(&pt.log_w);
        let log_v = 2.0 * ct.log_c + lse(&pt.log_v);
        TiltedSample {
            log_z2,
            log_w,
            log_v,
            probability: (log_w - log_z2).exp(),
        }
    }

    fn pair_eval(&self, ct: &ConfigTable, pt: &PairTable, l: usize, h1: &[f64], h2: &[f64], nseq: &NSequence) -> Result<TiltedSample> {
        let k = self.k();
        if l + 1 == k || ct.weights.field_scale() == 0.0 {
            return Ok(self.pair_base(ct, pt, h1, h2));
        }
        let level = l + 1;
        let a = self.amps[level];
        if a == 0.0 {
            return self.pair_eval(ct, pt, level, h1, h2, nseq);
        }
        let rule = self.inner.as_ref().expect("inner rule exists for k >= 2");
        let nl = nseq.n()[level];
        let shift = |h: &[f64], z: &[f64]| -> Vec<f64> { h.iter().zip(z).map(|(h, z)| h + a * z).collect() };
        let mut vals: Vec<(f64, TiltedSample)> = Vec::new();
        if level < nseq.r() {
            for j in 0..rule.len() {
                let s = self.pair_eval(ct, pt, level, &shift(h1, rule.point(j)), &shift(h2, rule.point(j)), nseq)?;
                vals.push((rule.log_w[j], s));
            }
        } else {
            for j1 in 0..rule.len() {
                let h1z = shift(h1, rule.point(j1));
                for j2 in 0..rule.len() {
                    let s = self.pair_eval(ct, pt, level, &h1z, &shift(h2, rule.point(j2)), nseq)?;
                    vals.push((rule.log_w[j1] + rule.log_w[j2], s));
                }
            }
        }
        let power = |f: &dyn Fn(&TiltedSample) -> f64| log_sum_exp(vals.iter().map(|(lw, s)| lw + nl * f(s))) / nl;
        let log_z2 = power(&|s| s.log_z2);
        if !log_z2.is_finite() {
            return Err(Error::Estimator(format!("vanishing pair denominator at level {level}")));
        }
        let denom = nl * log_z2;
        let probability = vals.iter().map(|(lw, s)| (lw + nl * s.log_z2 - denom).exp() * s.probability).sum();
        Ok(TiltedSample {
            log_z2,
            log_w: power(&|s| s.log_w),
            log_v: power(&|s| s.log_v),
            probability,
        })
    }

    fn pair_check(&self) -> Result<()> {
        let free = if self.bk.is_none() { self.params.n_spins } else { self.params.n_spins * self.m_slices() };
        if 2 * free > MAX_PAIR_SPINS {
            return Err(Error::SizeCap {
                what: "2 * m_slices * n_spins",
                value: 2 * free,
                cap: MAX_PAIR_SPINS,
            });
        }
        Ok(())
    }

    fn tilted_samples_raw(&self, s: f64, r: usize, u: f64, lambda: f64, n_disorder: usize, seed: u64) -> Result<Vec<TiltedSample>> {
        self.pair_check()?;
        let nseq = NSequence::new(&self.rsb, r)?;
        let point = InterpPoint::new(s, 1.0)?;
        let ct = ConfigTable::build(self, &point, None)?;
        let shared = if ct.weights.g_scale() == 0.0 {
            Some(self.pair_table(&ct, &DisorderSample::zeros(2, self.params.n_spins)?, r, u, lambda))
        } else {
            None
        };
        let root = RngStream::new(seed);
        let out = par_map_indexed(n_disorder, |j| -> Result<TiltedSample> {
            let levels = self.draw(&root, j, r)?;
            let own;
            let pt = match &shared {
                Some(p) => p,
                None => {
                    own = self.pair_table(&ct, levels.g(), r, u, lambda);
                    &own
                }
            };
            let h = self.level_field(&levels, 0);
            self.pair_eval(&ct, pt, 0, &h, &h, &nseq)
        });
        out.into_iter().collect()
    }

    /// Level-0 pair quantities for each disorder draw.
    pub fn tilted_samples(&self, s: f64, tilt: &TiltParams, n_disorder: usize, seed: u64) -> Result<Vec<TiltedSample>> {
        self.tilted_samples_raw(s, tilt.r, tilt.u, tilt.lambda, n_disorder, seed)
    }

    /// `(1/N) E log W_0` and `(1/N) E log V_0` of the tilted pair partitions.
    pub fn tilted_partitions(&self, s: f64, tilt: &TiltParams, n_disorder: usize, seed: u64) -> Result<TiltedPartitions> {
        let samples = self.tilted_samples(s, tilt, n_disorder, seed)?;
        let n = self.params.n_spins as f64;
        let zero = samples.iter().filter(|x| x.log_w == f64::NEG_INFINITY).count();
        let omega = if zero == 0 {
            Some(mc_estimate(&samples.iter().map(|x| x.log_w / n).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(TiltedPartitions {
            s,
            tilt: *tilt,
            omega,
            zero_event_samples: zero,
            log_v: mc_estimate(&samples.iter().map(|x| x.log_v / n).collect::<Vec<_>>())?,
            log_z2: mc_estimate(&samples.iter().map(|x| x.log_z2 / n).collect::<Vec<_>>())?,
        })
    }

    /// `E[⟨I(D_r² ≥ u)⟩^r_{s,1}]_0`. Any `u ≥ 0` is accepted.
    pub fn concentration_probability(&self, s: f64, u: f64, r: usize, n_disorder: usize, seed: u64) -> Result<MCEstimate> {
        if !(u >= 0.0) {
            return Err(invalid(format!("u must be >= 0, got {u}")));
        }
        let samples = self.tilted_samples_raw(s, r, u, 0.0, n_disorder, seed)?;
        mc_estimate(&samples.iter().map(|x| x.probability).collect::<Vec<_>>())
    }

    /// Thermal and disorder variance of the self-overlap at `(1, t)`.
    pub fn selfoverlap_variance_diag(&self, t: f64, n_disorder: usize, seed: u64) -> Result<VarianceDiag> {
        let point = InterpPoint::new(1.0, t)?;
        let m = self.m_slices();
        let mm = m * m;
        let entries = |c: &PathConfiguration| -> Vec<f64> {
            let rho = c.overlap_matrix();
            let mut out = Vec::with_capacity(2 * mm);
            out.extend(rho.iter().copied());
            out.extend(rho.iter().map(|v| v * v));
            out
        };
        let ct = ConfigTable::build(self, &point, Some((2 * mm, &entries)))?;
        let root = RngStream::new(seed);
        let off = 2 + ct.npairs + ct.n;
        let per: Vec<Vec<f64>> = par_map_indexed(n_disorder, |j| -> Result<Vec<f64>> {
            let levels = self.draw(&root, j, self.k())?;
            let cls = ClassTable::build(&ct, levels.g());
            let (_, obs) = self.base_eval(&ct, &cls, &vec![0.0; ct.n]);
            Ok(obs[off..off + 2 * mm].to_vec())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let thermal_per: Vec<f64> = per
            .iter()
            .map(|o| (0..mm).map(|e| o[mm + e] - o[e] * o[e]).sum::<f64>() / mm as f64)
            .collect();
        let intra = mc_estimate(&thermal_per)?;
        let thermal: Vec<f64> = (0..mm)
            .map(|e| per.iter().map(|o| o[mm + e] - o[e] * o[e]).sum::<f64>() / per.len() as f64)
            .collect();
        let nd = per.len() as f64;
        let inter = (0..mm)
            .map(|e| {
                let mean = per.iter().map(|o| o[e]).sum::<f64>() / nd;
                per.iter().map(|o| (o[e] - mean).powi(2)).sum::<f64>() / (nd - 1.0)
            })
            .sum::<f64>()
            / mm as f64;
        Ok(VarianceDiag {
            t,
            n: self.params.n_spins,
            m,
            intra,
            inter,
            total: intra.mean + inter,
            thermal,
        })
    }
}

/// `(1/N²) Σ_ij C¹_ij C²_ij − 2 q (1/N) Σ_i m¹_i m²_i + q²` with both
/// replicas carrying the same level bracket.
fn pair_deviation(ct: &ConfigTable, obs: &[f64], q: f64) -> f64 {
    let n = ct.n as f64;
    let c2: f64 = obs[2..2 + ct.npairs].iter().map(|c| c * c).sum();
    let m2: f64 = obs[2 + ct.npairs..2 + ct.npairs + ct.n].iter().map(|m| m * m).sum();
    (n + 2.0 * c2) / (n * n) - 2.0 * q * m2 / n + q * q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub probability: MCEstimate,
    /// The event never fired on any sample.
    pub zero_event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationScan {
    pub u: f64,
    pub r: usize,
    pub s: f64,
    pub rows: Vec<ConcentrationRow>,
    /// Least-squares slope of `log P` against `N` over nonzero rows.
    pub slope: Option<f64>,
}

/// Event probability `E[⟨I(D_r² ≥ u)⟩]` across system sizes.
#[allow(clippy::too_many_arguments)]
pub fn concentration_scan(
    beta: f64,
    b: f64,
    c: f64,
    rsb: &RsbParams,
    kernel: &SelfOverlapKernel,
    quad: &QuadratureSpec,
    u: f64,
    r: usize,
    s: f64,
    sizes: &[usize],
    n_disorder: usize,
    seed: u64,
) -> Result<ConcentrationScan> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let params = ModelParams::new(beta, b, c, n)?;
        let model = InterpModel::new(params, rsb.clone(), kernel.clone(), *quad)?;
        let probability = model.concentration_probability(s, u, r, n_disorder, seed)?;
        rows.push(ConcentrationRow {
            n,
            zero_event: probability.mean == 0.0,
            probability,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.probability.mean > 0.0)
        .map(|r| (r.n as f64, r.probability.mean.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    } else {
        None
    };
    Ok(ConcentrationScan { u, r, s, rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trotter::{effective_path_energy, enumerate_log_partition, TrotterConfig};

    fn model(beta: f64, b: f64, c: f64, n: usize, rsb: RsbParams, kernel: SelfOverlapKernel, nodes: usize) -> InterpModel {
        InterpModel::new(ModelParams::new(beta, b, c, n).unwrap(), rsb, kernel, QuadratureSpec::gauss_hermite(nodes)).unwrap()
    }

    fn rsb2() -> RsbParams {
        RsbParams::new(vec![0.0, 0.4, 1.0], vec![0.0, 0.3, 0.7]).unwrap()
    }

    fn kernel3() -> SelfOverlapKernel {
        SelfOverlapKernel::new(vec![0.3, 0.1, 0.1]).unwrap()
    }

    #[test]
    fn endpoint_energies_match_trotter_path() {
        let params = ModelParams::new(1.3, 0.8, 0.2, 3).unwrap();
        let kernel = kernel3();
        let rsb = rsb2();
        let levels = GaussianLevels::sample(3, 2, 1, &RngStream::new(4)).unwrap();
        let trotter = TrotterConfig::new(&params, 3).unwrap();
        for bits in [0u64, 5, 77, 300, 511] {
            let cfg = PathConfiguration::from_bits(3, 3, bits);
            let e0 = interp_path_energy(&InterpPoint::new(1.0, 0.0).unwrap(), &cfg, &levels, 0, &rsb, &kernel, &params).unwrap();
            let want0 = -params.beta * effective_path_energy(&cfg, levels.g(), &params, &trotter, 0.0, &kernel).unwrap();
            assert!((e0 - want0).abs() < 1e-12);
            let e1 = interp_path_energy(&InterpPoint::new(1.0, 1.0).unwrap(), &cfg, &levels, 0, &rsb, &kernel, &params).unwrap();
            let want1 = -params.beta * effective_path_energy(&cfg, levels.g(), &params, &trotter, 1.0, &kernel).unwrap() + params.beta.powi(2) / 4.0;
            assert!((e1 - want1).abs() < 1e-12, "{e1} vs {want1}");
        }
    }

    #[test]
    fn averaging_imaginary_parts() {
        let params = ModelParams::new(1.1, 0.5, 0.0, 3).unwrap();
        let (rsb, kernel) = (rsb2(), kernel3());
        let point = InterpPoint::new(0.6, 0.7).unwrap();
        let cfg = PathConfiguration::from_bits(3, 3, 0b101_110_011);
        let root = RngStream::new(21);
        let n = 20_000;
        let mut cos = Vec::with_capacity(n);
        let mut shift = 0.0;
        for j in 0..n {
            let levels = GaussianLevels::sample(3, 2, 2, &root.child(j as u64)).unwrap();
            let (re, im) = interp_path_energy_unannealed(&point, &cfg, &levels, 1, &rsb, &kernel, &params).unwrap();
            let ann = interp_path_energy(&point, &cfg, &levels, 1, &rsb, &kernel, &params).unwrap();
            shift = ann - re;
            cos.push(im.cos());
        }
        let est = mc_estimate(&cos).unwrap();
        assert!(shift < 0.0);
        assert!((est.mean - shift.exp()).abs() < 4.0 * est.stderr, "{est:?} vs {}", shift.exp());
    }

    #[test]
    fn locked_slices_at_zero_field() {
        let params = ModelParams::new(1.0, 0.0, 0.0, 2).unwrap();
        let levels = GaussianLevels::sample(2, 1, 1, &RngStream::new(1)).unwrap();
        let rsb = RsbParams::replica_symmetric(0.2).unwrap();
        let p = InterpPoint::new(0.5, 0.5).unwrap();
        let bad = PathConfiguration::from_bits(2, 2, 0b0001);
        assert!(interp_path_energy(&p, &bad, &levels, 0, &rsb, &SelfOverlapKernel::zeros(2), &params).is_err());
        let ok = PathConfiguration::from_bits(2, 2, 0b0101);
        assert!(interp_path_energy(&p, &ok, &levels, 0, &rsb, &SelfOverlapKernel::zeros(2), &params).is_ok());
    }

    #[test]
    fn phi_at_one_zero_is_the_trotter_free_energy() {
        let m = model(1.4, 0.9, 0.1, 3, rsb2(), SelfOverlapKernel::zeros(3), 6);
        let seed = 8;
        let got = m.phi_samples(&InterpPoint::new(1.0, 0.0).unwrap(), 5, seed).unwrap();
        for (j, v) in got.iter().enumerate() {
            let levels = GaussianLevels::sample(3, 2, 2, &RngStream::new(seed).child(j as u64)).unwrap();
            let want = enumerate_log_partition(m.params(), levels.g(), 3).unwrap() / 3.0;
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn phi_at_zero_factorizes_over_sites() {
        let rsb = RsbParams::replica_symmetric(0.45).unwrap();
        let kernel = kernel3();
        let m = model(1.2, 0.7, 0.3, 3, rsb.clone(), kernel.clone(), 20);
        let site = SingleSiteModel::new(1.2, 0.7, 0.3, kernel).unwrap();
        let seed = 3;
        let got = m.phi_samples(&InterpPoint::new(0.0, 0.4).unwrap(), 6, seed).unwrap();
        let a0 = 0.45f64.sqrt();
        for (j, v) in got.iter().enumerate() {
            let levels = GaussianLevels::sample(3, 1, 1, &RngStream::new(seed).child(j as u64)).unwrap();
            let want: f64 = levels.z(0, 0).iter().map(|z| site.log_zeta(0.3 + a0 * z, 0.45)).sum::<f64>() / 3.0;
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }

        // Depth two against the nested single-site recursion.
        let rsb = rsb2();
        let m = model(1.2, 0.7, 0.3, 2, rsb.clone(), kernel3(), 12);
        let site = SingleSiteModel::new(1.2, 0.7, 0.3, kernel3()).unwrap();
        let est = m.phi_estimate(&InterpPoint::new(0.0, 1.0).unwrap(), 3000, 5).unwrap();
        let want = elog_zeta0(&rsb, &MixtureFunction::sk(), &site, &QuadratureSpec::gauss_hermite(40)).unwrap();
        assert!((est.mean - want).abs() < 3.0 * est.stderr, "{est:?} vs {want}");
    }

    #[test]
    fn high_temperature_limit() {
        let m = model(1e-4, 1.0, 0.0, 3, rsb2(), SelfOverlapKernel::zeros(3), 6);
        let est = m.phi_estimate(&InterpPoint::new(0.5, 0.5).unwrap(), 4, 2).unwrap();
        assert!((est.mean - 2f64.ln()).abs() < 1e-3, "{est:?}");
    }

    #[test]
    fn brackets_of_constants_and_linearity() {
        let m = model(1.3, 0.6, 0.1, 2, rsb2(), SelfOverlapKernel::zeros(2), 8);
        let levels = GaussianLevels::sample(2, 2, 2, &RngStream::new(6)).unwrap();
        let p = InterpPoint::new(0.4, 0.8).unwrap();
        for level in 0..2 {
            let one = m.modified_bracket(&p, &levels, level, &BracketObservable::One).unwrap();
            assert!((one.value - 1.0).abs() < 1e-14);
        }
        let f = |c: &PathConfiguration| c.get(0, 0) * c.get(1, 1);
        let g = |c: &PathConfiguration| c.get(1, 0) + 0.5;
        let h = |c: &PathConfiguration| 2.0 * f(c) - 3.0 * g(c);
        let b = |o: &(dyn Fn(&PathConfiguration) -> f64 + Sync)| m.modified_bracket(&p, &levels, 0, &BracketObservable::Path(o)).unwrap().value;
        assert!((b(&h) - (2.0 * b(&f) - 3.0 * b(&g))).abs() < 1e-12);
        assert!(m.modified_bracket(&p, &levels, 1, &BracketObservable::PairDeviation(1)).is_err());
        assert!(m.modified_bracket(&p, &levels, 2, &BracketObservable::One).is_err());
    }

    /// Gibbs weights `e^{−βH}` of every path at a fixed real field.
    fn brute_weights(m: &InterpModel, p: &InterpPoint, levels: &GaussianLevels) -> Vec<(PathConfiguration, f64)> {
        let (n, ms) = (m.params().n_spins, m.m_slices());
        (0..1u64 << (n * ms))
            .map(|bits| {
                let cfg = PathConfiguration::from_bits(ms, n, bits);
                let w = interp_path_energy(p, &cfg, levels, 0, m.rsb(), m.kernel(), m.params()).unwrap();
                (cfg, w)
            })
            .collect()
    }

    #[test]
    fn depth_one_bracket_is_a_gibbs_average() {
        let rsb = RsbParams::replica_symmetric(0.35).unwrap();
        let m = model(1.5, 0.7, 0.2, 2, rsb, SelfOverlapKernel::new(vec![0.2, 0.05]).unwrap(), 8);
        let p = InterpPoint::new(0.3, 0.6).unwrap();
        let levels = GaussianLevels::sample(2, 1, 1, &RngStream::new(9)).unwrap();
        let f = |c: &PathConfiguration| c.get(0, 0) + 2.0 * c.get(0, 1) * c.get(1, 1);
        let w = brute_weights(&m, &p, &levels);
        let lz = log_sum_exp(w.iter().map(|x| x.1));
        let want: f64 = w.iter().map(|(c, v)| (v - lz).exp() * f(c)).sum();
        let got = m.modified_bracket(&p, &levels, 0, &BracketObservable::Path(&f)).unwrap();
        assert!((got.value - want).abs() < 1e-12);
        assert!((got.log_z - (lz + m.log_c)).abs() < 1e-12);
    }

    #[test]
    fn depth_two_brackets_against_nested_sums() {
        let rsb = rsb2();
        let nodes = 6;
        let m = model(1.5, 0.7, 0.0, 2, rsb.clone(), SelfOverlapKernel::zeros(2), nodes);
        let p = InterpPoint::new(0.5, 1.0).unwrap();
        let levels = GaussianLevels::sample(2, 2, 2, &RngStream::new(13)).unwrap();
        let rule = gauss_hermite(nodes).unwrap();
        let (q2, m1) = (0.7, 0.4);
        let f = |c: &PathConfiguration| c.get(0, 0) * c.get(0, 1);
        // Level 1 is integrated by hand, shifting z^1 of the drawn levels.
        let mut num_f = 0.0;
        let mut num_d = 0.0;
        let mut den = 0.0;
        for (x1, w1) in rule.nodes.iter().zip(&rule.weights) {
            for (x2, w2) in rule.nodes.iter().zip(&rule.weights) {
                let mut lv = levels.clone();
                lv.z[1][0] = vec![*x1, *x2];
                let ws = brute_weights(&m, &p, &lv);
                let lz = log_sum_exp(ws.iter().map(|x| x.1));
                let gibbs: Vec<f64> = ws.iter().map(|(_, v)| (v - lz).exp()).collect();
                let avg_f: f64 = ws.iter().zip(&gibbs).map(|((c, _), g)| g * f(c)).sum();
                let mut avg_d = 0.0;
                for (a, ga) in ws.iter().zip(&gibbs) {
                    for (b, gb) in ws.iter().zip(&gibbs) {
                        avg_d += ga * gb * deviation_moment(&a.0, &b.0, q2).unwrap();
                    }
                }
                let weight = w1 * w2 * (m1 * lz).exp();
                den += weight;
                num_f += weight * avg_f;
                num_d += weight * avg_d;
            }
        }
        let got_f = m.modified_bracket(&p, &levels, 0, &BracketObservable::Path(&f)).unwrap();
        assert!((got_f.value - num_f / den).abs() < 1e-12);
        assert!((got_f.log_z - (den.ln() / m1 + m.log_c)).abs() < 1e-12);
        let got_d = m.modified_bracket(&p, &levels, 0, &BracketObservable::PairDeviation(2)).unwrap();
        assert!((got_d.value - num_d / den).abs() < 1e-12, "{} vs {}", got_d.value, num_d / den);
    }

    #[test]
    fn pair_deviation_values() {
        let a = PathConfiguration::from_bits(2, 2, 0);
        let b = PathConfiguration::from_bits(2, 2, 0b0001);
        assert_eq!(deviation_moment(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(deviation_moment(&a, &a, 0.0).unwrap(), 1.0);
        assert!((deviation_moment(&a, &b, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((deviation_moment(&a, &b, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((deviation_moment(&a, &a.flipped(), 1.0).unwrap() - 4.0).abs() < 1e-15);
        assert!(deviation_moment(&a, &PathConfiguration::from_bits(2, 3, 0), 0.0).is_err());
    }

    #[test]
    fn psi_endpoints_and_slope() {
        let (rsb, kernel) = (rsb2(), kernel3());
        let site = SingleSiteModel::new(1.3, 0.6, 0.1, kernel).unwrap();
        let quad = QuadratureSpec::gauss_hermite(24);
        let mix = MixtureFunction::sk();
        let p0 = psi(0.0, &rsb, &mix, &site, &quad).unwrap();
        let p1 = psi(1.0, &rsb, &mix, &site, &quad).unwrap();
        assert!((p0 - elog_zeta0(&rsb, &mix, &site, &quad).unwrap()).abs() < 1e-14);
        assert!((p1 - parisi_functional_sk(&rsb, &site, &quad).unwrap()).abs() < 1e-12);
        let slope = -(1.3f64.powi(2) / 4.0) * (0.4 * (0.49 - 0.09) + 1.0 * (0.0 - 0.49));
        let mid = psi(0.5, &rsb, &mix, &site, &quad).unwrap();
        assert!((p1 - p0 - slope).abs() < 1e-12);
        assert!((mid - 0.5 * (p0 + p1)).abs() < 1e-12);
        assert!(psi(1.5, &rsb, &mix, &site, &quad).is_err());
    }

    #[test]
    fn guerra_at_replica_symmetric_classical_point() {
        let rsb = RsbParams::replica_symmetric(0.0).unwrap();
        let m = model(0.8, 0.0, 0.0, 2, rsb, SelfOverlapKernel::zeros(2), 20);
        let rep = m.guerra_identity_residual(1.0, 2000, 17, 8).unwrap();
        assert_eq!(rep.self_overlap_term.mean, 0.0);
        assert!(rep.gap_in_stderr.abs() < 3.0, "{rep:?}");
        // With y = 0 and q = 0 the variational value is log 2.
        assert!((rep.parisi - 2f64.ln()).abs() < 1e-12);
    }

    /// Common-random-number derivative of φ(s, 1) in `s`.
    fn phi_slope(m: &InterpModel, s: f64, h: f64, n: usize, seed: u64) -> Vec<f64> {
        let up = m.phi_samples(&InterpPoint::new(s + h, 1.0).unwrap(), n, seed).unwrap();
        let dn = m.phi_samples(&InterpPoint::new(s - h, 1.0).unwrap(), n, seed).unwrap();
        up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    #[test]
    fn s_derivative_uses_m_increments() {
        let rsb = rsb2();
        let (beta, n) = (1.2, 2);
        let m = model(beta, 0.7, 0.0, n, rsb.clone(), SelfOverlapKernel::zeros(2), 8);
        let (s, nd, seed) = (0.5, 3000, 29);
        let slope = phi_slope(&m, s, 1e-4, nd, seed);
        let p = InterpPoint::new(s, 1.0).unwrap();
        let f1 = m.bracket_samples(&p, &BracketObservable::PairDeviation(1), nd, seed).unwrap();
        let f2 = m.bracket_samples(&p, &BracketObservable::PairDeviation(2), nd, seed).unwrap();
        let (mm, q) = (rsb.m(), rsb.q());
        let b2 = beta * beta / 4.0;
        let constant = -b2 * (1..=2).map(|l| mm[l] * (q[l + 1].powi(2) - q[l].powi(2))).sum::<f64>() + b2 / n as f64;
        let resid = |c2: f64| -> MCEstimate {
            let v: Vec<f64> = (0..nd).map(|j| slope[j] - (constant - b2 * (mm[1] * f1[j] + c2 * f2[j]))).collect();
            mc_estimate(&v).unwrap()
        };
        let right = resid(mm[2] - mm[1]);
        let printed = resid(mm[2] - mm[1] / 2.0);
        assert!(right.mean.abs() < 3.0 * right.stderr);
        assert!(printed.mean.abs() > 3.0 * printed.stderr);
    }

    #[test]
    fn tilted_pair_reductions() {
        let m = model(1.3, 0.6, 0.1, 2, rsb2(), SelfOverlapKernel::zeros(3), 6);
        let (s, nd, seed) = (0.4, 4, 11);
        let phi = m.phi_samples(&InterpPoint::new(s, 1.0).unwrap(), nd, seed).unwrap();
        for r in 1..=2 {
            let plain = m.tilted_samples(s, &TiltParams::new(r, 0.0, 0.0).unwrap(), nd, seed).unwrap();
            for (x, p) in plain.iter().zip(&phi) {
                assert!((x.log_z2 / 2.0 - 2.0 * p).abs() < 1e-10, "{x:?} {p}");
                assert!((x.log_v - x.log_z2).abs() < 1e-10);
                assert!((x.log_w - x.log_z2).abs() < 1e-10);
                assert!((x.probability - 1.0).abs() < 1e-12);
            }
            let tilted = m.tilted_samples(s, &TiltParams::new(r, 0.3, 0.7).unwrap(), nd, seed).unwrap();
            for x in &tilted {
                assert!(x.log_v >= x.log_w - 1e-12);
                assert!(x.probability > 0.0 && x.probability < 1.0);
            }
        }
        let rep = m.tilted_partitions(s, &TiltParams::new(1, 4.0, 0.0).unwrap(), nd, seed).unwrap();
        assert!(rep.omega.is_none());
        assert_eq!(rep.zero_event_samples, nd);
        assert!(TiltParams::new(1, 4.5, 0.0).is_err());
        assert!(TiltParams::new(1, 0.5, -1.0).is_err());
    }

    #[test]
    fn concentration_trivial_thresholds() {
        let m = model(1.0, 0.6, 0.0, 3, rsb2(), SelfOverlapKernel::zeros(2), 5);
        assert_eq!(m.concentration_probability(0.5, 4.5, 2, 3, 1).unwrap().mean, 0.0);
        assert!((m.concentration_probability(0.5, 0.0, 1, 3, 1).unwrap().mean - 1.0).abs() < 1e-12);
    }

    /// Law of `(Σ_i τ_{l,i})_l` for `τ = σ¹σ²` with independent sites, by
    /// direct convolution of the single-site path law.
    fn independent_site_tail(beta: f64, b: f64, ms: usize, n: usize, u: f64) -> f64 {
        let k = trotter_coupling(beta, b, ms).unwrap();
        let paths = 1usize << ms;
        let spin = |p: usize, l: usize| if (p >> l) & 1 == 0 { 1i32 } else { -1 };
        let w: Vec<f64> = (0..paths)
            .map(|p| (k * (0..ms).map(|l| spin(p, l) * spin(p, (l + 1) % ms)).sum::<i32>() as f64).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let mut tau = vec![0.0; paths];
        for a in 0..paths {
            for c in 0..paths {
                tau[a ^ c] += w[a] * w[c] / (z * z);
            }
        }
        let mut law: HashMap<Vec<i32>, f64> = HashMap::from([(vec![0; ms], 1.0)]);
        for _ in 0..n {
            let mut next = HashMap::new();
            for (sums, p) in &law {
                for (t, pt) in tau.iter().enumerate() {
                    let key: Vec<i32> = (0..ms).map(|l| sums[l] + spin(t, l)).collect();
                    *next.entry(key).or_insert(0.0) += p * pt;
                }
            }
            law = next;
        }
        law.iter()
            .filter(|(sums, _)| sums.iter().map(|&v| (v as f64 / n as f64).powi(2)).sum::<f64>() / ms as f64 >= u)
            .map(|(_, p)| p)
            .sum()
    }

    #[test]
    fn concentration_at_independent_sites() {
        let (beta, b) = (1.0, 50.0);
        let rsb = RsbParams::replica_symmetric(0.0).unwrap();
        for (ms, n) in [(2, 3), (3, 4)] {
            let m = model(beta, b, 0.0, n, rsb.clone(), SelfOverlapKernel::zeros(ms), 4);
            let got = m.concentration_probability(0.0, 0.5, 1, 2, 4).unwrap();
            let want = independent_site_tail(beta, b, ms, n, 0.5);
            assert!(want > 0.01 && want < 0.99);
            assert!((got.mean - want).abs() < 1e-10, "{got:?} vs {want}");
        }
    }

    #[test]
    fn concentration_scan_shape() {
        let rsb = RsbParams::replica_symmetric(0.0).unwrap();
        let scan = concentration_scan(1.0, 50.0, 0.0, &rsb, &SelfOverlapKernel::zeros(2), &QuadratureSpec::gauss_hermite(4), 0.5, 1, 0.0, &[2, 4, 6], 2, 1).unwrap();
        assert_eq!(scan.rows.len(), 3);
        assert!(scan.slope.unwrap() < 0.0, "{scan:?}");
        assert!(scan.rows.iter().all(|r| !r.zero_event));
    }

    #[test]
    fn variance_of_decoupled_slices() {
        let (ms, n) = (3, 4);
        let m = model(1e-3, 1e4, 0.0, n, RsbParams::replica_symmetric(0.0).unwrap(), SelfOverlapKernel::zeros(ms), 4);
        let d = m.selfoverlap_variance_diag(0.5, 4, 3).unwrap();
        for a in 0..ms {
            for c in 0..ms {
                let want = if a == c { 0.0 } else { 1.0 / n as f64 };
                assert!((d.thermal[a * ms + c] - want).abs() < 1e-3, "{d:?}");
            }
        }
        assert!(d.inter < 1e-6);
        assert!((d.total - (ms * (ms - 1)) as f64 / (n * ms * ms) as f64).abs() < 1e-3);
    }

    #[test]
    fn variance_shrinks_with_size() {
        let rsb = RsbParams::replica_symmetric(0.0).unwrap();
        let total = |n: usize| model(0.8, 1.0, 0.0, n, rsb.clone(), SelfOverlapKernel::zeros(2), 4).selfoverlap_variance_diag(1.0, 200, 7).unwrap().total;
        assert!(total(8) < total(3));
    }

    #[test]
    fn size_caps() {
        let p = ModelParams::new(1.0, 0.5, 0.0, 7).unwrap();
        assert!(InterpModel::new(p, rsb2(), SelfOverlapKernel::zeros(3), QuadratureSpec::gauss_hermite(4)).is_err());
        let p = ModelParams::new(1.0, 0.5, 0.0, 5).unwrap();
        let m = InterpModel::new(p, rsb2(), SelfOverlapKernel::zeros(3), QuadratureSpec::gauss_hermite(4)).unwrap();
        assert!(matches!(m.tilted_samples(0.5, &TiltParams::new(1, 0.1, 0.0).unwrap(), 2, 1), Err(Error::SizeCap { .. })));
        let p = ModelParams::new(1.0, 0.5, 0.0, 4).unwrap();
        assert!(InterpModel::new(p, rsb2(), SelfOverlapKernel::zeros(2), QuadratureSpec::gauss_hermite(20)).is_err());
        assert!(InterpPoint::new(1.1, 0.0).is_err());
    }
}
