use serde::{Deserialize, Serialize};

use super::{parisi_functional, MixtureFunction, QuadratureSpec, RsbParams, SingleSiteModel};
use crate::error::{invalid, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::stochastics::RngStream;

/// Lower clamp on the `m` logits: keeps `m_1 ≥ 1.2e-4`, where the power
/// mean `(1/m) log E e^{mF}` is still well conditioned.
const M_LOGIT_MIN: f64 = -9.0;
const LOGIT_MAX: f64 = 40.0;
const LOGIT_MIN: f64 = -40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    /// Total objective evaluations across all restarts.
    pub budget: usize,
    /// Seeded random restarts on top of the fixed starting points.
    pub restarts: usize,
    pub seed: u64,
    pub f_tol: f64,
    pub warm_start: Option<RsbParams>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            budget: 3000,
            restarts: 2,
            seed: 0,
            f_tol: 1e-13,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsbOptimum {
    pub params: RsbParams,
    pub value: f64,
    pub evaluations: usize,
    /// `false` when the budget ran out before the simplex collapsed.
    pub converged: bool,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `u[0..k]` drive the `q` gaps, `u[k..2k−1]` the `m` gaps, each as a
/// sigmoid fraction of the remaining room below 1.
fn decode(k: usize, u: &[f64]) -> Result<RsbParams> {
    let mut q = vec![0.0];
    for i in 0..k {
        let prev = q[i];
        q.push(prev + (1.0 - prev) * sigmoid(u[i].clamp(LOGIT_MIN, LOGIT_MAX)));
    }
    let mut m = vec![0.0];
    for i in 0..k - 1 {
        let prev = m[i];
        m.push(prev + (1.0 - prev) * sigmoid(u[k + i].clamp(M_LOGIT_MIN, LOGIT_MAX)));
    }
    m.push(1.0);
    RsbParams::new(m, q)
}

fn encode(p: &RsbParams) -> Vec<f64> {
    let k = p.k();
    let frac = |cur: f64, prev: f64| {
        let room = 1.0 - prev;
        if room <= 0.0 {
            return LOGIT_MAX;
        }
        logit(((cur - prev) / room).clamp(1e-13, 1.0 - 1e-13)).clamp(-30.0, 30.0)
    };
    let mut u: Vec<f64> = (1..=k).map(|i| frac(p.q()[i], p.q()[i - 1])).collect();
    u.extend((1..k).map(|i| frac(p.m()[i], p.m()[i - 1])));
    u
}

/// Minimize `P_k` over ordered `(m, q)` with restarted Nelder–Mead.
///
/// For `k ≥ 2` one restart begins at the depth-`(k−1)` optimum embedded by
/// duplicating its last overlap, so the result never exceeds the shallower
/// optimum by more than rounding.
pub fn optimize_rsb(
    k: usize,
    mix: &MixtureFunction,
    site: &SingleSiteModel,
    quad: &QuadratureSpec,
    opts: &OptimizeOptions,
) -> Result<RsbOptimum> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let dim = 2 * k - 1;
    let mut used = 0usize;
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = &opts.warm_start {
        if w.k() == k {
            starts.push(encode(w));
        }
    }
    if k >= 2 {
        let shallow_opts = OptimizeOptions {
            budget: opts.budget / 2,
            warm_start: None,
            ..opts.clone()
        };
        let shallow = optimize_rsb(k - 1, mix, site, quad, &shallow_opts)?;
        used += shallow.evaluations;
        let m_prev = shallow.params.m()[k - 2];
        let embedded = shallow.params.insert_level(k - 1, 0.5 * (m_prev + 1.0))?;
        starts.push(encode(&embedded));
    }
    starts.push(vec![0.0; dim]);
    starts.push(vec![-2.0; dim]);
    let stream = RngStream::new(opts.seed).child(k as u64);
    for r in 0..opts.restarts {
        let z = crate::stochastics::gaussian_samples(&stream.child(r as u64), dim);
        starts.push(z.iter().map(|v| 1.5 * v).collect());
    }

    let mut f = |u: &[f64]| -> f64 {
        match decode(k, u) {
            Ok(p) => parisi_functional(&p, mix, site, quad).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };

    let remaining = opts.budget.saturating_sub(used).max(4 * (dim + 1));
    let per_start = (remaining / (starts.len() + 1)).max(2 * (dim + 1));
    let nm = |evals: usize| NelderMeadOptions {
        max_evals: evals,
        f_tol: opts.f_tol,
        initial_step: 1.0,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let res = nelder_mead(&mut f, s, &nm(per_start));
        used += res.evals;
        if best.as_ref().is_none_or(|(_, v)| res.value < *v) {
            best = Some((res.x, res.value));
        }
    }
    let (x_best, v_best) = best.expect("at least one start");
    let polish_budget = opts.budget.saturating_sub(used).max(per_start);
    let polish = nelder_mead(
        &mut f,
        &x_best,
        &NelderMeadOptions {
            initial_step: 0.25,
            ..nm(polish_budget)
        },
    );
    used += polish.evals;
    let (x, value) = if polish.value <= v_best {
        (polish.x, polish.value)
    } else {
        (x_best, v_best)
    };
    Ok(RsbOptimum {
        params: decode(k, &x)?,
        value,
        evaluations: used,
        converged: polish.converged,
    })
}

/// Finite-difference gradient of `P_k` in each `q_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    pub residuals: Vec<f64>,
    /// `true` where `q_r` sits within one step of an ordering constraint and
    /// the derivative is one-sided (forward at a lower wall, backward at an
    /// upper wall).
    pub one_sided: Vec<bool>,
}

impl Stationarity {
    pub fn max_interior(&self) -> f64 {
        self.residuals
            .iter()
            .zip(&self.one_sided)
            .filter(|(_, b)| !**b)
            .map(|(r, _)| r.abs())
            .fold(0.0, f64::max)
    }
}

pub const STATIONARITY_STEP: f64 = 1e-4;

pub fn stationarity_residual(
    rsb: &RsbParams,
    mix: &MixtureFunction,
    site: &SingleSiteModel,
    quad: &QuadratureSpec,
) -> Result<Stationarity> {
    let h = STATIONARITY_STEP;
    let k = rsb.k();
    let q = rsb.q();
    let f = |p: &RsbParams| parisi_functional(p, mix, site, quad);
    let mut residuals = Vec::with_capacity(k);
    let mut one_sided = Vec::with_capacity(k);
    for r in 1..=k {
        let lower = q[r - 1];
        let upper = if r < k { q[r + 1] } else { 1.0 };
        let qr = q[r];
        if qr - h < lower {
            residuals.push((f(&rsb.with_q_unchecked(r, qr + h))? - f(rsb)?) / h);
            one_sided.push(true);
        } else if qr + h > upper {
            residuals.push((f(rsb)? - f(&rsb.with_q_unchecked(r, qr - h))?) / h);
            one_sided.push(true);
        } else {
            residuals.push((f(&rsb.with_q_unchecked(r, qr + h))? - f(&rsb.with_q_unchecked(r, qr - h))?) / (2.0 * h));
            one_sided.push(false);
        }
    }
    Ok(Stationarity { residuals, one_sided })
}
