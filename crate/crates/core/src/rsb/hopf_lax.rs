use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{optimize_rsb, MixtureFunction, OptimizeOptions, QuadratureSpec, RsbParams, SelfOverlapKernel, SingleSiteModel};
use crate::error::{invalid, Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// A function `φ(x)` of a self-overlap kernel, the initial datum of the
/// Hopf–Lax problem.
pub trait KernelObjective {
    fn m_slices(&self) -> usize;
    fn beta(&self) -> f64;
    fn value(&self, kernel: &SelfOverlapKernel) -> Result<f64>;
    /// Box for the reduced profile coordinates, if any.
    fn bounds(&self) -> Option<(f64, f64)>;
    /// Whether every inner computation so far converged.
    fn converged(&self) -> bool {
        true
    }
}

/// `φ(x) = inf_{m,q} P_k(m, q, x)`, warm-started from the previous optimum.
pub struct ParisiProxy {
    pub k: usize,
    pub mix: MixtureFunction,
    pub site: SingleSiteModel,
    pub quad: QuadratureSpec,
    pub opts: OptimizeOptions,
    warm: RefCell<Option<RsbParams>>,
    all_converged: RefCell<bool>,
}

impl ParisiProxy {
    pub fn new(k: usize, mix: MixtureFunction, site: SingleSiteModel, quad: QuadratureSpec, opts: OptimizeOptions) -> Self {
        Self {
            k,
            mix,
            site,
            quad,
            opts,
            warm: RefCell::new(None),
            all_converged: RefCell::new(true),
        }
    }

    pub fn last_optimum(&self) -> Option<RsbParams> {
        self.warm.borrow().clone()
    }
}

impl KernelObjective for ParisiProxy {
    fn m_slices(&self) -> usize {
        self.site.m_slices()
    }

    fn beta(&self) -> f64 {
        self.site.beta
    }

    fn value(&self, kernel: &SelfOverlapKernel) -> Result<f64> {
        let site = self.site.with_kernel(kernel.clone())?;
        let opts = OptimizeOptions {
            warm_start: self.warm.borrow().clone(),
            ..self.opts.clone()
        };
        let opt = optimize_rsb(self.k, &self.mix, &site, &self.quad, &opts)?;
        if !opt.converged {
            *self.all_converged.borrow_mut() = false;
        }
        *self.warm.borrow_mut() = Some(opt.params);
        Ok(opt.value)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn converged(&self) -> bool {
        *self.all_converged.borrow()
    }
}

/// `φ(x) = a + (1/M) Σ_{d=0}^{M−1} [v_d x̂(d) − (γ/2) x̂(d)²]`, whose
/// Hopf–Lax transform is available in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuadratic {
    pub beta: f64,
    pub a: f64,
    /// Full-length, symmetric slope profile `v_d`.
    pub v: Vec<f64>,
    pub gamma: f64,
}

impl SyntheticQuadratic {
    pub fn new(beta: f64, a: f64, v: Vec<f64>, gamma: f64) -> Result<Self> {
        SelfOverlapKernel::new(v.clone())?;
        if !(gamma >= 0.0) || !(beta > 0.0) {
            return Err(invalid("synthetic objective needs beta > 0 and gamma >= 0"));
        }
        Ok(Self { beta, a, v, gamma })
    }

    /// Closed-form `χ(t, y)` and its maximizer: per distance
    /// `x* = (2αy + v)/(2α + γ)` with `α = β²/(4(1 − t))`.
    pub fn exact_chi(&self, t: f64, y: &SelfOverlapKernel) -> (f64, Vec<f64>) {
        let m = self.v.len() as f64;
        if t >= 1.0 {
            return (self.value_profile(y.profile()), y.profile().to_vec());
        }
        let alpha = self.beta * self.beta / (4.0 * (1.0 - t));
        let x: Vec<f64> = y
            .profile()
            .iter()
            .zip(&self.v)
            .map(|(y, v)| (2.0 * alpha * y + v) / (2.0 * alpha + self.gamma))
            .collect();
        let penalty: f64 = x.iter().zip(y.profile()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * alpha / m;
        (self.value_profile(&x) - penalty, x)
    }

    fn value_profile(&self, x: &[f64]) -> f64 {
        let m = self.v.len() as f64;
        self.a + x.iter().zip(&self.v).map(|(x, v)| v * x - 0.5 * self.gamma * x * x).sum::<f64>() / m
    }
}

impl KernelObjective for SyntheticQuadratic {
    fn m_slices(&self) -> usize {
        self.v.len()
    }

    fn beta(&self) -> f64 {
        self.beta
    }

    fn value(&self, kernel: &SelfOverlapKernel) -> Result<f64> {
        if kernel.m_slices() != self.v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.v.len(),
                got: kernel.m_slices(),
            });
        }
        Ok(self.value_profile(kernel.profile()))
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiValue {
    pub value: f64,
    pub maximizer: SelfOverlapKernel,
    pub evaluations: usize,
    pub converged: bool,
}

pub fn default_chi_options() -> NelderMeadOptions {
    NelderMeadOptions {
        max_evals: 6000,
        f_tol: 1e-15,
        initial_step: 0.25,
    }
}

/// `χ(t, y) = sup_x [ −(β²/(4M²(1−t))) Σ_{l,l'} (x − y)² + φ(x) ]` over
/// translation-invariant symmetric `x`, searched in reduced coordinates.
/// At `t = 1` this is `φ(y)`.
pub fn hopf_lax_chi(t: f64, y: &SelfOverlapKernel, objective: &dyn KernelObjective, opts: &NelderMeadOptions) -> Result<ChiValue> {
    let m = objective.m_slices();
    if y.m_slices() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: y.m_slices(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must lie in [0, 1], got {t}")));
    }
    if t == 1.0 {
        return Ok(ChiValue {
            value: objective.value(y)?,
            maximizer: y.clone(),
            evaluations: 1,
            converged: true,
        });
    }
    let beta = objective.beta();
    let coef = beta * beta / (4.0 * m as f64 * (1.0 - t));
    let y_red = y.reduced();
    let mult: Vec<f64> = (0..y_red.len()).map(|r| SelfOverlapKernel::multiplicity(m, r) as f64).collect();
    let project = |x: &[f64]| -> Vec<f64> {
        match objective.bounds() {
            Some((lo, hi)) => x.iter().map(|v| v.clamp(lo, hi)).collect(),
            None => x.to_vec(),
        }
    };
    let mut failure: Option<Error> = None;
    let mut neg = |x: &[f64]| -> f64 {
        let x = project(x);
        let kernel = match SelfOverlapKernel::from_reduced(m, &x) {
            Ok(k) => k,
            Err(_) => return f64::INFINITY,
        };
        let penalty: f64 = x.iter().zip(&y_red).zip(&mult).map(|((x, y), mu)| mu * (x - y) * (x - y)).sum::<f64>() * coef;
        match objective.value(&kernel) {
            Ok(v) => penalty - v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let start = project(&y_red);
    let res = nelder_mead(&mut neg, &start, opts);
    if let Some(e) = failure {
        return Err(e);
    }
    let x = project(&res.x);
    Ok(ChiValue {
        value: -res.value,
        maximizer: SelfOverlapKernel::from_reduced(m, &x)?,
        evaluations: res.evals,
        converged: res.converged && objective.converged(),
    })
}

/// `sup_x [ −(β²/(4M²)) Σ x² + inf_{m,q} P_k(x) ] = χ(0, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn hopf_lax_sup(
    k: usize,
    mix: &MixtureFunction,
    beta: f64,
    b: f64,
    c: f64,
    m_slices: usize,
    quad: &QuadratureSpec,
    opt: &OptimizeOptions,
) -> Result<ChiValue> {
    let site = SingleSiteModel::new(beta, b, c, SelfOverlapKernel::zeros(m_slices))?;
    let proxy = ParisiProxy::new(k, *mix, site, *quad, opt.clone());
    let nm = NelderMeadOptions {
        max_evals: opt.budget.max(50),
        f_tol: 1e-11,
        initial_step: 0.3,
    };
    hopf_lax_chi(0.0, &SelfOverlapKernel::zeros(m_slices), &proxy, &nm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeResidual {
    pub residual: f64,
    pub dchi_dt: f64,
    /// `∂χ/∂ŷ_r` in reduced coordinates.
    pub gradient: Vec<f64>,
    pub converged: bool,
}

/// `|∂χ/∂t + (M²/β²) Σ_{l,l'} (∂χ/∂y_{l,l'})²|` by central differences.
///
/// A reduced coordinate `ŷ_r` stands for `M μ_r` equal matrix entries, so
/// `Σ_{l,l'} (∂χ/∂y_{l,l'})² = Σ_r (∂χ/∂ŷ_r)² / (M μ_r)`.
pub fn hopf_lax_pde_residual(
    t: f64,
    y: &SelfOverlapKernel,
    objective: &dyn KernelObjective,
    step_t: f64,
    step_y: f64,
    opts: &NelderMeadOptions,
) -> Result<PdeResidual> {
    if !(t - step_t > 0.0 && t + step_t < 1.0) {
        return Err(invalid("t ± step must stay inside (0, 1)"));
    }
    let m = y.m_slices();
    let mut converged = true;
    let mut chi = |t: f64, k: &SelfOverlapKernel| -> Result<f64> {
        let v = hopf_lax_chi(t, k, objective, opts)?;
        converged &= v.converged;
        Ok(v.value)
    };
    let dchi_dt = (chi(t + step_t, y)? - chi(t - step_t, y)?) / (2.0 * step_t);
    let red = y.reduced();
    let mut gradient = Vec::with_capacity(red.len());
    let mut sum_sq = 0.0;
    for r in 0..red.len() {
        let mut up = red.clone();
        up[r] += step_y;
        let mut dn = red.clone();
        dn[r] -= step_y;
        let g = (chi(t, &SelfOverlapKernel::from_reduced(m, &up)?)? - chi(t, &SelfOverlapKernel::from_reduced(m, &dn)?)?) / (2.0 * step_y);
        sum_sq += g * g / (m as f64 * SelfOverlapKernel::multiplicity(m, r) as f64);
        gradient.push(g);
    }
    let beta = objective.beta();
    let residual = (dchi_dt + (m * m) as f64 / (beta * beta) * sum_sq).abs();
    Ok(PdeResidual {
        residual,
        dchi_dt,
        gradient,
        converged,
    })
}
