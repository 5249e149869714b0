//! Derivative-free local minimization (Nelder–Mead simplex via argmin).

use std::cell::{Cell, RefCell};

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once the standard deviation of simplex values is below this.
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            f_tol: 1e-12,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` from `x0`. Non-finite values are treated as `+∞`.
///
/// Runs argmin's simplex; the budget is enforced per evaluation, and the
/// best point seen is returned when it runs out.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum {
    let problem = Counted {
        f: RefCell::new(f),
        best: RefCell::new((x0.to_vec(), f64::INFINITY)),
        evals: Cell::new(0),
        max_evals: opts.max_evals.max(1),
    };
    if x0.is_empty() {
        let _ = (&problem).cost(&Vec::new());
        let (x, value) = problem.best.into_inner();
        return Minimum { x, value, evals: 1, converged: true };
    }
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.f_tol)
        .expect("f_tol must be nonnegative");
    let run = Executor::new(&problem, solver)
        .configure(|state| state.max_iters(opts.max_evals as u64))
        .run();
    let converged = matches!(
        run.map(|r| r.state().get_termination_status().clone()),
        Ok(TerminationStatus::Terminated(TerminationReason::SolverConverged))
    );
    let evals = problem.evals.get();
    let (x, value) = problem.best.into_inner();
    Minimum { x, value, evals, converged }
}

struct Counted<F> {
    f: RefCell<F>,
    best: RefCell<(Vec<f64>, f64)>,
    evals: Cell<usize>,
    max_evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> CostFunction for &Counted<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, ArgminError> {
        if self.evals.get() >= self.max_evals {
            return Err(ArgminError::msg("evaluation budget exhausted"));
        }
        self.evals.set(self.evals.get() + 1);
        let v = (self.f.borrow_mut())(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        let mut best = self.best.borrow_mut();
        if v < best.1 {
            *best = (x.clone(), v);
        }
        Ok(v)
    }
}
