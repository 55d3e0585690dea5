//! NLP solution: dense active-set QP under an SQP method.

pub mod qp;
mod sqp;

pub use qp::{solve_qp, Qp, QpOptions, QpSolution, QpStatus, QpWorkspace, Side, WorkingSet};
pub use sqp::{default_guess, sqp_solve, SqpWorkspace};

use crate::transcription::Nlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Gauss-Newton when the objective is a weighted sum of squares with
    /// non-negative weights, exact otherwise.
    Auto,
    Exact,
    GaussNewton,
}

impl HessianMode {
    pub fn name(self) -> &'static str {
        match self {
            HessianMode::Auto => "auto",
            HessianMode::Exact => "exact",
            HessianMode::GaussNewton => "gauss-newton",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(HessianMode::Auto),
            "exact" => Some(HessianMode::Exact),
            "gauss-newton" | "gauss_newton" => Some(HessianMode::GaussNewton),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpOptions {
    pub max_iter: usize,
    pub tol_pr: f64,
    pub tol_du: f64,
    pub hessian: HessianMode,
    pub reg_floor: f64,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_ls: usize,
    /// `rho = max(rho, penalty_factor * |multipliers|_inf)`.
    pub penalty_factor: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions {
            max_iter: 50,
            tol_pr: 1e-8,
            tol_du: 1e-6,
            hessian: HessianMode::Auto,
            reg_floor: 1e-8,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_ls: 20,
            penalty_factor: 1.5,
        }
    }
}

impl SqpOptions {
    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        pos(self.tol_pr, "tol_pr")?;
        pos(self.tol_du, "tol_du")?;
        pos(self.reg_floor, "reg_floor")?;
        pos(self.armijo_c1, "armijo_c1")?;
        pos(self.penalty_factor, "penalty_factor")?;
        if self.max_iter == 0 {
            return Err("max_iter must be at least 1".into());
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(format!(
                "backtrack must lie in (0, 1), got {}",
                self.backtrack
            ));
        }
        if self.armijo_c1 >= 1.0 {
            return Err("armijo_c1 must be below 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Solved,
    MaxIter,
    InfeasibleQp,
    LineSearchFailure,
    NumericalError,
    /// No solve has run yet.
    Unsolved,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Solved => "solved",
            Status::MaxIter => "max_iter",
            Status::InfeasibleQp => "infeasible_qp",
            Status::LineSearchFailure => "line_search_failure",
            Status::NumericalError => "numerical_error",
            Status::Unsolved => "unsolved",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Status::Solved,
            Status::MaxIter,
            Status::InfeasibleQp,
            Status::LineSearchFailure,
            Status::NumericalError,
            Status::Unsolved,
        ]
        .into_iter()
        .find(|st| st.name() == s)
    }
}

/// One accepted SQP step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub alpha: f64,
    pub merit: f64,
    pub merit_new: f64,
    /// Directional derivative of the merit function along the step.
    pub slope: f64,
    pub step_inf: f64,
    pub gauss_newton: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub status: Status,
    /// Major iterations, i.e. QPs solved.
    pub iterations: usize,
    pub qp_iterations: usize,
    pub solve_time_s: f64,
    pub primal_inf: f64,
    pub dual_inf: f64,
    pub steps: Vec<StepInfo>,
}

impl SolveStats {
    /// Zeroed record with status `unsolved`.
    pub fn unsolved() -> Self {
        SolveStats {
            status: Status::Unsolved,
            iterations: 0,
            qp_iterations: 0,
            solve_time_s: 0.0,
            primal_inf: 0.0,
            dual_inf: 0.0,
            steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub w: Vec<f64>,
    pub lam_g: Vec<f64>,
    pub lam_h: Vec<f64>,
    pub lam_x: Vec<f64>,
    pub f: f64,
    pub working: WorkingSet,
    pub stats: SolveStats,
}

/// Starting point for [`sqp_solve`]. Multipliers default to zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Guess {
    pub w: Vec<f64>,
    pub lam_g: Option<Vec<f64>>,
    pub lam_h: Option<Vec<f64>>,
    pub lam_x: Option<Vec<f64>>,
    pub working: Option<WorkingSet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

/// Max-norm KKT residuals of the NLP at a primal-dual point. Primal
/// infeasibility includes violated variable bounds.
pub fn kkt_residual(
    nlp: &Nlp,
    w: &[f64],
    lam_g: &[f64],
    lam_h: &[f64],
    lam_x: &[f64],
    p: &[f64],
) -> Result<KktResidual, crate::expr::ExprError> {
    let g = nlp.g.call(&[w, p])?;
    let h = nlp.h.call(&[w, p])?;
    let grad = nlp.grad_f().call(&[w, p])?;
    let jg = nlp.jac_g().call(&[w, p])?;
    let jh = nlp.jac_h().call(&[w, p])?;
    Ok(residual_parts(
        nlp, w, &g, &h, &grad, &jg, &jh, lam_g, lam_h, lam_x,
    ))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_parts(
    nlp: &Nlp,
    w: &[f64],
    g: &[f64],
    h: &[f64],
    grad: &[f64],
    jg: &[f64],
    jh: &[f64],
    lam_g: &[f64],
    lam_h: &[f64],
    lam_x: &[f64],
) -> KktResidual {
    let n = w.len();
    let mut primal = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    primal = h.iter().fold(primal, |m, v| m.max(v.max(0.0)));
    for i in 0..n {
        primal = primal.max(nlp.lbw[i] - w[i]).max(w[i] - nlp.ubw[i]);
    }
    let mut stat = grad.to_vec();
    for (i, l) in lam_g.iter().enumerate() {
        if *l != 0.0 {
            for j in 0..n {
                stat[j] += l * jg[i * n + j];
            }
        }
    }
    for (i, l) in lam_h.iter().enumerate() {
        if *l != 0.0 {
            for j in 0..n {
                stat[j] += l * jh[i * n + j];
            }
        }
    }
    for (s, l) in stat.iter_mut().zip(lam_x) {
        *s += l;
    }
    let dual = stat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let complementarity = lam_h.iter().zip(h).map(|(l, v)| (l * v).abs()).sum();
    KktResidual {
        primal,
        dual,
        complementarity,
    }
}
