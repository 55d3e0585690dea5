use std::time::Instant;

use log::debug;
use nalgebra::DMatrix;

use super::qp::{solve_qp, Qp, QpOptions, QpStatus, QpWorkspace, WorkingSet};
use super::{
    residual_parts, Guess, HessianMode, Solution, SolveStats, SqpOptions, Status, StepInfo,
};
use crate::expr::FunctionDef;
use crate::transcription::{Method, Nlp};

/// Cached output of a function whose value depends only on `p`.
#[derive(Debug, Default, Clone)]
struct Memo {
    key: Vec<u64>,
    out: Vec<f64>,
}

const MEMO_CAP: usize = 8;

/// Per-solver scratch reused across solves: the QP factorization cache
/// and values of functions that do not depend on `w`.
#[derive(Debug, Default, Clone)]
pub struct SqpWorkspace {
    pub qp: QpWorkspace,
    memo: Vec<(FunctionDef, Memo)>,
}

impl SqpWorkspace {
    fn eval(
        &mut self,
        f: &FunctionDef,
        inputs: &[&[f64]],
        p_only: bool,
        p: &[f64],
    ) -> Result<Vec<f64>, String> {
        if !p_only {
            return f.call(inputs).map_err(|e| e.to_string());
        }
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if let Some((_, m)) = self.memo.iter().find(|(g, m)| g.ptr_eq(f) && m.key == key) {
            return Ok(m.out.clone());
        }
        let out = f.call(inputs).map_err(|e| e.to_string())?;
        self.memo.retain(|(g, _)| !g.ptr_eq(f));
        if self.memo.len() >= MEMO_CAP {
            self.memo.remove(0);
        }
        self.memo.push((
            f.clone(),
            Memo {
                key,
                out: out.clone(),
            },
        ));
        Ok(out)
    }
}

fn only_p(f: &FunctionDef) -> bool {
    (0..f.n_in()).all(|i| i == 1 || !f.depends_on_input(i))
}

/// Default starting point: zero controls, states interpolated between the
/// boundary-value hints when present, the initial horizon under free time.
pub fn default_guess(nlp: &Nlp, p: &[f64]) -> Vec<f64> {
    let lay = &nlp.layout;
    let mut w = vec![0.0; nlp.nw()];
    if lay.method == Method::MultipleShooting {
        let x0 = nlp.x0_hint.as_ref().and_then(|f| f.call(&[p]).ok());
        let xf = nlp.xf_hint.as_ref().and_then(|f| f.call(&[p]).ok());
        let n = lay.intervals;
        for k in 0..=n {
            let off = lay.x_offset(k).expect("multiple shooting");
            let s = k as f64 / n as f64;
            for i in 0..lay.nx {
                w[off + i] = match (&x0, &xf) {
                    (Some(a), Some(b)) => a[i] + s * (b[i] - a[i]),
                    (Some(a), None) => a[i],
                    (None, Some(b)) => b[i],
                    (None, None) => 0.0,
                };
            }
        }
    }
    if let Some(i) = lay.t_offset() {
        w[i] = lay.horizon;
    }
    w
}

/// Adds `sigma * Jgᵀ Jg` until `H` is positive definite. On the linearized
/// equality manifold this term is constant, so the QP minimizer is kept
/// whenever the reduced Hessian is positive definite. Returns `sigma`.
fn convexify(hm: &mut [f64], jg: &[f64], n: usize) -> f64 {
    let h = DMatrix::from_row_slice(n, n, hm);
    if n == 0 || h.clone().cholesky().is_some() {
        return 0.0;
    }
    let ng = jg.len() / n;
    if ng == 0 {
        return 0.0;
    }
    let j = DMatrix::from_row_slice(ng, n, jg);
    let jtj = j.transpose() * &j;
    let hmax = h.amax().max(1.0);
    let jmax = jtj.amax();
    if jmax == 0.0 {
        return 0.0;
    }
    let mut sigma = 1e-4 * hmax / jmax;
    for _ in 0..60 {
        let trial = &h + &jtj * sigma;
        if trial.clone().cholesky().is_some() {
            hm.copy_from_slice(trial.transpose().as_slice());
            return sigma;
        }
        sigma *= 4.0;
    }
    0.0
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Point {
    f: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Point {
    fn violation(&self) -> f64 {
        self.g.iter().map(|v| v.abs()).sum::<f64>() + self.h.iter().map(|v| v.max(0.0)).sum::<f64>()
    }
}

/// Solves the NLP for parameter values `p` from `init` (or the default
/// guess). Identical inputs give identical iterates.
pub fn sqp_solve(
    nlp: &Nlp,
    p: &[f64],
    init: Option<&Guess>,
    opts: &SqpOptions,
    ws: &mut SqpWorkspace,
) -> Solution {
    let start = Instant::now();
    let n = nlp.nw();
    let (ng, nh) = (nlp.ng(), nlp.nh());
    let mut w = match init {
        Some(g) if g.w.len() == n => g.w.clone(),
        _ => default_guess(nlp, p),
    };
    for i in 0..n {
        w[i] = w[i].clamp(nlp.lbw[i].min(nlp.ubw[i]), nlp.ubw[i].max(nlp.lbw[i]));
    }
    let pick = |v: Option<&Vec<f64>>, len: usize| {
        v.filter(|v| v.len() == len)
            .cloned()
            .unwrap_or(vec![0.0; len])
    };
    let mut lam_g = pick(init.and_then(|g| g.lam_g.as_ref()), ng);
    let mut lam_h = pick(init.and_then(|g| g.lam_h.as_ref()), nh);
    let mut lam_x = pick(init.and_then(|g| g.lam_x.as_ref()), n);
    let mut working: Option<WorkingSet> = init.and_then(|g| g.working.clone());

    let mut stats = SolveStats {
        primal_inf: f64::NAN,
        dual_inf: f64::NAN,
        ..SolveStats::unsolved()
    };
    let finish = |w: Vec<f64>,
                  lam_g: Vec<f64>,
                  lam_h: Vec<f64>,
                  lam_x: Vec<f64>,
                  f: f64,
                  working: Option<WorkingSet>,
                  mut stats: SolveStats| {
        stats.solve_time_s = start.elapsed().as_secs_f64();
        debug!(
            "sqp: {} after {} iterations (pr {:.3e}, du {:.3e})",
            stats.status.name(),
            stats.iterations,
            stats.primal_inf,
            stats.dual_inf
        );
        Solution {
            w,
            lam_g,
            lam_h,
            lam_x,
            f,
            working: working.unwrap_or_default(),
            stats,
        }
    };

    let gn_ok = match opts.hessian {
        HessianMode::Exact => false,
        HessianMode::GaussNewton | HessianMode::Auto => nlp.gn.is_some(),
    };
    let gn_jac = if gn_ok {
        nlp.gn_jac().ok().flatten()
    } else {
        None
    };
    let hess = if opts.hessian == HessianMode::GaussNewton && gn_jac.is_some() {
        None
    } else {
        match nlp.hess_lag() {
            Ok(h) => Some(h),
            Err(_) => {
                stats.status = Status::NumericalError;
                return finish(w, lam_g, lam_h, lam_x, f64::NAN, working, stats);
            }
        }
    };
    let p_only = [
        only_p(nlp.jac_g()),
        only_p(nlp.jac_h()),
        hess.is_some_and(only_p),
        gn_jac.is_some_and(only_p),
    ];

    let eval_point = |w: &[f64]| -> Result<Point, String> {
        let f = nlp.f.call(&[w, p]).map_err(|e| e.to_string())?[0];
        let g = nlp.g.call(&[w, p]).map_err(|e| e.to_string())?;
        let h = nlp.h.call(&[w, p]).map_err(|e| e.to_string())?;
        if !f.is_finite() || !finite(&g) || !finite(&h) {
            return Err("non-finite function value".into());
        }
        Ok(Point { f, g, h })
    };
    let mut pt = match eval_point(&w) {
        Ok(pt) => pt,
        Err(_) => {
            stats.status = Status::NumericalError;
            return finish(w, lam_g, lam_h, lam_x, f64::NAN, working, stats);
        }
    };
    let mut rho = 0.0f64;
    let qp_opts = QpOptions {
        reg_floor: opts.reg_floor,
        ..QpOptions::default()
    };

    loop {
        if stats.iterations >= opts.max_iter {
            stats.status = Status::MaxIter;
            break;
        }
        let derivs = (|| -> Result<_, String> {
            let grad = nlp.grad_f().call(&[&w, p]).map_err(|e| e.to_string())?;
            let jg = ws.eval(nlp.jac_g(), &[&w, p], p_only[0], p)?;
            let jh = ws.eval(nlp.jac_h(), &[&w, p], p_only[1], p)?;
            Ok((grad, jg, jh))
        })();
        let Ok((grad, jg, jh)) = derivs else {
            stats.status = Status::NumericalError;
            break;
        };
        if !finite(&grad) || !finite(&jg) || !finite(&jh) {
            stats.status = Status::NumericalError;
            break;
        }

        // Hessian: Gauss-Newton when usable, exact otherwise.
        let mut use_gn = false;
        let mut hm = Vec::new();
        if let (Some(jr_f), Some(gn)) = (gn_jac, nlp.gn.as_ref()) {
            let weights = ws.eval(&gn.weight, &[&w, p], true, p);
            let jr = ws.eval(jr_f, &[&w, p], p_only[3], p);
            if let (Ok(om), Ok(jr)) = (weights, jr) {
                if om.iter().all(|v| *v >= 0.0 && v.is_finite())
                    || opts.hessian == HessianMode::GaussNewton
                {
                    use_gn = true;
                    hm = vec![0.0; n * n];
                    for (r, wt) in om.iter().enumerate() {
                        let row = &jr[r * n..(r + 1) * n];
                        let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
                        for &i in &nz {
                            let a = 2.0 * wt * row[i];
                            for &j in &nz {
                                hm[i * n + j] += a * row[j];
                            }
                        }
                    }
                }
            }
        }
        if !use_gn {
            let Some(hf) = hess else {
                stats.status = Status::NumericalError;
                break;
            };
            match ws.eval(hf, &[&w, p, &lam_g, &lam_h], p_only[2], p) {
                Ok(v) => hm = v,
                Err(_) => {
                    stats.status = Status::NumericalError;
                    break;
                }
            }
        }
        if !finite(&hm) {
            stats.status = Status::NumericalError;
            break;
        }
        let sigma = convexify(&mut hm, &jg, n);

        let mut a = jg.clone();
        a.extend_from_slice(&jh);
        let mut lba: Vec<f64> = pt.g.iter().map(|v| -v).collect();
        let mut uba = lba.clone();
        lba.extend(std::iter::repeat_n(f64::NEG_INFINITY, nh));
        uba.extend(pt.h.iter().map(|v| -v));
        let qp = Qp {
            n,
            m: ng + nh,
            h: hm,
            c: grad.clone(),
            a,
            lba,
            uba,
            lbx: (0..n).map(|i| nlp.lbw[i] - w[i]).collect(),
            ubx: (0..n).map(|i| nlp.ubw[i] - w[i]).collect(),
        };
        let sol = solve_qp(&qp, &qp_opts, working.as_ref(), &mut ws.qp);
        stats.iterations += 1;
        stats.qp_iterations += sol.iterations;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                stats.status = Status::InfeasibleQp;
                break;
            }
            _ => {
                stats.status = Status::NumericalError;
                break;
            }
        }
        working = Some(sol.working.clone());
        let dx = sol.x;
        let mut lam_a = sol.lam_a;
        if sigma > 0.0 {
            // Undo the multiplier shift of the added sigma * JgᵀJg term.
            for (i, l) in lam_a[..ng].iter_mut().enumerate() {
                *l += sigma
                    * jg[i * n..(i + 1) * n]
                        .iter()
                        .zip(&dx)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        let qp_lg = &lam_a[..ng];
        let qp_lh = &lam_a[ng..];

        rho = rho.max(opts.penalty_factor * inf_norm(qp_lg).max(inf_norm(qp_lh)));
        let viol = pt.violation();
        let merit = pt.f + rho * viol;
        let slope = grad.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>() - rho * viol;

        // Merit changes below this are rounding noise; without the slack a
        // warm start at the optimum fails its own zero-length step.
        let noise = 10.0 * f64::EPSILON * merit.abs().max(1.0);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_ls {
            let trial: Vec<f64> = (0..n)
                .map(|i| {
                    (w[i] + alpha * dx[i])
                        .clamp(nlp.lbw[i].min(nlp.ubw[i]), nlp.ubw[i].max(nlp.lbw[i]))
                })
                .collect();
            if let Ok(tp) = eval_point(&trial) {
                let m_new = tp.f + rho * tp.violation();
                if m_new <= merit + opts.armijo_c1 * alpha * slope.min(0.0) + noise {
                    accepted = Some((trial, tp, m_new));
                    break;
                }
            }
            alpha *= opts.backtrack;
        }
        let Some((trial, tp, m_new)) = accepted else {
            stats.status = Status::LineSearchFailure;
            break;
        };
        stats.steps.push(StepInfo {
            alpha,
            merit,
            merit_new: m_new,
            slope,
            step_inf: alpha * inf_norm(&dx),
            gauss_newton: use_gn,
        });
        w = trial;
        pt = tp;
        let blend = |old: &mut Vec<f64>, new: &[f64]| {
            for (o, v) in old.iter_mut().zip(new) {
                *o += alpha * (v - *o);
            }
        };
        blend(&mut lam_g, qp_lg);
        blend(&mut lam_h, qp_lh);
        blend(&mut lam_x, &sol.lam_x);

        // Convergence at the new point.
        let grad = nlp.grad_f().call(&[&w, p]);
        let jg = ws.eval(nlp.jac_g(), &[&w, p], p_only[0], p);
        let jh = ws.eval(nlp.jac_h(), &[&w, p], p_only[1], p);
        let (Ok(grad), Ok(jg), Ok(jh)) = (grad, jg, jh) else {
            stats.status = Status::NumericalError;
            break;
        };
        let kkt = residual_parts(
            nlp, &w, &pt.g, &pt.h, &grad, &jg, &jh, &lam_g, &lam_h, &lam_x,
        );
        stats.primal_inf = kkt.primal;
        stats.dual_inf = kkt.dual;
        debug!(
            "sqp {:3}: f {:.6e} pr {:.2e} du {:.2e} alpha {:.3e} gn {}",
            stats.iterations, pt.f, kkt.primal, kkt.dual, alpha, use_gn
        );
        if kkt.primal <= opts.tol_pr && kkt.dual <= opts.tol_du {
            stats.status = Status::Solved;
            break;
        }
    }
    if stats.status == Status::Unsolved {
        stats.status = Status::NumericalError;
    }
    if stats.primal_inf.is_nan() {
        if let (Ok(grad), Ok(jg), Ok(jh)) = (
            nlp.grad_f().call(&[&w, p]),
            nlp.jac_g().call(&[&w, p]),
            nlp.jac_h().call(&[&w, p]),
        ) {
            let kkt = residual_parts(
                nlp, &w, &pt.g, &pt.h, &grad, &jg, &jh, &lam_g, &lam_h, &lam_x,
            );
            stats.primal_inf = kkt.primal;
            stats.dual_inf = kkt.dual;
        }
    }
    let f = pt.f;
    finish(w, lam_g, lam_h, lam_x, f, working, stats)
}
