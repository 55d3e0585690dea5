//! Direct transcription of a canonical OCP into a finite-dimensional NLP.
//!
//! Multiple shooting decision vector:
//! `w = [x_0 .. x_N | u_0 .. u_{N-1} | z_0 .. z_{N-1} | T]`, with `z` only
//! for models with algebraic states and `T` only under free time. Single
//! shooting keeps `[u | z | T]` and eliminates states by forward
//! simulation from an initial-state equality `at_t0(x) == expr(p)`.
//!
//! Equalities are ordered `[defects | boundary | algebraic | path]` and
//! inequalities (`<= 0`) `[path rows node by node | boundary]`.

use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::expr::{
    self, hessian_expr, jacobian_expr, substitute, substitute_many, sum, Expr, ExprError,
    FunctionDef, Node,
};
use crate::model_io::Part;
use crate::ocp::{CanonicalOcp, Horizon};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranscriptionError {
    #[error("number of intervals must be at least 1")]
    NoIntervals,
    #[error("integrator sub-steps must be at least 1")]
    NoSubsteps,
    #[error("problem too large: {0} decision variables")]
    TooLarge(usize),
    #[error("single shooting needs an initial-state equality at_t0(x) == <parameter expression> for every model")]
    NoInitialState,
    #[error("malformed NLP: {0}")]
    Malformed(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Decision vectors larger than this are rejected; derivatives are dense.
pub const MAX_DECISION_VARIABLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Euler,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rk4 => "rk",
            Scheme::Euler => "euler",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "rk" | "rk4" => Some(Scheme::Rk4),
            "euler" => Some(Scheme::Euler),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorCfg {
    pub scheme: Scheme,
    /// Sub-steps per control interval.
    pub substeps: usize,
}

impl Default for IntegratorCfg {
    fn default() -> Self {
        IntegratorCfg {
            scheme: Scheme::Rk4,
            substeps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MultipleShooting,
    SingleShooting,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MultipleShooting => "multiple_shooting",
            Method::SingleShooting => "single_shooting",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "multiple_shooting" => Some(Method::MultipleShooting),
            "single_shooting" => Some(Method::SingleShooting),
            _ => None,
        }
    }
}

/// Cost quadrature for integral terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagrangeRule {
    /// Integrate the cost alongside the states with the same scheme.
    Integrator,
    /// `dt * V(x_k, u_k)` per interval.
    LeftRectangle,
}

impl LagrangeRule {
    pub fn name(self) -> &'static str {
        match self {
            LagrangeRule::Integrator => "integrator",
            LagrangeRule::LeftRectangle => "left_rectangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "integrator" => Some(LagrangeRule::Integrator),
            "left_rectangle" => Some(LagrangeRule::LeftRectangle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptionCfg {
    pub method: Method,
    pub intervals: usize,
    pub integrator: IntegratorCfg,
    pub lagrange: LagrangeRule,
}

impl TranscriptionCfg {
    pub fn multiple_shooting(intervals: usize) -> Self {
        TranscriptionCfg {
            method: Method::MultipleShooting,
            intervals,
            integrator: IntegratorCfg::default(),
            lagrange: LagrangeRule::Integrator,
        }
    }

    pub fn single_shooting(intervals: usize) -> Self {
        TranscriptionCfg {
            method: Method::SingleShooting,
            ..Self::multiple_shooting(intervals)
        }
    }
}

/// Position and shape of one named model inside the stacked x/u/z vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub name: String,
    pub states: Vec<String>,
    pub controls: Vec<String>,
    pub algebraic: Vec<String>,
}

/// Decision-vector layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub method: Method,
    pub intervals: usize,
    pub nx: usize,
    pub nu: usize,
    pub nz: usize,
    pub free_time: bool,
    /// Fixed horizon length, or the initial guess under free time.
    pub horizon: f64,
    pub models: Vec<ModelLayout>,
}

impl Layout {
    pub fn nw(&self) -> usize {
        let n = self.intervals;
        let states = match self.method {
            Method::MultipleShooting => (n + 1) * self.nx,
            Method::SingleShooting => 0,
        };
        states + n * self.nu + n * self.nz + usize::from(self.free_time)
    }

    /// Offset of `x_k` in `w` (multiple shooting only).
    pub fn x_offset(&self, k: usize) -> Option<usize> {
        (self.method == Method::MultipleShooting).then(|| k * self.nx)
    }

    fn states_len(&self) -> usize {
        match self.method {
            Method::MultipleShooting => (self.intervals + 1) * self.nx,
            Method::SingleShooting => 0,
        }
    }

    pub fn u_offset(&self, k: usize) -> usize {
        self.states_len() + k * self.nu
    }

    pub fn z_offset(&self, k: usize) -> usize {
        self.states_len() + self.intervals * self.nu + k * self.nz
    }

    pub fn t_offset(&self) -> Option<usize> {
        self.free_time.then(|| self.nw() - 1)
    }

    /// Qualified component lookup (`model.component`) or an unqualified
    /// name if it is unique across models.
    pub fn component(&self, id: &str) -> Option<(Part, usize)> {
        let mut found = None;
        let (mut ox, mut ou, mut oz) = (0, 0, 0);
        for m in &self.models {
            let (model, comp) = match id.split_once('.') {
                Some((a, b)) => (Some(a), b),
                None => (None, id),
            };
            if model.is_none_or(|a| a == m.name) {
                let hit = m
                    .states
                    .iter()
                    .position(|s| s == comp)
                    .map(|i| (Part::X, ox + i))
                    .or_else(|| {
                        m.controls
                            .iter()
                            .position(|s| s == comp)
                            .map(|i| (Part::U, ou + i))
                    })
                    .or_else(|| {
                        m.algebraic
                            .iter()
                            .position(|s| s == comp)
                            .map(|i| (Part::Z, oz + i))
                    });
                if let Some(h) = hit {
                    if found.is_some() {
                        return None;
                    }
                    found = Some(h);
                }
            }
            ox += m.states.len();
            ou += m.controls.len();
            oz += m.algebraic.len();
        }
        found
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
    pub stage_varying: bool,
    pub offset: usize,
}

/// Flat parameter vector layout. Stage-varying parameters hold `N+1`
/// stage vectors, stage-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub stages: usize,
}

impl ParamLayout {
    pub fn new(decls: &[(String, usize, bool)], stages: usize) -> Self {
        let mut offset = 0;
        let entries = decls
            .iter()
            .map(|(name, len, sv)| {
                let e = ParamEntry {
                    name: name.clone(),
                    len: *len,
                    stage_varying: *sv,
                    offset,
                };
                offset += if *sv { len * stages } else { *len };
                e
            })
            .collect();
        ParamLayout { entries, stages }
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| {
            e.offset
                + if e.stage_varying {
                    e.len * self.stages
                } else {
                    e.len
                }
        })
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Offset of `name` at stage `k` (stage ignored for constant parameters).
    pub fn stage_offset(&self, e: &ParamEntry, k: usize) -> usize {
        if e.stage_varying {
            e.offset + k * e.len
        } else {
            e.offset
        }
    }
}

/// Least-squares structure of the objective: `f = sum_i weight_i * res_i^2
/// + (terms constant in w)`, with weights independent of `w`.
#[derive(Debug, Clone)]
pub struct GaussNewton {
    pub residual: FunctionDef,
    pub weight: FunctionDef,
}

struct Derived {
    grad_f: FunctionDef,
    jac_g: FunctionDef,
    jac_h: FunctionDef,
    hess_lag: OnceLock<Result<FunctionDef, ExprError>>,
    gn_jac: OnceLock<Result<Option<FunctionDef>, ExprError>>,
}

/// The transcribed problem `min f(w,p) s.t. g(w,p) = 0, h(w,p) <= 0,
/// lbw <= w <= ubw`.
#[derive(Clone)]
pub struct Nlp {
    pub f: FunctionDef,
    pub g: FunctionDef,
    pub h: FunctionDef,
    /// State trajectory `(N+1) * nx`, stage-major.
    pub xtraj: FunctionDef,
    pub lbw: Vec<f64>,
    pub ubw: Vec<f64>,
    pub layout: Layout,
    pub params: ParamLayout,
    pub gn: Option<GaussNewton>,
    pub x0_hint: Option<FunctionDef>,
    pub xf_hint: Option<FunctionDef>,
    w: Expr,
    p: Expr,
    derived: Arc<Derived>,
}

impl std::fmt::Debug for Nlp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nlp")
            .field("nw", &self.nw())
            .field("ng", &self.ng())
            .field("nh", &self.nh())
            .field("np", &self.np())
            .finish()
    }
}

/// Raw parts of an NLP, before derivative construction.
pub struct NlpParts {
    pub f: FunctionDef,
    pub g: FunctionDef,
    pub h: FunctionDef,
    pub xtraj: FunctionDef,
    pub lbw: Vec<f64>,
    pub ubw: Vec<f64>,
    pub layout: Layout,
    pub params: ParamLayout,
    pub gn: Option<GaussNewton>,
    pub x0_hint: Option<FunctionDef>,
    pub xf_hint: Option<FunctionDef>,
}

fn input_symbol(name: &str, n: usize) -> Expr {
    Expr::symbol_unchecked(name, n)
}

impl Nlp {
    /// Validates the parts, rebases every function onto shared `w`/`p`
    /// symbols and builds first derivatives (second derivatives lazily).
    pub fn new(parts: NlpParts) -> Result<Nlp, TranscriptionError> {
        let bad = |m: String| TranscriptionError::Malformed(m);
        let nw = parts.layout.nw();
        let np = parts.params.total();
        if nw > MAX_DECISION_VARIABLES {
            return Err(TranscriptionError::TooLarge(nw));
        }
        if parts.lbw.len() != nw || parts.ubw.len() != nw {
            return Err(bad(format!("bounds must have length {nw}")));
        }
        let w = input_symbol("w", nw);
        let p = input_symbol("p", np);
        let rebase =
            |f: &FunctionDef, name: &str, ins: &[(&Expr, &str)], outs: Option<&[usize]>| {
                if f.n_in() != ins.len() {
                    return Err(bad(format!("{name} must take {} inputs", ins.len())));
                }
                let mut bindings = Vec::new();
                for (i, (target, label)) in ins.iter().enumerate() {
                    if f.input_len(i) != target.len() {
                        return Err(bad(format!(
                            "{name} input {label} has length {}, expected {}",
                            f.input_len(i),
                            target.len()
                        )));
                    }
                    bindings.push((f.inputs()[i].clone(), (*target).clone()));
                }
                if let Some(lens) = outs {
                    let got: Vec<usize> = f.outputs().iter().map(Expr::len).collect();
                    if got != lens {
                        return Err(bad(format!(
                            "{name} outputs have lengths {got:?}, expected {lens:?}"
                        )));
                    }
                }
                let outputs = substitute_many(f.outputs(), &bindings)?;
                let inputs = ins.iter().map(|(e, _)| (*e).clone()).collect();
                Ok(FunctionDef::new(name, inputs, outputs)?)
            };
        let wp: [(&Expr, &str); 2] = [(&w, "w"), (&p, "p")];
        let f = rebase(&parts.f, "f", &wp, Some(&[1]))?;
        if parts.g.n_out() != 1 || parts.h.n_out() != 1 {
            return Err(bad("g and h must have exactly one output".into()));
        }
        let g = rebase(&parts.g, "g", &wp, None)?;
        let h = rebase(&parts.h, "h", &wp, None)?;
        let nx = parts.layout.nx;
        let xtraj = rebase(
            &parts.xtraj,
            "xtraj",
            &wp,
            Some(&[(parts.layout.intervals + 1) * nx]),
        )?;
        let gn = match &parts.gn {
            Some(gn) => {
                let residual = rebase(&gn.residual, "gn_res", &wp, None)?;
                let nr = residual.output_len(0);
                let weight = rebase(&gn.weight, "gn_weight", &wp, Some(&[nr]))?;
                if residual.n_out() != 1 {
                    return Err(bad("gn_res must have one output".into()));
                }
                if weight.depends_on_input(0) {
                    return Err(bad("gn_weight must not depend on w".into()));
                }
                Some(GaussNewton { residual, weight })
            }
            None => None,
        };
        let hint = |f: &Option<FunctionDef>,
                    name: &str|
         -> Result<Option<FunctionDef>, TranscriptionError> {
            f.as_ref()
                .map(|f| rebase(f, name, &[(&p, "p")], Some(&[nx])))
                .transpose()
        };
        let x0_hint = hint(&parts.x0_hint, "x0_hint")?;
        let xf_hint = hint(&parts.xf_hint, "xf_hint")?;

        let grad_f = FunctionDef::new(
            "grad_f",
            vec![w.clone(), p.clone()],
            vec![jacobian_expr(&f.outputs()[0], &w)?],
        )?;
        let jac_g = FunctionDef::new(
            "jac_g",
            vec![w.clone(), p.clone()],
            vec![jacobian_expr(&g.outputs()[0], &w)?],
        )?;
        let jac_h = FunctionDef::new(
            "jac_h",
            vec![w.clone(), p.clone()],
            vec![jacobian_expr(&h.outputs()[0], &w)?],
        )?;
        Ok(Nlp {
            f,
            g,
            h,
            xtraj,
            lbw: parts.lbw,
            ubw: parts.ubw,
            layout: parts.layout,
            params: parts.params,
            gn,
            x0_hint,
            xf_hint,
            w,
            p,
            derived: Arc::new(Derived {
                grad_f,
                jac_g,
                jac_h,
                hess_lag: OnceLock::new(),
                gn_jac: OnceLock::new(),
            }),
        })
    }

    pub fn nw(&self) -> usize {
        self.w.len()
    }
    pub fn np(&self) -> usize {
        self.p.len()
    }
    pub fn ng(&self) -> usize {
        self.g.output_len(0)
    }
    pub fn nh(&self) -> usize {
        self.h.output_len(0)
    }

    /// Gradient of `f`, inputs `(w, p)`.
    pub fn grad_f(&self) -> &FunctionDef {
        &self.derived.grad_f
    }
    /// Row-major `ng x nw` Jacobian of `g`.
    pub fn jac_g(&self) -> &FunctionDef {
        &self.derived.jac_g
    }
    /// Row-major `nh x nw` Jacobian of `h`.
    pub fn jac_h(&self) -> &FunctionDef {
        &self.derived.jac_h
    }

    /// Hessian of `f + lam_g.g + lam_h.h`, inputs `(w, p, lam_g, lam_h)`.
    pub fn hess_lag(&self) -> Result<&FunctionDef, ExprError> {
        self.derived
            .hess_lag
            .get_or_init(|| {
                let lg = input_symbol("lam_g", self.ng());
                let lh = input_symbol("lam_h", self.nh());
                let lag = self.f.outputs()[0]
                    .add(&dot(&lg, &self.g.outputs()[0])?)?
                    .add(&dot(&lh, &self.h.outputs()[0])?)?;
                FunctionDef::new(
                    "hess_lag",
                    vec![self.w.clone(), self.p.clone(), lg, lh],
                    vec![hessian_expr(&lag, &self.w)?],
                )
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Jacobian of the least-squares residuals, if the objective has that
    /// structure.
    pub fn gn_jac(&self) -> Result<Option<&FunctionDef>, ExprError> {
        self.derived
            .gn_jac
            .get_or_init(|| {
                self.gn
                    .as_ref()
                    .map(|gn| {
                        FunctionDef::new(
                            "gn_jac",
                            vec![self.w.clone(), self.p.clone()],
                            vec![jacobian_expr(&gn.residual.outputs()[0], &self.w)?],
                        )
                    })
                    .transpose()
            })
            .as_ref()
            .map(Option::as_ref)
            .map_err(Clone::clone)
    }

    /// Time of node `k` given a decision vector (relevant under free time).
    pub fn node_time(&self, w: &[f64], k: usize) -> f64 {
        let n = self.layout.intervals as f64;
        match self.layout.t_offset() {
            Some(i) => k as f64 / n * w[i],
            None => k as f64 * self.layout.horizon / n,
        }
    }
}

fn dot(a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
    if a.is_empty() {
        return Ok(Expr::constant(0.0));
    }
    a.dot(b)
}

/// One explicit integration step of `xdot = f(x, t)` from `(x, t)` with
/// step `h`. Returns the new state and the cost quadrature nodes
/// `(state, time, weight)` matching the scheme.
pub fn integrator_step(
    scheme: Scheme,
    f: &mut dyn FnMut(&Expr, &Expr) -> Result<Expr, ExprError>,
    x: &Expr,
    t: &Expr,
    h: &Expr,
) -> Result<(Expr, Vec<(Expr, Expr, Expr)>), ExprError> {
    match scheme {
        Scheme::Euler => {
            let k1 = f(x, t)?;
            let next = x.add(&h.mul(&k1)?)?;
            Ok((next, vec![(x.clone(), t.clone(), h.clone())]))
        }
        Scheme::Rk4 => {
            let half = h.scale(0.5);
            let sixth = h.div(&Expr::constant(6.0))?;
            let third = h.div(&Expr::constant(3.0))?;
            let tm = t.add(&half)?;
            let te = t.add(h)?;
            let k1 = f(x, t)?;
            let x2 = x.add(&half.mul(&k1)?)?;
            let k2 = f(&x2, &tm)?;
            let x3 = x.add(&half.mul(&k2)?)?;
            let k3 = f(&x3, &tm)?;
            let x4 = x.add(&h.mul(&k3)?)?;
            let k4 = f(&x4, &te)?;
            let two = Expr::constant(2.0);
            let slope = k1.add(&two.mul(&k2)?)?.add(&two.mul(&k3)?)?.add(&k4)?;
            let next = x.add(&sixth.mul(&slope)?)?;
            let nodes = vec![
                (x.clone(), t.clone(), sixth.clone()),
                (x2, tm.clone(), third.clone()),
                (x3, tm, third),
                (x4, te, sixth),
            ];
            Ok((next, nodes))
        }
    }
}

/// Numeric classical RK4 step for `xdot = f(x)`.
pub fn rk4_step(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(x);
    let k2 = f(&axpy(0.5 * h, &k1));
    let k3 = f(&axpy(0.5 * h, &k2));
    let k4 = f(&axpy(h, &k3));
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Numeric explicit Euler step.
pub fn euler_step(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let k = f(x);
    x.iter().zip(&k).map(|(a, b)| a + h * b).collect()
}

/// Splits a scalar objective term into `coef * r^2` summands with
/// decision-free coefficients. Summands constant in the decision variables
/// are dropped. `None` if the term has no such structure.
pub fn least_squares_terms(e: &Expr, decision: &[Expr]) -> Option<Vec<(Expr, Expr)>> {
    let mut stack = vec![e.clone()];
    let mut out = Vec::new();
    while let Some(s) = stack.pop() {
        if let Node::Binary(expr::BinaryOp::Add, a, b) = s.node() {
            stack.push(b.clone());
            stack.push(a.clone());
            continue;
        }
        if !s.depends_on(decision) {
            continue;
        }
        out.push(square_form(&s, decision)?);
    }
    Some(out)
}

fn square_form(e: &Expr, decision: &[Expr]) -> Option<(Expr, Expr)> {
    if e.len() != 1 {
        return None;
    }
    match e.node() {
        Node::Binary(expr::BinaryOp::Pow, r, c) if c.is_const_value(2.0) => {
            Some((Expr::constant(1.0), r.clone()))
        }
        Node::Binary(expr::BinaryOp::Mul, a, b) => {
            if a.ptr_eq(b) {
                return Some((Expr::constant(1.0), a.clone()));
            }
            if !a.depends_on(decision) {
                let (c, r) = square_form(b, decision)?;
                return Some((a.mul(&c).ok()?, r));
            }
            if !b.depends_on(decision) {
                let (c, r) = square_form(a, decision)?;
                return Some((b.mul(&c).ok()?, r));
            }
            None
        }
        _ => None,
    }
}

struct Builder<'a> {
    ocp: &'a CanonicalOcp,
    cfg: TranscriptionCfg,
    w: Expr,
    p: Expr,
    params: ParamLayout,
    layout: Layout,
    horizon: Expr,
}

impl Builder<'_> {
    fn n(&self) -> usize {
        self.cfg.intervals
    }

    fn u(&self, k: usize) -> Result<Expr, ExprError> {
        self.w.slice(self.layout.u_offset(k), self.layout.nu)
    }

    fn z(&self, k: usize) -> Result<Option<Expr>, ExprError> {
        if self.layout.nz == 0 {
            return Ok(None);
        }
        Ok(Some(self.w.slice(self.layout.z_offset(k), self.layout.nz)?))
    }

    fn node_time(&self, k: usize) -> Result<Expr, ExprError> {
        let n = self.n() as f64;
        match self.ocp.horizon {
            Horizon::Fixed(t) => Ok(Expr::constant(k as f64 * t / n)),
            Horizon::FreeTime(_) => Ok(self.horizon.scale(k as f64 / n)),
        }
    }

    fn step(&self) -> Result<Expr, ExprError> {
        let per = (self.n() * self.cfg.integrator.substeps) as f64;
        match self.ocp.horizon {
            Horizon::Fixed(t) => Ok(Expr::constant(t / per)),
            Horizon::FreeTime(_) => self.horizon.div(&Expr::constant(per)),
        }
    }

    fn interval(&self) -> Result<Expr, ExprError> {
        let n = self.n() as f64;
        match self.ocp.horizon {
            Horizon::Fixed(t) => Ok(Expr::constant(t / n)),
            Horizon::FreeTime(_) => self.horizon.div(&Expr::constant(n)),
        }
    }

    /// Parameter bindings for stage `k`, plus horizon and anchored
    /// parameter copies.
    fn param_bindings(&self, k: usize) -> Result<Vec<(Expr, Expr)>, ExprError> {
        let mut b = Vec::new();
        for (decl, entry) in self.ocp.params.iter().zip(&self.params.entries) {
            let at = |s: usize| self.p.slice(self.params.stage_offset(entry, s), entry.len);
            b.push((decl.symbol.clone(), at(k)?));
            if let Some(s0) = &decl.at_t0 {
                b.push((s0.clone(), at(0)?));
            }
            if let Some(sf) = &decl.at_tf {
                b.push((sf.clone(), at(self.n())?));
            }
        }
        if self.horizon_is_symbol() {
            b.push((self.ocp.horizon_expr.clone(), self.horizon.clone()));
        }
        Ok(b)
    }

    fn horizon_is_symbol(&self) -> bool {
        self.ocp.horizon_expr.is_symbol()
    }

    /// Bindings of every model's x/u/z to slices of the stacked vectors.
    fn model_bindings(
        &self,
        x: &Expr,
        u: Option<&Expr>,
        z: Option<&Expr>,
    ) -> Result<Vec<(Expr, Expr)>, ExprError> {
        let mut b = Vec::new();
        let (mut ox, mut ou, mut oz) = (0, 0, 0);
        for m in &self.ocp.models {
            let model = &m.model;
            b.push((model.x.clone(), x.slice(ox, model.nx())?));
            if let Some(u) = u {
                b.push((model.u.clone(), u.slice(ou, model.nu())?));
            }
            if let (Some(zs), Some(z)) = (&model.z, z) {
                b.push((zs.clone(), z.slice(oz, model.nz())?));
            }
            ox += model.nx();
            ou += model.nu();
            oz += model.nz();
        }
        Ok(b)
    }

    fn anchored_bindings(
        &self,
        x0: &Expr,
        u0: &Expr,
        z0: Option<&Expr>,
        xn: &Expr,
    ) -> Result<Vec<(Expr, Expr)>, ExprError> {
        let mut b = Vec::new();
        let (mut ox, mut ou, mut oz) = (0, 0, 0);
        for m in &self.ocp.models {
            let model = &m.model;
            b.push((m.x_t0.clone(), x0.slice(ox, model.nx())?));
            b.push((m.u_t0.clone(), u0.slice(ou, model.nu())?));
            b.push((m.x_tf.clone(), xn.slice(ox, model.nx())?));
            if let (Some(zs), Some(z)) = (&m.z_t0, z0) {
                b.push((zs.clone(), z.slice(oz, model.nz())?));
            }
            ox += model.nx();
            ou += model.nu();
            oz += model.nz();
        }
        Ok(b)
    }

    fn stacked_rhs(&self) -> Expr {
        Expr::concat(
            &self
                .ocp
                .models
                .iter()
                .map(|m| m.model.rhs.clone())
                .collect::<Vec<_>>(),
        )
    }

    fn stacked_alg(&self) -> Expr {
        Expr::concat(
            &self
                .ocp
                .models
                .iter()
                .map(|m| m.model.alg.clone())
                .collect::<Vec<_>>(),
        )
    }

    /// Decision symbols of the canonical problem (for least-squares
    /// detection).
    fn decision_symbols(&self) -> Vec<Expr> {
        let mut d = vec![self.ocp.t.clone()];
        for m in &self.ocp.models {
            d.push(m.model.x.clone());
            d.push(m.model.u.clone());
            d.extend(m.model.z.clone());
            d.push(m.x_t0.clone());
            d.push(m.u_t0.clone());
            d.extend(m.z_t0.clone());
            d.push(m.x_tf.clone());
        }
        if self.horizon_is_symbol() {
            d.push(self.ocp.horizon_expr.clone());
        }
        d
    }

    /// Initial-state equalities `x_t0 == q(p)`: returns the stacked `q`
    /// (over canonical parameter symbols) and the indices of the rows used.
    fn pinned(&self, tf: bool) -> Option<(Expr, Vec<usize>)> {
        let decision = self.decision_symbols();
        let mut parts = Vec::new();
        let mut rows = Vec::new();
        for m in &self.ocp.models {
            let target = if tf { &m.x_tf } else { &m.x_t0 };
            let (i, q) = self.ocp.boundary_eq.iter().enumerate().find_map(|(i, r)| {
                if r.lhs.ptr_eq(target) && !r.rhs.depends_on(&decision) {
                    Some((i, r.rhs.clone()))
                } else if r.rhs.ptr_eq(target) && !r.lhs.depends_on(&decision) {
                    Some((i, r.lhs.clone()))
                } else {
                    None
                }
            })?;
            let q = if q.len() == 1 && target.len() > 1 {
                Expr::concat(&vec![q; target.len()])
            } else {
                q
            };
            parts.push(q);
            rows.push(i);
        }
        Some((Expr::concat(&parts), rows))
    }
}

/// Transcribes a canonical OCP.
pub fn transcribe(ocp: &CanonicalOcp, cfg: TranscriptionCfg) -> Result<Nlp, TranscriptionError> {
    let n = cfg.intervals;
    if n == 0 {
        return Err(TranscriptionError::NoIntervals);
    }
    if cfg.integrator.substeps == 0 {
        return Err(TranscriptionError::NoSubsteps);
    }
    let models = ocp
        .models
        .iter()
        .map(|m| ModelLayout {
            name: m.model.name.clone(),
            states: m
                .model
                .state_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            controls: m
                .model
                .control_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            algebraic: m
                .model
                .algebraic_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
        })
        .collect();
    let layout = Layout {
        method: cfg.method,
        intervals: n,
        nx: ocp.nx(),
        nu: ocp.nu(),
        nz: ocp.nz(),
        free_time: ocp.horizon.is_free(),
        horizon: ocp.horizon.guess(),
        models,
    };
    let nw = layout.nw();
    if nw > MAX_DECISION_VARIABLES {
        return Err(TranscriptionError::TooLarge(nw));
    }
    let decls: Vec<(String, usize, bool)> = ocp
        .params
        .iter()
        .map(|p| (p.name.clone(), p.len, p.stage_varying))
        .collect();
    let params = ParamLayout::new(&decls, n + 1);
    let w = input_symbol("w", nw);
    let p = input_symbol("p", params.total());
    let horizon = match layout.t_offset() {
        Some(i) => w.at(i)?,
        None => ocp.horizon_expr.clone(),
    };
    let b = Builder {
        ocp,
        cfg,
        w: w.clone(),
        p: p.clone(),
        params,
        layout,
        horizon,
    };
    let (nx, nz) = (b.layout.nx, b.layout.nz);
    let rhs = b.stacked_rhs();
    let alg = b.stacked_alg();
    let h_sub = b.step()?;
    let decision = b.decision_symbols();

    // Least-squares structure is only usable with a fixed step.
    let lsq_lagrange: Option<Vec<Vec<(Expr, Expr)>>> = if b.horizon_is_symbol() {
        None
    } else {
        ocp.lagrange
            .iter()
            .map(|t| least_squares_terms(t, &decision))
            .collect()
    };
    let lsq_mayer: Option<Vec<Vec<(Expr, Expr)>>> = ocp
        .mayer
        .iter()
        .map(|t| least_squares_terms(t, &decision))
        .collect();
    let mut gn_res: Vec<Expr> = Vec::new();
    let mut gn_w: Vec<Expr> = Vec::new();

    let pinned0 = b.pinned(false);
    let pinned_f = b.pinned(true);
    let mut skip_rows: Vec<usize> = Vec::new();

    // States at nodes.
    let mut xs: Vec<Expr> = Vec::with_capacity(n + 1);
    let x_start = match cfg.method {
        Method::MultipleShooting => w.slice(0, nx)?,
        Method::SingleShooting => {
            let (q, rows) = pinned0.clone().ok_or(TranscriptionError::NoInitialState)?;
            skip_rows = rows;
            substitute(&q, &b.param_bindings(0)?)?
        }
    };
    xs.push(x_start);

    let mut defects = Vec::new();
    let mut cost_terms = Vec::new();
    for k in 0..n {
        let uk = b.u(k)?;
        let zk = b.z(k)?;
        let pb = b.param_bindings(k)?;
        let mut x = xs[k].clone();
        let mut t = b.node_time(k)?;
        let mut quad: Vec<(Expr, Expr, Expr)> = Vec::new();
        for _ in 0..cfg.integrator.substeps {
            let mut f = |xv: &Expr, _t: &Expr| -> Result<Expr, ExprError> {
                substitute(&rhs, &b.model_bindings(xv, Some(&uk), zk.as_ref())?)
            };
            let (next, nodes) = integrator_step(cfg.integrator.scheme, &mut f, &x, &t, &h_sub)?;
            quad.extend(nodes);
            x = next;
            t = t.add(&h_sub)?;
        }
        if cfg.lagrange == LagrangeRule::LeftRectangle {
            quad = vec![(xs[k].clone(), b.node_time(k)?, b.interval()?)];
        }
        for (xq, tq, wq) in &quad {
            let mut bind = b.model_bindings(xq, Some(&uk), zk.as_ref())?;
            bind.extend(pb.iter().cloned());
            bind.push((ocp.t.clone(), tq.clone()));
            let terms = substitute_many(&ocp.lagrange, &bind)?;
            for term in terms {
                cost_terms.push(wq.mul(&term)?);
            }
            if let Some(lsq) = &lsq_lagrange {
                for pairs in lsq {
                    for (c, r) in pairs {
                        let cr = substitute_many(&[c.clone(), r.clone()], &bind)?;
                        gn_w.push(cr[0].mul(wq)?);
                        gn_res.push(cr[1].clone());
                    }
                }
            }
        }
        match cfg.method {
            Method::MultipleShooting => {
                let next = w.slice((k + 1) * nx, nx)?;
                defects.push(next.sub(&x)?);
                xs.push(next);
            }
            Method::SingleShooting => xs.push(x),
        }
    }

    let x_n = xs[n].clone();
    let u0 = b.u(0)?;
    let z0 = b.z(0)?;
    let mut global = b.anchored_bindings(&xs[0], &u0, z0.as_ref(), &x_n)?;
    global.extend(b.param_bindings(n)?);

    for (i, term) in ocp.mayer.iter().enumerate() {
        cost_terms.push(substitute(term, &global)?);
        if let Some(lsq) = &lsq_mayer {
            for (c, r) in &lsq[i] {
                let cr = substitute_many(&[c.clone(), r.clone()], &global)?;
                gn_w.push(cr[0].clone());
                gn_res.push(cr[1].clone());
            }
        }
    }
    let objective = sum(&cost_terms);

    // Equalities.
    let mut g_rows = defects;
    for (i, row) in ocp.boundary_eq.iter().enumerate() {
        if skip_rows.contains(&i) {
            continue;
        }
        g_rows.push(substitute(&row.residual(), &global)?);
    }
    if nz > 0 {
        for k in 0..n {
            let mut bind = b.model_bindings(&xs[k], Some(&b.u(k)?), b.z(k)?.as_ref())?;
            bind.extend(b.param_bindings(k)?);
            g_rows.push(substitute(&alg, &bind)?);
        }
    }
    let mut h_rows = Vec::new();
    for k in 0..=n {
        let uk = if k < n { Some(b.u(k)?) } else { None };
        let mut bind = b.model_bindings(&xs[k], uk.as_ref(), None)?;
        bind.extend(b.param_bindings(k)?);
        bind.push((ocp.t.clone(), b.node_time(k)?));
        for row in &ocp.path_eq {
            if k < n || row.state_only {
                g_rows.push(substitute(&row.expr, &bind)?);
            }
        }
        for row in &ocp.path_ineq {
            if k < n || row.state_only {
                h_rows.push(substitute(&row.expr, &bind)?);
            }
        }
    }
    for row in &ocp.boundary_ineq {
        h_rows.push(substitute(row, &global)?);
    }

    // Variable bounds.
    let mut lbw = vec![f64::NEG_INFINITY; nw];
    let mut ubw = vec![f64::INFINITY; nw];
    let offsets = model_offsets(ocp);
    let mut state_bounds = Vec::new();
    for sb in &ocp.bounds {
        let (ox, ou, oz) = offsets[sb.model];
        let mut apply = |idx: usize| {
            lbw[idx] = lbw[idx].max(sb.lower);
            ubw[idx] = ubw[idx].min(sb.upper);
        };
        match sb.part {
            Part::X => match cfg.method {
                Method::MultipleShooting => (0..=n).for_each(|k| apply(k * nx + ox + sb.index)),
                Method::SingleShooting => state_bounds.push((ox + sb.index, sb.lower, sb.upper)),
            },
            Part::U => (0..n).for_each(|k| apply(b.layout.u_offset(k) + ou + sb.index)),
            Part::Z => (0..n).for_each(|k| apply(b.layout.z_offset(k) + oz + sb.index)),
        }
    }
    // Single shooting turns state bounds into inequality rows.
    for (i, lo, hi) in state_bounds {
        for xk in &xs {
            let xi = xk.at(i)?;
            if lo > f64::NEG_INFINITY {
                h_rows.push(Expr::constant(lo).sub(&xi)?);
            }
            if hi < f64::INFINITY {
                h_rows.push(xi.sub(&Expr::constant(hi))?);
            }
        }
    }
    if let Some(i) = b.layout.t_offset() {
        let t0 = ocp.horizon.guess();
        lbw[i] = 0.1 * t0;
        ubw[i] = 10.0 * t0;
    }

    let wp = vec![w.clone(), p.clone()];
    let fdef = |name: &str, e: Expr| FunctionDef::new(name, wp.clone(), vec![e]);
    let gn = match (&lsq_lagrange, &lsq_mayer) {
        (Some(_), Some(_)) if !gn_res.is_empty() => Some(GaussNewton {
            residual: fdef("gn_res", Expr::concat(&gn_res))?,
            weight: fdef("gn_weight", Expr::concat(&gn_w))?,
        }),
        _ => None,
    };
    let hint = |pin: Option<(Expr, Vec<usize>)>,
                stage: usize|
     -> Result<Option<FunctionDef>, TranscriptionError> {
        match pin {
            Some((q, _)) => {
                let q = substitute(&q, &b.param_bindings(stage)?)?;
                Ok(Some(FunctionDef::new("hint", vec![p.clone()], vec![q])?))
            }
            None => Ok(None),
        }
    };
    let parts = NlpParts {
        f: fdef("f", objective)?,
        g: fdef("g", Expr::concat(&g_rows))?,
        h: fdef("h", Expr::concat(&h_rows))?,
        xtraj: fdef("xtraj", Expr::concat(&xs))?,
        lbw,
        ubw,
        x0_hint: hint(pinned0, 0)?,
        xf_hint: hint(pinned_f, n)?,
        gn,
        layout: b.layout.clone(),
        params: b.params.clone(),
    };
    Nlp::new(parts)
}

fn model_offsets(ocp: &CanonicalOcp) -> Vec<(usize, usize, usize)> {
    let (mut ox, mut ou, mut oz) = (0, 0, 0);
    ocp.models
        .iter()
        .map(|m| {
            let r = (ox, ou, oz);
            ox += m.model.nx();
            ou += m.model.nu();
            oz += m.model.nz();
            r
        })
        .collect()
}
