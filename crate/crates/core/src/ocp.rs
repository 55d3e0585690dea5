//! Optimal control problem builder and its canonical form.
//!
//! Users attach models, declare parameters and add objective terms and
//! constraints in terms of the model symbols. [`OcpSpec::to_canonical`]
//! classifies everything into Lagrange/Mayer terms, boundary rows, path
//! rows and simple variable bounds.

use thiserror::Error;

use crate::expr::{self, graph_text, is_identifier, substitute, sym, Expr, ExprError, Node};
use crate::model_io::{BoundModel, Part};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error("model {0} already added")]
    DuplicateModel(String),
    #[error("name {0} collides with an existing model or parameter")]
    NameCollision(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("objective term must be scalar, has length {0}")]
    NonScalarObjective(usize),
    #[error("terminal expressions cannot reference controls or algebraic states")]
    TerminalControl,
    #[error("unknown symbol {0} (not a model variable, parameter, t or T)")]
    UnknownSymbol(String),
    #[error("unclassifiable term: {0}")]
    Unclassifiable(String),
    #[error("problem has no model")]
    NoModel,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Fixed(f64),
    /// Free end time with an initial guess.
    FreeTime(f64),
}

impl Horizon {
    pub fn guess(self) -> f64 {
        match self {
            Horizon::Fixed(t) | Horizon::FreeTime(t) => t,
        }
    }

    pub fn is_free(self) -> bool {
        matches!(self, Horizon::FreeTime(_))
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub len: usize,
    pub stage_varying: bool,
    pub symbol: Expr,
    /// Stage-0 and stage-N stand-ins used by anchored expressions.
    pub at_t0: Option<Expr>,
    pub at_tf: Option<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjectiveKind {
    Integral,
    AtT0,
    AtTf,
}

#[derive(Debug, Clone)]
pub struct ObjectiveTerm {
    pub kind: ObjectiveKind,
    pub expr: Expr,
}

impl ObjectiveTerm {
    /// Lagrange term, integrated over the horizon.
    pub fn integral(expr: Expr) -> Self {
        ObjectiveTerm {
            kind: ObjectiveKind::Integral,
            expr,
        }
    }

    /// Mayer term evaluated at the initial time.
    pub fn at_t0(expr: Expr) -> Self {
        ObjectiveTerm {
            kind: ObjectiveKind::AtT0,
            expr,
        }
    }

    /// Mayer term evaluated at the final time.
    pub fn at_tf(expr: Expr) -> Self {
        ObjectiveTerm {
            kind: ObjectiveKind::AtTf,
            expr,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Constraint {
    /// `lhs <= rhs`
    Le(Expr, Expr),
    /// `lhs == rhs`
    Eq(Expr, Expr),
    /// `lower <= expr <= upper`
    Between(Expr, Expr, Expr),
}

impl Constraint {
    pub fn le(lhs: Expr, rhs: Expr) -> Self {
        Constraint::Le(lhs, rhs)
    }

    pub fn ge(lhs: Expr, rhs: Expr) -> Self {
        Constraint::Le(rhs, lhs)
    }

    pub fn eq(lhs: Expr, rhs: Expr) -> Self {
        Constraint::Eq(lhs, rhs)
    }

    pub fn between(lower: Expr, expr: Expr, upper: Expr) -> Self {
        Constraint::Between(lower, expr, upper)
    }
}

/// Symbols belonging to one attached model, including its anchored copies.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub model: BoundModel,
    pub x_t0: Expr,
    pub u_t0: Expr,
    pub z_t0: Option<Expr>,
    pub x_tf: Expr,
}

/// Handle returned by [`OcpSpec::add_model`].
#[derive(Debug, Clone)]
pub struct ModelHandle {
    model: BoundModel,
}

impl ModelHandle {
    pub fn name(&self) -> &str {
        &self.model.name
    }
    pub fn nx(&self) -> usize {
        self.model.nx()
    }
    pub fn nu(&self) -> usize {
        self.model.nu()
    }
    pub fn nz(&self) -> usize {
        self.model.nz()
    }
    pub fn x(&self) -> Expr {
        self.model.x.clone()
    }
    pub fn u(&self) -> Expr {
        self.model.u.clone()
    }
    pub fn z(&self) -> Option<Expr> {
        self.model.z.clone()
    }
    /// A named component such as `"dphi"` or `"F"`.
    pub fn get(&self, component: &str) -> Option<Expr> {
        self.model.component(component)
    }
}

/// An equality row `lhs == rhs`.
#[derive(Debug, Clone)]
pub struct EqRow {
    pub lhs: Expr,
    pub rhs: Expr,
}

impl EqRow {
    pub fn residual(&self) -> Expr {
        self.lhs
            .sub(&self.rhs)
            .expect("lengths checked on insertion")
    }
}

#[derive(Debug, Clone)]
pub struct PathRow {
    /// Residual, `== 0` or `<= 0` depending on the slot.
    pub expr: Expr,
    /// Depends on states (and parameters/time) only; imposed at node N too.
    pub state_only: bool,
}

/// Constant bound on one scalar decision variable at every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleBound {
    pub model: usize,
    pub part: Part,
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// The canonical problem: every user term classified into one slot.
#[derive(Debug, Clone)]
pub struct CanonicalOcp {
    pub horizon: Horizon,
    pub models: Vec<ModelVars>,
    pub params: Vec<Parameter>,
    pub t: Expr,
    pub horizon_expr: Expr,
    /// Integral terms, in canonical order.
    pub lagrange: Vec<Expr>,
    pub mayer: Vec<Expr>,
    pub boundary_eq: Vec<EqRow>,
    /// Rows `<= 0`.
    pub boundary_ineq: Vec<Expr>,
    pub path_eq: Vec<PathRow>,
    pub path_ineq: Vec<PathRow>,
    pub bounds: Vec<SimpleBound>,
}

impl CanonicalOcp {
    pub fn nx(&self) -> usize {
        self.models.iter().map(|m| m.model.nx()).sum()
    }
    pub fn nu(&self) -> usize {
        self.models.iter().map(|m| m.model.nu()).sum()
    }
    pub fn nz(&self) -> usize {
        self.models.iter().map(|m| m.model.nz()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    horizon: Horizon,
    models: Vec<ModelVars>,
    params: Vec<Parameter>,
    t: Expr,
    horizon_expr: Expr,
    objective: Vec<ObjectiveTerm>,
    constraints: Vec<Constraint>,
}

#[derive(Clone, Copy, PartialEq)]
enum Class {
    Path,
    Control,
    Algebraic,
    Anchored,
    Neutral,
}

impl OcpSpec {
    pub fn new(horizon: Horizon) -> Result<Self, OcpError> {
        let t = horizon.guess();
        if !(t > 0.0 && t.is_finite()) {
            return Err(OcpError::InvalidHorizon(t));
        }
        let horizon_expr = match horizon {
            Horizon::Fixed(t) => Expr::constant(t),
            Horizon::FreeTime(_) => sym("T", 1)?,
        };
        Ok(OcpSpec {
            horizon,
            models: Vec::new(),
            params: Vec::new(),
            t: sym("t", 1)?,
            horizon_expr,
            objective: Vec::new(),
            constraints: Vec::new(),
        })
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// Time symbol usable in path expressions.
    pub fn time(&self) -> Expr {
        self.t.clone()
    }

    /// Horizon length: a constant for fixed horizons, a decision symbol
    /// under free time.
    pub fn horizon_expr(&self) -> Expr {
        self.horizon_expr.clone()
    }

    pub fn models(&self) -> impl Iterator<Item = &BoundModel> {
        self.models.iter().map(|m| &m.model)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn objective_terms(&self) -> &[ObjectiveTerm] {
        &self.objective
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn name_taken(&self, name: &str) -> bool {
        self.models.iter().any(|m| m.model.name == name)
            || self.params.iter().any(|p| p.name == name)
            || name == "t"
            || name == "T"
    }

    pub fn add_model(&mut self, model: BoundModel) -> Result<ModelHandle, OcpError> {
        if self.models.iter().any(|m| m.model.name == model.name) {
            return Err(OcpError::DuplicateModel(model.name));
        }
        if self.name_taken(&model.name) {
            return Err(OcpError::NameCollision(model.name));
        }
        let n = &model.name;
        let vars = ModelVars {
            x_t0: sym(&format!("t0.{n}.x"), model.nx())?,
            u_t0: sym(&format!("t0.{n}.u"), model.nu())?,
            z_t0: match model.nz() {
                0 => None,
                nz => Some(sym(&format!("t0.{n}.z"), nz)?),
            },
            x_tf: sym(&format!("tf.{n}.x"), model.nx())?,
            model: model.clone(),
        };
        self.models.push(vars);
        Ok(ModelHandle { model })
    }

    pub fn model(&self, name: &str) -> Option<ModelHandle> {
        self.models
            .iter()
            .find(|m| m.model.name == name)
            .map(|m| ModelHandle {
                model: m.model.clone(),
            })
    }

    pub fn parameter(
        &mut self,
        name: &str,
        len: usize,
        stage_varying: bool,
    ) -> Result<Expr, OcpError> {
        let bad = |reason: &str| OcpError::InvalidParameter {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if !is_identifier(name) || name.contains('.') {
            return Err(bad("invalid identifier"));
        }
        if len == 0 {
            return Err(bad("length must be at least 1"));
        }
        if self.name_taken(name) {
            return Err(OcpError::NameCollision(name.to_string()));
        }
        let symbol = sym(name, len)?;
        let (at_t0, at_tf) = if stage_varying {
            (
                Some(sym(&format!("t0.{name}"), len)?),
                Some(sym(&format!("tf.{name}"), len)?),
            )
        } else {
            (None, None)
        };
        self.params.push(Parameter {
            name: name.to_string(),
            len,
            stage_varying,
            symbol: symbol.clone(),
            at_t0,
            at_tf,
        });
        Ok(symbol)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// `e` evaluated at the initial time.
    pub fn at_t0(&self, e: &Expr) -> Result<Expr, OcpError> {
        let mut b: Vec<(Expr, Expr)> = vec![(self.t.clone(), Expr::constant(0.0))];
        for m in &self.models {
            b.push((m.model.x.clone(), m.x_t0.clone()));
            b.push((m.model.u.clone(), m.u_t0.clone()));
            if let (Some(z), Some(z0)) = (&m.model.z, &m.z_t0) {
                b.push((z.clone(), z0.clone()));
            }
        }
        for p in &self.params {
            if let Some(s) = &p.at_t0 {
                b.push((p.symbol.clone(), s.clone()));
            }
        }
        Ok(substitute(e, &b)?)
    }

    /// `e` evaluated at the final time; controls and algebraic states have
    /// no value there.
    pub fn at_tf(&self, e: &Expr) -> Result<Expr, OcpError> {
        let mut b: Vec<(Expr, Expr)> = vec![(self.t.clone(), self.horizon_expr.clone())];
        for m in &self.models {
            let mut forbidden = vec![m.model.u.clone()];
            forbidden.extend(m.model.z.clone());
            if e.depends_on(&forbidden) {
                return Err(OcpError::TerminalControl);
            }
            b.push((m.model.x.clone(), m.x_tf.clone()));
        }
        for p in &self.params {
            if let Some(s) = &p.at_tf {
                b.push((p.symbol.clone(), s.clone()));
            }
        }
        Ok(substitute(e, &b)?)
    }

    pub fn add_objective(&mut self, term: ObjectiveTerm) -> Result<(), OcpError> {
        if term.expr.len() != 1 {
            return Err(OcpError::NonScalarObjective(term.expr.len()));
        }
        self.check_closed(&term.expr)?;
        let class = self.classify(&term.expr)?;
        if class.contains(&Class::Anchored) {
            return Err(OcpError::Unclassifiable(
                "objective terms take path expressions; the term kind selects the time point"
                    .into(),
            ));
        }
        if term.kind == ObjectiveKind::AtTf {
            self.at_tf(&term.expr)?;
        }
        self.objective.push(term);
        Ok(())
    }

    pub fn subject_to(&mut self, c: Constraint) -> Result<(), OcpError> {
        let sides: Vec<&Expr> = match &c {
            Constraint::Le(a, b) | Constraint::Eq(a, b) => vec![a, b],
            Constraint::Between(l, e, u) => vec![l, e, u],
        };
        for s in &sides {
            self.check_closed(s)?;
        }
        // Shape check: all sides broadcast together.
        let mut len = 1;
        for s in &sides {
            len = expr::broadcast_len(len, s.len()).ok_or_else(|| {
                ExprError::LengthMismatch(format!(
                    "constraint sides of lengths {len} and {}",
                    s.len()
                ))
            })?;
        }
        let mut all = Vec::new();
        for side in &sides {
            all.extend(self.classify(side)?);
        }
        let has = |c: Class| all.contains(&c);
        if has(Class::Anchored)
            && (has(Class::Path) || has(Class::Control) || has(Class::Algebraic))
        {
            return Err(OcpError::Unclassifiable(
                "boundary constraint mixes t0/tf values with path variables".into(),
            ));
        }
        if has(Class::Algebraic) {
            return Err(OcpError::Unclassifiable(
                "algebraic states cannot appear in path constraints".into(),
            ));
        }
        self.constraints.push(c);
        Ok(())
    }

    fn known_symbols(&self) -> Vec<(Expr, Class)> {
        let mut out = vec![
            (self.t.clone(), Class::Path),
            (self.horizon_expr.clone(), Class::Neutral),
        ];
        for m in &self.models {
            out.push((m.model.x.clone(), Class::Path));
            out.push((m.model.u.clone(), Class::Control));
            if let Some(z) = &m.model.z {
                out.push((z.clone(), Class::Algebraic));
            }
            out.push((m.x_t0.clone(), Class::Anchored));
            out.push((m.u_t0.clone(), Class::Anchored));
            if let Some(z) = &m.z_t0 {
                out.push((z.clone(), Class::Anchored));
            }
            out.push((m.x_tf.clone(), Class::Anchored));
        }
        for p in &self.params {
            let c = if p.stage_varying {
                Class::Path
            } else {
                Class::Neutral
            };
            out.push((p.symbol.clone(), c));
            for s in p.at_t0.iter().chain(&p.at_tf) {
                out.push((s.clone(), Class::Anchored));
            }
        }
        out
    }

    fn check_closed(&self, e: &Expr) -> Result<(), OcpError> {
        let known = self.known_symbols();
        for s in e.free_symbols() {
            if !known.iter().any(|(k, _)| k.ptr_eq(&s)) {
                return Err(OcpError::UnknownSymbol(
                    s.symbol_name().unwrap_or("?").to_string(),
                ));
            }
        }
        Ok(())
    }

    fn classify(&self, e: &Expr) -> Result<Vec<Class>, OcpError> {
        let known = self.known_symbols();
        let mut out = Vec::new();
        for s in e.free_symbols() {
            let (_, c) = known.iter().find(|(k, _)| k.ptr_eq(&s)).ok_or_else(|| {
                OcpError::UnknownSymbol(s.symbol_name().unwrap_or("?").to_string())
            })?;
            out.push(*c);
        }
        Ok(out)
    }

    /// Recognizes a plain model variable (a whole symbol or a slice of one)
    /// and returns `(model, part, first index, length)`.
    fn plain_variable(&self, e: &Expr) -> Option<(usize, Part, usize, usize)> {
        let (base, start) = match e.node() {
            Node::Symbol(_) => (e.clone(), 0),
            Node::Index(a, s) if a.is_symbol() => (a.clone(), *s),
            _ => return None,
        };
        for (mi, m) in self.models.iter().enumerate() {
            let parts = [
                (Part::X, Some(&m.model.x)),
                (Part::U, Some(&m.model.u)),
                (Part::Z, m.model.z.as_ref()),
            ];
            for (part, v) in parts {
                if v.is_some_and(|v| v.ptr_eq(&base)) {
                    return Some((mi, part, start, e.len()));
                }
            }
        }
        None
    }

    fn constant_side(e: &Expr, n: usize) -> Option<Vec<f64>> {
        let v = e.as_const()?;
        match v.len() {
            1 => Some(vec![v[0]; n]),
            l if l == n => Some(v.to_vec()),
            _ => None,
        }
    }

    /// Normalizes the specification into the canonical record.
    pub fn to_canonical(&self) -> Result<CanonicalOcp, OcpError> {
        if self.models.is_empty() {
            return Err(OcpError::NoModel);
        }
        let mut integral = Vec::new();
        let mut mayer = Vec::new();
        let mut sorted: Vec<(ObjectiveKind, String, &ObjectiveTerm)> = self
            .objective
            .iter()
            .map(|t| (t.kind, graph_text(std::slice::from_ref(&t.expr)), t))
            .collect();
        // A canonical order makes the objective independent of insertion order.
        sorted.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        for (kind, _, term) in sorted {
            match kind {
                ObjectiveKind::Integral => integral.push(term.expr.clone()),
                ObjectiveKind::AtT0 => mayer.push(self.at_t0(&term.expr)?),
                ObjectiveKind::AtTf => mayer.push(self.at_tf(&term.expr)?),
            }
        }

        let mut boundary_eq = Vec::new();
        let mut boundary_ineq = Vec::new();
        let mut path_eq = Vec::new();
        let mut path_ineq = Vec::new();
        let mut bounds = Vec::new();
        for c in &self.constraints {
            let sides: Vec<&Expr> = match c {
                Constraint::Le(a, b) | Constraint::Eq(a, b) => vec![a, b],
                Constraint::Between(l, e, u) => vec![l, e, u],
            };
            let classes: Vec<Class> = sides
                .iter()
                .map(|s| self.classify(s))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();
            let path = classes
                .iter()
                .any(|c| matches!(c, Class::Path | Class::Control));
            let state_only = !classes.contains(&Class::Control);

            if path {
                if let Some(bs) = self.as_bounds(c) {
                    bounds.extend(bs);
                    continue;
                }
            }
            let row = |e: Expr| PathRow {
                expr: e,
                state_only,
            };
            match (c, path) {
                (Constraint::Eq(a, b), true) => path_eq.push(row(a.sub(b)?)),
                (Constraint::Eq(a, b), false) => boundary_eq.push(EqRow {
                    lhs: a.clone(),
                    rhs: b.clone(),
                }),
                (Constraint::Le(a, b), _) => {
                    let e = a.sub(b)?;
                    if path {
                        path_ineq.push(row(e));
                    } else {
                        boundary_ineq.push(e);
                    }
                }
                (Constraint::Between(l, e, u), _) => {
                    let unbounded = |side: &Expr, inf: f64| {
                        side.as_const().is_some_and(|v| v.iter().all(|x| *x == inf))
                    };
                    let mut rows = Vec::new();
                    if !unbounded(l, f64::NEG_INFINITY) {
                        rows.push(l.sub(e)?);
                    }
                    if !unbounded(u, f64::INFINITY) {
                        rows.push(e.sub(u)?);
                    }
                    for r in rows {
                        if path {
                            path_ineq.push(row(r));
                        } else {
                            boundary_ineq.push(r);
                        }
                    }
                }
            }
        }

        Ok(CanonicalOcp {
            horizon: self.horizon,
            models: self.models.clone(),
            params: self.params.clone(),
            t: self.t.clone(),
            horizon_expr: self.horizon_expr.clone(),
            lagrange: integral,
            mayer,
            boundary_eq,
            boundary_ineq,
            path_eq,
            path_ineq,
            bounds,
        })
    }

    fn as_bounds(&self, c: &Constraint) -> Option<Vec<SimpleBound>> {
        let (lo, e, hi) = match c {
            Constraint::Le(a, b) => {
                if self.plain_variable(a).is_some() {
                    (None, a, Some(b))
                } else {
                    (Some(a), b, None)
                }
            }
            Constraint::Between(l, e, u) => (Some(l), e, Some(u)),
            Constraint::Eq(..) => return None,
        };
        let (model, part, start, n) = self.plain_variable(e)?;
        let lo = match lo {
            Some(l) => Self::constant_side(l, n)?,
            None => vec![f64::NEG_INFINITY; n],
        };
        let hi = match hi {
            Some(h) => Self::constant_side(h, n)?,
            None => vec![f64::INFINITY; n],
        };
        Some(
            (0..n)
                .map(|i| SimpleBound {
                    model,
                    part,
                    index: start + i,
                    lower: lo[i],
                    upper: hi[i],
                })
                .collect(),
        )
    }
}
