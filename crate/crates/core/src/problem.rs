//! Problem files: a YAML description of an optimal control problem that
//! names model files, parameters, objective terms and constraints in infix
//! text.
//!
//! ```yaml
//! name: pendulum
//! models:
//!   - {name: pendulum, file: pendulum.yaml}
//! horizon: {T: 2.0}
//! method: {type: multiple_shooting, N: 40, intg: rk, M: 1}
//! parameters:
//!   - {name: x_0, size: 2, value: [0.5, 0.0]}
//! objective:
//!   - integral: "pendulum.F^2"
//! constraints:
//!   - "at_t0(pendulum.x) == x_0"
//!   - "-2 <= pendulum.F <= 2"
//! solver: {type: sqpmethod, options: {max_iter: 50}}
//! ```
//!
//! Inside expressions `model.component` and `model.x`/`model.u`/`model.z`
//! name model variables, a bare component name works when unambiguous,
//! `t` is time and `T` the horizon length. `at_t0(e)` and `at_tf(e)` pin a
//! path expression to an end point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::expr::text::{parse_expr, parse_relation, RelOp, Scope};
use crate::expr::Expr;
use crate::model_io::{bind, parse_model, BoundModel, ModelError};
use crate::ocp::{Constraint, Horizon, ObjectiveTerm, OcpError, OcpSpec};
use crate::presets;
use crate::runtime::{export_bundle, Bundle, Instance, RuntimeError, Selector, Stage};
use crate::solver::{HessianMode, SqpOptions};
use crate::transcription::{IntegratorCfg, LagrangeRule, Method, Scheme, TranscriptionCfg};

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("problem file: {0}")]
    Yaml(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("model {file}: {source}")]
    Model { file: String, source: ModelError },
    #[error("{field}: {source}")]
    Ocp { field: String, source: OcpError },
    #[error("{field}: {message}")]
    Text { field: String, message: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl ProblemError {
    /// True when the failure is a missing or unreadable file.
    pub fn is_io(&self) -> bool {
        match self {
            ProblemError::Io { .. } => true,
            ProblemError::Model { source, .. } => source.is_io(),
            ProblemError::Runtime(e) => matches!(e, RuntimeError::Io(..)),
            _ => false,
        }
    }
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ProblemError {
    ProblemError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default)]
    pub name: Option<String>,
    pub models: Vec<ModelEntry>,
    pub horizon: HorizonEntry,
    pub method: MethodEntry,
    #[serde(default)]
    pub parameters: Vec<ParamEntry>,
    #[serde(default)]
    pub objective: Vec<BTreeMap<String, String>>,
    #[serde(default)]
    pub constraints: Vec<String>,
    #[serde(default)]
    pub solver: Option<SolverEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub file: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonEntry {
    #[serde(rename = "T", default)]
    pub fixed: Option<f64>,
    #[serde(default)]
    pub free_time: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    #[serde(rename = "type", default = "default_method")]
    pub kind: String,
    #[serde(rename = "N")]
    pub intervals: usize,
    #[serde(default = "default_intg")]
    pub intg: String,
    #[serde(rename = "M", default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_lagrange")]
    pub lagrange: String,
}

fn default_method() -> String {
    "multiple_shooting".into()
}
fn default_intg() -> String {
    "rk".into()
}
fn default_substeps() -> usize {
    1
}
fn default_lagrange() -> String {
    "integrator".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    #[serde(default = "default_substeps")]
    pub size: usize,
    #[serde(default)]
    pub value: Option<Vec<f64>>,
    #[serde(default)]
    pub stage_varying: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverEntry {
    #[serde(rename = "type", default = "default_solver")]
    pub kind: String,
    #[serde(default)]
    pub options: BTreeMap<String, serde_yaml::Value>,
}

fn default_solver() -> String {
    "sqpmethod".into()
}

/// Supplies model texts by file name.
pub trait ModelSource {
    fn load(&self, file: &str, name: &str) -> Result<BoundModel, ProblemError>;
}

/// Resolves model files relative to a directory.
pub struct DirSource(pub PathBuf);

impl ModelSource for DirSource {
    fn load(&self, file: &str, name: &str) -> Result<BoundModel, ProblemError> {
        let path = self.0.join(file);
        let wrap = |source| ProblemError::Model {
            file: file.to_string(),
            source,
        };
        let text = crate::model_io::read(&path).map_err(wrap)?;
        let spec = parse_model(&text).map_err(wrap)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        bind(&spec, name, &|f| crate::model_io::read(&dir.join(f))).map_err(wrap)
    }
}

/// The bundled example models, by file name.
pub struct PresetSource;

impl ModelSource for PresetSource {
    fn load(&self, file: &str, name: &str) -> Result<BoundModel, ProblemError> {
        let text = match file {
            "pendulum.yaml" => presets::PENDULUM_MODEL,
            "motor.yaml" => presets::MOTOR_MODEL,
            _ => {
                return Err(invalid(
                    "models",
                    format!("no bundled model named {file:?}"),
                ))
            }
        };
        let wrap = |source| ProblemError::Model {
            file: file.to_string(),
            source,
        };
        let spec = parse_model(text).map_err(wrap)?;
        bind(&spec, name, &|f| Err(ModelError::Missing(f.to_string()))).map_err(wrap)
    }
}

/// A fully built problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub ocp: OcpSpec,
    pub cfg: TranscriptionCfg,
    pub options: SqpOptions,
    /// Default values per parameter, already expanded to all stages.
    pub values: Vec<(String, Vec<f64>)>,
}

struct ProblemScope<'a> {
    ocp: &'a OcpSpec,
    params: &'a [(String, Expr)],
}

impl ProblemScope<'_> {
    fn model_part(&self, model: &str, comp: &str) -> Option<Expr> {
        let h = self.ocp.model(model)?;
        match comp {
            "x" => Some(h.x()),
            "u" => Some(h.u()),
            "z" => h.z(),
            _ => h.get(comp),
        }
    }
}

impl Scope for ProblemScope<'_> {
    fn lookup(&self, name: &str) -> Option<Expr> {
        if let Some((m, c)) = name.split_once('.') {
            return self.model_part(m, c);
        }
        if let Some((_, e)) = self.params.iter().find(|(n, _)| n == name) {
            return Some(e.clone());
        }
        match name {
            "t" => return Some(self.ocp.time()),
            "T" => return Some(self.ocp.horizon_expr()),
            _ => {}
        }
        let mut hits = self.ocp.models().filter_map(|m| m.component(name));
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    }

    fn call(&self, name: &str, args: &[Expr]) -> Option<Result<Expr, String>> {
        let f = match name {
            "at_t0" => OcpSpec::at_t0,
            "at_tf" => OcpSpec::at_tf,
            _ => return None,
        };
        Some(match args {
            [e] => f(self.ocp, e).map_err(|e| e.to_string()),
            _ => Err(format!("{name} takes one argument")),
        })
    }
}

fn text_err(field: String) -> impl FnOnce(crate::expr::text::TextError) -> ProblemError {
    move |e| ProblemError::Text {
        field,
        message: e.to_string(),
    }
}

fn ocp_err(field: String) -> impl FnOnce(OcpError) -> ProblemError {
    move |source| ProblemError::Ocp { field, source }
}

fn options_from(entry: &Option<SolverEntry>) -> Result<SqpOptions, ProblemError> {
    let mut o = SqpOptions::default();
    let Some(entry) = entry else { return Ok(o) };
    if entry.kind != "sqpmethod" {
        return Err(invalid(
            "solver.type",
            format!("unsupported solver {:?}", entry.kind),
        ));
    }
    for (key, v) in &entry.options {
        let field = format!("solver.options.{key}");
        let num = || {
            v.as_f64()
                .ok_or_else(|| invalid(&field, "expected a number"))
        };
        let count = || {
            v.as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| invalid(&field, "expected a non-negative integer"))
        };
        match key.as_str() {
            "max_iter" => o.max_iter = count()?,
            "max_ls" => o.max_ls = count()?,
            "tol_pr" => o.tol_pr = num()?,
            "tol_du" => o.tol_du = num()?,
            "reg_floor" => o.reg_floor = num()?,
            "armijo_c1" => o.armijo_c1 = num()?,
            "backtrack" => o.backtrack = num()?,
            "penalty_factor" => o.penalty_factor = num()?,
            "hessian" => {
                let s = v
                    .as_str()
                    .ok_or_else(|| invalid(&field, "expected a string"))?;
                o.hessian = HessianMode::from_name(s)
                    .ok_or_else(|| invalid(&field, format!("unknown mode {s:?}")))?;
            }
            _ => return Err(invalid(field, "unknown option")),
        }
    }
    o.validate().map_err(|r| invalid("solver.options", r))?;
    Ok(o)
}

fn cfg_from(m: &MethodEntry) -> Result<TranscriptionCfg, ProblemError> {
    let method = Method::from_name(&m.kind)
        .ok_or_else(|| invalid("method.type", format!("unknown method {:?}", m.kind)))?;
    let scheme = Scheme::from_name(&m.intg)
        .ok_or_else(|| invalid("method.intg", format!("unknown integrator {:?}", m.intg)))?;
    let lagrange = LagrangeRule::from_name(&m.lagrange)
        .ok_or_else(|| invalid("method.lagrange", format!("unknown rule {:?}", m.lagrange)))?;
    if m.intervals == 0 {
        return Err(invalid("method.N", "need at least one interval"));
    }
    if m.substeps == 0 {
        return Err(invalid("method.M", "need at least one sub-step"));
    }
    Ok(TranscriptionCfg {
        method,
        intervals: m.intervals,
        integrator: IntegratorCfg {
            scheme,
            substeps: m.substeps,
        },
        lagrange,
    })
}

/// Parses problem-file text; models come from `source`.
pub fn parse_problem(
    text: &str,
    default_name: &str,
    source: &dyn ModelSource,
) -> Result<Problem, ProblemError> {
    let file: ProblemFile =
        serde_yaml::from_str(text).map_err(|e| ProblemError::Yaml(e.to_string()))?;
    build(&file, default_name, source)
}

/// Reads a problem file; model paths resolve relative to its directory.
pub fn load_problem(path: &Path) -> Result<Problem, ProblemError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_problem(&text, &file_stem(&path.to_string_lossy()), &DirSource(dir))
}

/// The bundled pendulum swing problem.
pub fn pendulum_problem() -> Problem {
    parse_problem(presets::PENDULUM_PROBLEM, "pendulum", &PresetSource)
        .expect("bundled problem is valid")
}

/// The bundled motor position problem in deviation variables.
pub fn motor_problem() -> Problem {
    parse_problem(presets::MOTOR_PROBLEM, "motor", &PresetSource).expect("bundled problem is valid")
}

fn build(
    file: &ProblemFile,
    default_name: &str,
    source: &dyn ModelSource,
) -> Result<Problem, ProblemError> {
    let horizon = match (file.horizon.fixed, file.horizon.free_time) {
        (Some(t), None) => Horizon::Fixed(t),
        (None, Some(t)) => Horizon::FreeTime(t),
        _ => return Err(invalid("horizon", "give exactly one of `T` or `free_time`")),
    };
    let cfg = cfg_from(&file.method)?;
    let options = options_from(&file.solver)?;
    let mut ocp = OcpSpec::new(horizon).map_err(ocp_err("horizon".into()))?;
    if file.models.is_empty() {
        return Err(invalid("models", "at least one model is required"));
    }
    for (i, m) in file.models.iter().enumerate() {
        let name = match &m.name {
            Some(n) => n.clone(),
            None => file_stem(&m.file),
        };
        let bound = source.load(&m.file, &name)?;
        ocp.add_model(bound)
            .map_err(ocp_err(format!("models[{i}]")))?;
    }

    let stages = cfg.intervals + 1;
    let mut params = Vec::new();
    let mut values = Vec::new();
    for (i, p) in file.parameters.iter().enumerate() {
        let field = format!("parameters[{i}]");
        let e = ocp
            .parameter(&p.name, p.size, p.stage_varying)
            .map_err(ocp_err(field.clone()))?;
        let v = match &p.value {
            None => vec![0.0; p.size],
            Some(v) => v.clone(),
        };
        let full = expand_value(&v, p.size, if p.stage_varying { stages } else { 1 })
            .map_err(|r| invalid(format!("{field}.value"), r))?;
        params.push((p.name.clone(), e));
        values.push((p.name.clone(), full));
    }

    let mut objective = Vec::new();
    let mut constraints = Vec::new();
    {
        let scope = ProblemScope {
            ocp: &ocp,
            params: &params,
        };
        for (i, term) in file.objective.iter().enumerate() {
            let field = format!("objective[{i}]");
            let (kind, src) = match term.iter().collect::<Vec<_>>()[..] {
                [(k, s)] => (k.as_str(), s),
                _ => {
                    return Err(invalid(
                        field,
                        "each term needs exactly one of integral, at_t0, at_tf",
                    ))
                }
            };
            let e = parse_expr(src, &scope).map_err(text_err(field.clone()))?;
            let t = match kind {
                "integral" => ObjectiveTerm::integral(e),
                "at_t0" => ObjectiveTerm::at_t0(e),
                "at_tf" => ObjectiveTerm::at_tf(e),
                other => return Err(invalid(field, format!("unknown term kind {other:?}"))),
            };
            objective.push((field, t));
        }
        for (i, src) in file.constraints.iter().enumerate() {
            let field = format!("constraints[{i}]");
            let r = parse_relation(src, &scope).map_err(text_err(field.clone()))?;
            let mut t = r.terms.into_iter();
            let (a, b) = (t.next().expect("two sides"), t.next().expect("two sides"));
            let c = match (&r.ops[..], t.next()) {
                ([RelOp::Eq], None) => Constraint::eq(a, b),
                ([RelOp::Le], None) => Constraint::le(a, b),
                ([RelOp::Ge], None) => Constraint::le(b, a),
                ([RelOp::Le, RelOp::Le], Some(c)) => Constraint::between(a, b, c),
                ([RelOp::Ge, RelOp::Ge], Some(c)) => Constraint::between(c, b, a),
                _ => unreachable!("parse_relation validates chains"),
            };
            constraints.push((field, c));
        }
    }
    for (field, t) in objective {
        ocp.add_objective(t).map_err(ocp_err(field))?;
    }
    for (field, c) in constraints {
        ocp.subject_to(c).map_err(ocp_err(field))?;
    }

    Ok(Problem {
        name: file
            .name
            .clone()
            .unwrap_or_else(|| default_name.to_string()),
        ocp,
        cfg,
        options,
        values,
    })
}

/// A value list of `size` entries repeats over all stages; otherwise it
/// must hold `size * stages` entries, stage-major.
fn expand_value(v: &[f64], size: usize, stages: usize) -> Result<Vec<f64>, String> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    if v.len() == size {
        Ok(v.repeat(stages))
    } else if v.len() == size * stages {
        Ok(v.to_vec())
    } else if stages == 1 {
        Err(format!("expected {size} values, got {}", v.len()))
    } else {
        Err(format!(
            "expected {size} or {} values, got {}",
            size * stages,
            v.len()
        ))
    }
}

fn file_stem(file: &str) -> String {
    let base = Path::new(file)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(file);
    base.split('.').next().unwrap_or(base).to_string()
}

/// Parses `name=v0,v1,...`.
pub fn parse_assignment(s: &str) -> Result<(String, Vec<f64>), String> {
    let (name, rest) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=values, got {s:?}"))?;
    let vals = rest
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number {t:?} in {s:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), vals))
}

impl Problem {
    /// Replaces a parameter's default. A value of the parameter's size is
    /// repeated over all stages.
    pub fn set_value(&mut self, name: &str, v: &[f64]) -> Result<(), ProblemError> {
        let p = self
            .ocp
            .param(name)
            .ok_or_else(|| invalid("param", format!("unknown parameter {name:?}")))?;
        let stages = if p.stage_varying {
            self.cfg.intervals + 1
        } else {
            1
        };
        let full =
            expand_value(v, p.len, stages).map_err(|r| invalid(format!("param {name}"), r))?;
        let slot = self
            .values
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("values mirror parameters");
        slot.1 = full;
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&[f64]> {
        self.values
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn bundle(&self) -> Result<Bundle, ProblemError> {
        let can = self.ocp.to_canonical().map_err(ocp_err("problem".into()))?;
        Ok(export_bundle(
            &self.name,
            &can,
            self.cfg,
            self.options.clone(),
        )?)
    }

    /// A runtime instance over `bundle` with this problem's parameter
    /// values loaded.
    pub fn instance(&self, bundle: Arc<Bundle>) -> Result<Instance, ProblemError> {
        let mut inst = Instance::new(bundle);
        self.load_values(&mut inst)?;
        Ok(inst)
    }

    pub fn load_values(&self, inst: &mut Instance) -> Result<(), ProblemError> {
        for (name, v) in &self.values {
            inst.set(&Selector::new(name, Stage::Everywhere), v)?;
        }
        Ok(())
    }
}
