//! YAML system-model files.
//!
//! ```yaml
//! equations:
//!   inline:
//!     ode:
//!       phi: dphi
//!       dphi: -(g/L)*sin(phi) - c*dphi + F/(m*L^2)
//! differential_states:
//!   - name: phi
//!   - name: dphi
//! controls:
//!   - name: F
//! constants:
//!   inline:
//!     L: 2
//! ```
//!
//! Equations may instead reference a serialized function with
//! `external: {type: serialized_function, file_name: ode.fns}`; the function
//! signature is `(x, u[, z]) -> (xdot[, alg])`.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::expr::text::{parse_expr, Scope};
use crate::expr::{self, is_identifier, substitute_many, sym, Expr};

/// Accepted `type` tags for external equations. The second is the tag used
/// by the original toolchain's examples.
pub const EXTERNAL_TYPES: [&str; 2] = ["serialized_function", "casadi_serialized"];

const KNOWN_KEYS: [&str; 6] = [
    "name",
    "equations",
    "differential_states",
    "algebraic_states",
    "controls",
    "constants",
];

const FUNCTIONS: [&str; 6] = ["sin", "cos", "tan", "exp", "log", "sqrt"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("YAML syntax: {0}")]
    Yaml(String),
    #[error("model file must contain exactly one YAML document")]
    MultiDocument,
    #[error("YAML anchors and aliases are not supported (line {0})")]
    Alias(usize),
    #[error("model file must be a YAML mapping")]
    NotMapping,
    #[error("missing {0}")]
    Missing(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("duplicate name {0}")]
    Duplicate(String),
    #[error("differential state {0} has no ode entry")]
    MissingOde(String),
    #[error("ode entry {0} is not a declared differential state")]
    UnknownOde(String),
    #[error("expected {expected} algebraic equations, found {found}")]
    AlgCount { expected: usize, found: usize },
    #[error("undeclared name {name} in {equation}")]
    UndeclaredName { name: String, equation: String },
    #[error("{equation}, column {column}: {message}")]
    Parse {
        equation: String,
        column: usize,
        message: String,
    },
    #[error("external function {file}: {reason}")]
    External { file: String, reason: String },
}

impl ModelError {
    /// True for errors caused by the file system rather than file content.
    pub fn is_io(&self) -> bool {
        matches!(self, ModelError::Io { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Equations {
    Inline {
        /// One entry per differential state, in declaration order.
        ode: Vec<(String, String)>,
        alg: Vec<String>,
    },
    External {
        type_tag: String,
        file_name: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: Option<String>,
    pub differential_states: Vec<String>,
    pub algebraic_states: Vec<String>,
    pub controls: Vec<String>,
    pub constants: Vec<(String, f64)>,
    pub equations: Equations,
    /// Non-fatal diagnostics (unknown keys).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    X,
    U,
    Z,
}

/// A model whose equations are expressions over its own state, control and
/// algebraic symbols.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub name: String,
    pub x: Expr,
    pub u: Expr,
    pub z: Option<Expr>,
    /// State derivative, length `nx`.
    pub rhs: Expr,
    /// Algebraic residual, length `nz` (empty without algebraic states).
    pub alg: Expr,
    components: Vec<(String, Part, usize)>,
}

impl BoundModel {
    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn nu(&self) -> usize {
        self.u.len()
    }

    pub fn nz(&self) -> usize {
        self.z.as_ref().map_or(0, Expr::len)
    }

    /// Component names in declaration order: states, controls, algebraic.
    pub fn components(&self) -> impl Iterator<Item = (&str, Part, usize)> {
        self.components.iter().map(|(n, p, i)| (n.as_str(), *p, *i))
    }

    pub fn lookup(&self, component: &str) -> Option<(Part, usize)> {
        self.components
            .iter()
            .find(|(n, _, _)| n == component)
            .map(|(_, p, i)| (*p, *i))
    }

    /// Scalar expression for a named component.
    pub fn component(&self, component: &str) -> Option<Expr> {
        let (part, i) = self.lookup(component)?;
        let v = match part {
            Part::X => &self.x,
            Part::U => &self.u,
            Part::Z => self.z.as_ref()?,
        };
        v.at(i).ok()
    }

    pub fn state_names(&self) -> Vec<&str> {
        self.names_of(Part::X)
    }

    pub fn control_names(&self) -> Vec<&str> {
        self.names_of(Part::U)
    }

    pub fn algebraic_names(&self) -> Vec<&str> {
        self.names_of(Part::Z)
    }

    fn names_of(&self, part: Part) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| c.1 == part)
            .map(|c| c.0.as_str())
            .collect()
    }
}

fn check_yaml_subset(text: &str) -> Result<Value, ModelError> {
    for (i, line) in text.lines().enumerate() {
        let body = line.split(" #").next().unwrap_or("").trim_start();
        if body.starts_with('#') {
            continue;
        }
        let value_start = body
            .strip_prefix("- ")
            .map(str::trim_start)
            .into_iter()
            .chain(body.split_once(": ").map(|(_, v)| v.trim_start()))
            .chain(std::iter::once(body));
        for v in value_start {
            if v.starts_with('&') || v.starts_with('*') || v.starts_with("<<:") {
                return Err(ModelError::Alias(i + 1));
            }
        }
    }
    let mut docs = Vec::new();
    for doc in serde_yaml::Deserializer::from_str(text) {
        let v = serde::Deserialize::deserialize(doc)
            .map_err(|e: serde_yaml::Error| ModelError::Yaml(e.to_string()))?;
        docs.push(v);
        if docs.len() > 1 {
            return Err(ModelError::MultiDocument);
        }
    }
    docs.pop().ok_or(ModelError::NotMapping)
}

fn key<'a>(m: &'a Mapping, k: &str) -> Option<&'a Value> {
    m.get(Value::String(k.to_string()))
}

fn invalid(field: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn as_mapping<'a>(v: &'a Value, field: &str) -> Result<&'a Mapping, ModelError> {
    match v {
        Value::Mapping(m) => Ok(m),
        Value::Null => Err(ModelError::Missing(format!("{field} contents"))),
        _ => Err(invalid(field, "must be a mapping")),
    }
}

fn scalar_text(v: &Value, field: &str) -> Result<String, ModelError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Null => Err(ModelError::Missing(field.to_string())),
        _ => Err(invalid(field, "must be a scalar")),
    }
}

fn name_list(m: &Mapping, field: &str, required: bool) -> Result<Vec<String>, ModelError> {
    let v = match key(m, field) {
        None | Some(Value::Null) if required => return Err(ModelError::Missing(field.to_string())),
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(v) => v,
    };
    let Value::Sequence(items) = v else {
        return Err(invalid(field, "must be a list of {name: ...} entries"));
    };
    if required && items.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let at = format!("{field}[{i}]");
            let name = match item {
                Value::Mapping(e) => {
                    key(e, "name").ok_or_else(|| ModelError::Missing(format!("{at}.name")))?
                }
                Value::Null => return Err(ModelError::Missing(format!("{at}.name"))),
                _ => return Err(invalid(&at, "must be a mapping with a name")),
            };
            let name = scalar_text(name, &format!("{at}.name"))?;
            if !is_identifier(&name) || name.contains('.') {
                return Err(invalid(&at, format!("invalid name {name:?}")));
            }
            Ok(name)
        })
        .collect()
}

/// Identifiers referenced by an equation, skipping function names. Lexical
/// only, so it also works on equation text that does not parse.
fn referenced_names(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            // Skip numeric literals including exponents like 1e-3.
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.') {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let mut j = i;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            let is_call = chars.get(j) == Some(&'(');
            if !(is_call && FUNCTIONS.contains(&word.as_str())) && !out.contains(&word) {
                out.push(word);
            }
            continue;
        }
        i += 1;
    }
    out
}

/// Parses and validates a model document. Expression text is checked for
/// undeclared names but not otherwise parsed until [`bind`].
pub fn parse_model(text: &str) -> Result<ModelSpec, ModelError> {
    let root = check_yaml_subset(text)?;
    let Value::Mapping(m) = &root else {
        return Err(ModelError::NotMapping);
    };
    let mut warnings = Vec::new();
    for k in m.keys() {
        let name = k.as_str().unwrap_or("<non-string key>");
        if !KNOWN_KEYS.contains(&name) {
            let w = format!("unknown top-level key {name:?} ignored");
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let name = match key(m, "name") {
        None => None,
        Some(v) => {
            let n = scalar_text(v, "name")?;
            if !is_identifier(&n) || n.contains('.') {
                return Err(invalid("name", format!("invalid model name {n:?}")));
            }
            Some(n)
        }
    };

    let eq = key(m, "equations").ok_or_else(|| ModelError::Missing("equations".into()))?;
    let eq = as_mapping(eq, "equations")?;
    let differential_states = name_list(m, "differential_states", true)?;
    let controls = name_list(m, "controls", true)?;
    let algebraic_states = name_list(m, "algebraic_states", false)?;

    let mut constants = Vec::new();
    if let Some(c) = key(m, "constants") {
        let c = as_mapping(c, "constants")?;
        let inline =
            key(c, "inline").ok_or_else(|| ModelError::Missing("constants.inline".into()))?;
        for (k, v) in as_mapping(inline, "constants.inline")? {
            let k = k
                .as_str()
                .filter(|k| is_identifier(k) && !k.contains('.'))
                .ok_or_else(|| {
                    invalid("constants.inline", format!("invalid constant name {k:?}"))
                })?;
            let value = v
                .as_f64()
                .ok_or_else(|| invalid(&format!("constants.inline.{k}"), "must be a number"))?;
            constants.push((k.to_string(), value));
        }
    }

    let mut seen = std::collections::HashSet::new();
    for n in differential_states
        .iter()
        .chain(&controls)
        .chain(&algebraic_states)
        .chain(constants.iter().map(|(n, _)| n))
    {
        if !seen.insert(n.as_str()) {
            return Err(ModelError::Duplicate(n.clone()));
        }
    }

    let equations = match (key(eq, "inline"), key(eq, "external")) {
        (Some(_), Some(_)) => {
            return Err(invalid("equations", "inline and external are exclusive"))
        }
        (None, None) => {
            return Err(ModelError::Missing(
                "equations.inline or equations.external".into(),
            ))
        }
        (Some(inline), None) => {
            let inline = as_mapping(inline, "equations.inline")?;
            let ode_v = key(inline, "ode")
                .ok_or_else(|| ModelError::Missing("equations.inline.ode".into()))?;
            let ode_m = as_mapping(ode_v, "equations.inline.ode")?;
            let mut ode_entries = Vec::new();
            for (k, v) in ode_m {
                let k = k
                    .as_str()
                    .ok_or_else(|| invalid("equations.inline.ode", "keys must be state names"))?;
                if !differential_states.iter().any(|s| s == k) {
                    return Err(ModelError::UnknownOde(k.to_string()));
                }
                ode_entries.push((
                    k.to_string(),
                    scalar_text(v, &format!("equations.inline.ode.{k}"))?,
                ));
            }
            let mut ode = Vec::new();
            for s in &differential_states {
                let (_, t) = ode_entries
                    .iter()
                    .find(|(k, _)| k == s)
                    .ok_or_else(|| ModelError::MissingOde(s.clone()))?;
                ode.push((s.clone(), t.clone()));
            }
            let alg = match key(inline, "alg") {
                None | Some(Value::Null) => Vec::new(),
                Some(Value::Sequence(items)) => items
                    .iter()
                    .enumerate()
                    .map(|(i, v)| scalar_text(v, &format!("equations.inline.alg[{i}]")))
                    .collect::<Result<_, _>>()?,
                Some(_) => return Err(invalid("equations.inline.alg", "must be a list")),
            };
            if alg.len() != algebraic_states.len() {
                return Err(ModelError::AlgCount {
                    expected: algebraic_states.len(),
                    found: alg.len(),
                });
            }
            let equations = ode.iter().map(|(s, t)| (format!("ode for {s}"), t)).chain(
                alg.iter()
                    .enumerate()
                    .map(|(i, t)| (format!("alg[{i}]"), t)),
            );
            for (label, t) in equations {
                if let Some(n) = referenced_names(t)
                    .into_iter()
                    .find(|n| !seen.contains(n.as_str()))
                {
                    return Err(ModelError::UndeclaredName {
                        name: n,
                        equation: label,
                    });
                }
            }
            Equations::Inline { ode, alg }
        }
        (None, Some(ext)) => {
            let ext = as_mapping(ext, "equations.external")?;
            let type_tag = scalar_text(
                key(ext, "type")
                    .ok_or_else(|| ModelError::Missing("equations.external.type".into()))?,
                "equations.external.type",
            )?;
            if !EXTERNAL_TYPES.contains(&type_tag.as_str()) {
                return Err(invalid(
                    "equations.external.type",
                    format!("unsupported type {type_tag:?} (expected serialized_function)"),
                ));
            }
            let file_name = scalar_text(
                key(ext, "file_name")
                    .ok_or_else(|| ModelError::Missing("equations.external.file_name".into()))?,
                "equations.external.file_name",
            )?;
            Equations::External {
                type_tag,
                file_name,
            }
        }
    };

    Ok(ModelSpec {
        name,
        differential_states,
        algebraic_states,
        controls,
        constants,
        equations,
        warnings,
    })
}

struct ModelScope<'a> {
    names: &'a HashMap<String, Expr>,
}

impl Scope for ModelScope<'_> {
    fn lookup(&self, name: &str) -> Option<Expr> {
        self.names.get(name).cloned()
    }
}

/// Builds the symbolic model. `resolve` returns the text of an external
/// function file given its `file_name`.
pub fn bind(
    spec: &ModelSpec,
    name: &str,
    resolve: &dyn Fn(&str) -> Result<String, ModelError>,
) -> Result<BoundModel, ModelError> {
    if !is_identifier(name) || name.contains('.') {
        return Err(invalid("name", format!("invalid model name {name:?}")));
    }
    let mk = |part: &str, n: usize| -> Option<Expr> {
        (n > 0).then(|| sym(&format!("{name}.{part}"), n).expect("valid identifier"))
    };
    let x = mk("x", spec.differential_states.len())
        .ok_or_else(|| ModelError::Missing("differential_states".into()))?;
    let u = mk("u", spec.controls.len()).ok_or_else(|| ModelError::Missing("controls".into()))?;
    let z = mk("z", spec.algebraic_states.len());

    let mut components = Vec::new();
    for (i, s) in spec.differential_states.iter().enumerate() {
        components.push((s.clone(), Part::X, i));
    }
    for (i, s) in spec.controls.iter().enumerate() {
        components.push((s.clone(), Part::U, i));
    }
    for (i, s) in spec.algebraic_states.iter().enumerate() {
        components.push((s.clone(), Part::Z, i));
    }

    let (rhs, alg) = match &spec.equations {
        Equations::Inline { ode, alg } => {
            let mut names: HashMap<String, Expr> = HashMap::new();
            for (n, part, i) in &components {
                let v = match part {
                    Part::X => &x,
                    Part::U => &u,
                    Part::Z => z.as_ref().expect("algebraic symbol exists"),
                };
                names.insert(n.clone(), v.at(*i).expect("in range"));
            }
            for (n, v) in &spec.constants {
                names.insert(n.clone(), Expr::constant(*v));
            }
            let scope = ModelScope { names: &names };
            let parse = |label: String, text: &str| -> Result<Expr, ModelError> {
                let e = parse_expr(text, &scope).map_err(|e| {
                    if let Some(n) = e.message.strip_prefix("undeclared name ") {
                        ModelError::UndeclaredName {
                            name: n.to_string(),
                            equation: label.clone(),
                        }
                    } else {
                        ModelError::Parse {
                            equation: label.clone(),
                            column: e.column,
                            message: e.message,
                        }
                    }
                })?;
                if e.len() != 1 {
                    return Err(ModelError::Parse {
                        equation: label,
                        column: 1,
                        message: format!("equation must be scalar, has length {}", e.len()),
                    });
                }
                Ok(e)
            };
            let rhs: Vec<Expr> = ode
                .iter()
                .map(|(s, t)| parse(format!("ode for {s}"), t))
                .collect::<Result<_, _>>()?;
            let alg: Vec<Expr> = alg
                .iter()
                .enumerate()
                .map(|(i, t)| parse(format!("alg[{i}]"), t))
                .collect::<Result<_, _>>()?;
            (Expr::concat(&rhs), Expr::concat(&alg))
        }
        Equations::External { file_name, .. } => {
            let text = resolve(file_name)?;
            let ext = |reason: String| ModelError::External {
                file: file_name.clone(),
                reason,
            };
            let f = expr::deserialize(&text).map_err(|e| ext(e.to_string()))?;
            let nz = z.as_ref().map_or(0, Expr::len);
            let (want_in, want_out) = if nz > 0 { (3, 2) } else { (2, 1) };
            if f.n_in() != want_in || f.n_out() != want_out {
                return Err(ext(format!(
                    "signature ({} inputs, {} outputs) does not match (x, u{}) -> (xdot{})",
                    f.n_in(),
                    f.n_out(),
                    if nz > 0 { ", z" } else { "" },
                    if nz > 0 { ", alg" } else { "" }
                )));
            }
            let mut targets = vec![x.clone(), u.clone()];
            targets.extend(z.clone());
            let mut bindings = Vec::new();
            for (i, (input, target)) in f.inputs().iter().zip(&targets).enumerate() {
                if input.len() != target.len() {
                    return Err(ext(format!(
                        "input {i} has length {}, model declares {}",
                        input.len(),
                        target.len()
                    )));
                }
                bindings.push((input.clone(), target.clone()));
            }
            let expected_out = [x.len(), nz];
            for (i, o) in f.outputs().iter().enumerate() {
                if o.len() != expected_out[i] {
                    return Err(ext(format!(
                        "output {i} has length {}, expected {}",
                        o.len(),
                        expected_out[i]
                    )));
                }
            }
            let outs = substitute_many(f.outputs(), &bindings).map_err(|e| ext(e.to_string()))?;
            let alg = outs.get(1).cloned().unwrap_or_else(Expr::empty);
            (outs[0].clone(), alg)
        }
    };

    Ok(BoundModel {
        name: name.to_string(),
        x,
        u,
        z,
        rhs,
        alg,
        components,
    })
}

/// Reads, parses and binds a model file. External equation files resolve
/// relative to the model file's directory. The model name is the YAML
/// `name` key if present, else `default_name`.
pub fn load_model(path: &Path, default_name: &str) -> Result<(ModelSpec, BoundModel), ModelError> {
    let text = read(path)?;
    let spec = parse_model(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = spec
        .name
        .clone()
        .unwrap_or_else(|| default_name.to_string());
    let bound = bind(&spec, &name, &|file| read(&dir.join(file)))?;
    Ok((spec, bound))
}

pub(crate) fn read(path: &Path) -> Result<String, ModelError> {
    fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Canonical YAML for a spec; `parse_model(&emit(s))` reproduces `s` up to
/// warnings.
pub fn emit(spec: &ModelSpec) -> String {
    let s = |v: &str| Value::String(v.to_string());
    let list = |names: &[String]| {
        Value::Sequence(
            names
                .iter()
                .map(|n| {
                    let mut m = Mapping::new();
                    m.insert(s("name"), s(n));
                    Value::Mapping(m)
                })
                .collect(),
        )
    };
    let mut root = Mapping::new();
    if let Some(n) = &spec.name {
        root.insert(s("name"), s(n));
    }
    let mut eq = Mapping::new();
    match &spec.equations {
        Equations::Inline { ode, alg } => {
            let mut inline = Mapping::new();
            let mut o = Mapping::new();
            for (k, v) in ode {
                o.insert(s(k), s(v));
            }
            inline.insert(s("ode"), Value::Mapping(o));
            if !alg.is_empty() {
                inline.insert(
                    s("alg"),
                    Value::Sequence(alg.iter().map(|a| s(a)).collect()),
                );
            }
            eq.insert(s("inline"), Value::Mapping(inline));
        }
        Equations::External {
            type_tag,
            file_name,
        } => {
            let mut ext = Mapping::new();
            ext.insert(s("type"), s(type_tag));
            ext.insert(s("file_name"), s(file_name));
            eq.insert(s("external"), Value::Mapping(ext));
        }
    }
    root.insert(s("equations"), Value::Mapping(eq));
    root.insert(s("differential_states"), list(&spec.differential_states));
    if !spec.algebraic_states.is_empty() {
        root.insert(s("algebraic_states"), list(&spec.algebraic_states));
    }
    root.insert(s("controls"), list(&spec.controls));
    if !spec.constants.is_empty() {
        let mut c = Mapping::new();
        for (k, v) in &spec.constants {
            c.insert(s(k), Value::Number((*v).into()));
        }
        let mut constants = Mapping::new();
        constants.insert(s("inline"), Value::Mapping(c));
        root.insert(s("constants"), Value::Mapping(constants));
    }
    serde_yaml::to_string(&Value::Mapping(root)).expect("mapping serializes")
}
