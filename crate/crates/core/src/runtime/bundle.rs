//! Self-contained compiled problem (`.impb`).
//!
//! ```text
//! bundlev1
//! @meta <nbytes>
//! name pendulum
//! ...
//! @fn f <nbytes>
//! fnser v1 f
//! ...
//! @end <sha256 of everything above>
//! ```

use std::path::Path;

use crate::expr::{deserialize, serialize, FunctionDef};
use crate::ocp::CanonicalOcp;
use crate::solver::{HessianMode, SqpOptions};
use crate::transcription::{
    transcribe, GaussNewton, IntegratorCfg, LagrangeRule, Layout, Method, ModelLayout, Nlp,
    NlpParts, ParamLayout, Scheme, TranscriptionCfg, MAX_DECISION_VARIABLES,
};

use super::codec::{
    check_trailer, corrupt, float_line, parse_floats, parse_usize, sha256_hex, Lines,
};
use super::RuntimeError;

pub const BUNDLE_VERSION: &str = "bundlev1";

/// Bound on table sizes read from a bundle.
const MAX_ITEMS: usize = 10_000;

/// A transcribed problem with its solver configuration. Immutable once
/// built; share it between instances with `Arc`.
#[derive(Clone)]
pub struct Bundle {
    name: String,
    cfg: TranscriptionCfg,
    options: SqpOptions,
    nlp: Nlp,
    bytes: Vec<u8>,
    hash: String,
}

impl std::fmt::Debug for Bundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bundle")
            .field("name", &self.name)
            .field("nw", &self.nlp.nw())
            .field("hash", &self.hash)
            .finish()
    }
}

/// Transcribes `ocp` and packs the result.
pub fn export_bundle(
    name: &str,
    ocp: &CanonicalOcp,
    cfg: TranscriptionCfg,
    options: SqpOptions,
) -> Result<Bundle, RuntimeError> {
    let nlp = transcribe(ocp, cfg)?;
    Bundle::new(name, nlp, cfg, options)
}

impl Bundle {
    pub fn new(
        name: &str,
        nlp: Nlp,
        cfg: TranscriptionCfg,
        options: SqpOptions,
    ) -> Result<Bundle, RuntimeError> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(RuntimeError::Invalid(format!(
                "bundle name `{name}` must be non-empty without whitespace"
            )));
        }
        options.validate().map_err(RuntimeError::Invalid)?;
        let mut b = Bundle {
            name: name.to_string(),
            cfg,
            options,
            nlp,
            bytes: Vec::new(),
            hash: String::new(),
        };
        b.bytes = b.encode().into_bytes();
        b.hash = sha256_hex(&b.bytes);
        Ok(b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nlp(&self) -> &Nlp {
        &self.nlp
    }

    pub fn cfg(&self) -> &TranscriptionCfg {
        &self.cfg
    }

    pub fn options(&self) -> &SqpOptions {
        &self.options
    }

    /// sha256 of the serialized bundle.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn save(&self, path: &Path) -> Result<(), RuntimeError> {
        std::fs::write(path, &self.bytes)
            .map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Bundle, RuntimeError> {
        let data = std::fs::read(path)
            .map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))?;
        Bundle::from_bytes(&data)
    }

    /// Interval length; under free time, the initial guess divided by `N`.
    pub fn dt(&self) -> f64 {
        self.nlp.layout.horizon / self.nlp.layout.intervals as f64
    }

    fn encode(&self) -> String {
        let mut meta = String::new();
        let lay = &self.nlp.layout;
        let o = &self.options;
        let mut push = |s: String| {
            meta.push_str(&s);
            meta.push('\n');
        };
        push(format!("name {}", self.name));
        push(format!("method {}", lay.method.name()));
        push(format!("intervals {}", lay.intervals));
        push(format!(
            "integrator {} {}",
            self.cfg.integrator.scheme.name(),
            self.cfg.integrator.substeps
        ));
        push(format!("lagrange {}", self.cfg.lagrange.name()));
        push(format!(
            "horizon {} {:?}",
            if lay.free_time { "free" } else { "fixed" },
            lay.horizon
        ));
        push(format!("models {}", lay.models.len()));
        for m in &lay.models {
            push(format!("model {}", m.name));
            push(join("states", &m.states));
            push(join("controls", &m.controls));
            push(join("algebraic", &m.algebraic));
        }
        push(format!(
            "params {} {}",
            self.nlp.params.entries.len(),
            self.nlp.params.stages
        ));
        for e in &self.nlp.params.entries {
            push(format!(
                "param {} {} {}",
                e.name,
                e.len,
                u8::from(e.stage_varying)
            ));
        }
        push(format!("option max_iter {}", o.max_iter));
        push(format!("option tol_pr {:?}", o.tol_pr));
        push(format!("option tol_du {:?}", o.tol_du));
        push(format!("option hessian {}", o.hessian.name()));
        push(format!("option reg_floor {:?}", o.reg_floor));
        push(format!("option armijo_c1 {:?}", o.armijo_c1));
        push(format!("option backtrack {:?}", o.backtrack));
        push(format!("option max_ls {}", o.max_ls));
        push(format!("option penalty_factor {:?}", o.penalty_factor));
        meta.push_str(&float_line("lbw", &self.nlp.lbw));
        meta.push_str(&float_line("ubw", &self.nlp.ubw));

        let mut out = format!("{BUNDLE_VERSION}\n@meta {}\n{meta}", meta.len());
        for (key, f) in self.functions() {
            if let Some(f) = f {
                let text = serialize(f);
                out.push_str(&format!("@fn {key} {}\n{text}", text.len()));
            }
        }
        let hash = sha256_hex(out.as_bytes());
        out.push_str(&format!("@end {hash}\n"));
        out
    }

    fn functions(&self) -> [(&'static str, Option<&FunctionDef>); 8] {
        let n = &self.nlp;
        [
            ("f", Some(&n.f)),
            ("g", Some(&n.g)),
            ("h", Some(&n.h)),
            ("xtraj", Some(&n.xtraj)),
            ("gn_residual", n.gn.as_ref().map(|g| &g.residual)),
            ("gn_weight", n.gn.as_ref().map(|g| &g.weight)),
            ("x0_hint", n.x0_hint.as_ref()),
            ("xf_hint", n.xf_hint.as_ref()),
        ]
    }

    pub fn from_bytes(data: &[u8]) -> Result<Bundle, RuntimeError> {
        if !data.starts_with(b"bundlev") {
            return Err(corrupt("not a bundle"));
        }
        if !data.starts_with(format!("{BUNDLE_VERSION}\n").as_bytes()) {
            let line = data.split(|b| *b == b'\n').next().unwrap_or_default();
            return Err(RuntimeError::Version(
                String::from_utf8_lossy(line).into_owned(),
            ));
        }
        let body = check_trailer(data)?;
        let mut lines = Lines::new(body);
        lines.expect(BUNDLE_VERSION)?;
        let n = parse_usize(lines.expect("@meta")?, "meta length")?;
        let meta = lines.take(n)?;
        let mut fns: Vec<(String, FunctionDef)> = Vec::new();
        while !lines.is_done() {
            let head = lines.expect("@fn")?;
            let (key, len) = head
                .split_once(' ')
                .ok_or_else(|| corrupt("malformed @fn header"))?;
            let text = lines.take(parse_usize(len, "function length")?)?;
            let f = deserialize(text).map_err(|e| corrupt(format!("function {key}: {e}")))?;
            if fns.iter().any(|(k, _)| k == key) {
                return Err(corrupt(format!("duplicate function {key}")));
            }
            fns.push((key.to_string(), f));
        }
        let mut take = |key: &str| {
            fns.iter()
                .position(|(k, _)| k == key)
                .map(|i| fns.remove(i).1)
        };
        let need = |f: Option<FunctionDef>, key: &str| {
            f.ok_or_else(|| corrupt(format!("missing function {key}")))
        };
        let f = need(take("f"), "f")?;
        let g = need(take("g"), "g")?;
        let h = need(take("h"), "h")?;
        let xtraj = need(take("xtraj"), "xtraj")?;
        let gn = match (take("gn_residual"), take("gn_weight")) {
            (Some(residual), Some(weight)) => Some(GaussNewton { residual, weight }),
            (None, None) => None,
            _ => return Err(corrupt("gn_residual and gn_weight come together")),
        };
        let x0_hint = take("x0_hint");
        let xf_hint = take("xf_hint");
        if let Some((k, _)) = fns.first() {
            return Err(corrupt(format!("unknown function {k}")));
        }

        let m = parse_meta(meta)?;
        let nlp = Nlp::new(NlpParts {
            f,
            g,
            h,
            xtraj,
            lbw: m.lbw,
            ubw: m.ubw,
            layout: m.layout,
            params: m.params,
            gn,
            x0_hint,
            xf_hint,
        })
        .map_err(|e| corrupt(e.to_string()))?;
        let bundle =
            Bundle::new(&m.name, nlp, m.cfg, m.options).map_err(|e| corrupt(e.to_string()))?;
        if bundle.bytes != data {
            return Err(corrupt("non-canonical bundle encoding"));
        }
        Ok(bundle)
    }
}

fn join(key: &str, names: &[String]) -> String {
    let mut s = key.to_string();
    for n in names {
        s.push(' ');
        s.push_str(n);
    }
    s
}

struct Meta {
    name: String,
    cfg: TranscriptionCfg,
    options: SqpOptions,
    layout: Layout,
    params: ParamLayout,
    lbw: Vec<f64>,
    ubw: Vec<f64>,
}

fn words(s: &str) -> Vec<String> {
    s.split_ascii_whitespace().map(str::to_string).collect()
}

fn parse_meta(text: &str) -> Result<Meta, RuntimeError> {
    let mut l = Lines::new(text);
    let name = l.expect("name")?.to_string();
    let method = Method::from_name(l.expect("method")?).ok_or_else(|| corrupt("unknown method"))?;
    let intervals = parse_usize(l.expect("intervals")?, "intervals")?;
    if intervals == 0 || intervals > MAX_DECISION_VARIABLES {
        return Err(corrupt("interval count out of range"));
    }
    let integ = l.expect("integrator")?;
    let (scheme, substeps) = integ
        .split_once(' ')
        .ok_or_else(|| corrupt("malformed integrator"))?;
    let integrator = IntegratorCfg {
        scheme: Scheme::from_name(scheme).ok_or_else(|| corrupt("unknown integrator"))?,
        substeps: parse_usize(substeps, "substeps")?,
    };
    let lagrange = LagrangeRule::from_name(l.expect("lagrange")?)
        .ok_or_else(|| corrupt("unknown lagrange rule"))?;
    let hz = l.expect("horizon")?;
    let (kind, value) = hz
        .split_once(' ')
        .ok_or_else(|| corrupt("malformed horizon"))?;
    let free_time = match kind {
        "free" => true,
        "fixed" => false,
        _ => return Err(corrupt("unknown horizon kind")),
    };
    let horizon = value.parse::<f64>().map_err(|_| corrupt("bad horizon"))?;
    let n_models = parse_usize(l.expect("models")?, "model count")?;
    if n_models > MAX_ITEMS {
        return Err(corrupt("too many models"));
    }
    let mut models = Vec::new();
    for _ in 0..n_models {
        let name = l.expect("model")?.to_string();
        let states = words(l.expect("states")?);
        let controls = words(l.expect("controls")?);
        let algebraic = words(l.expect("algebraic")?);
        models.push(ModelLayout {
            name,
            states,
            controls,
            algebraic,
        });
    }
    let ps = l.expect("params")?;
    let (count, stages) = ps
        .split_once(' ')
        .ok_or_else(|| corrupt("malformed params"))?;
    let count = parse_usize(count, "parameter count")?;
    let stages = parse_usize(stages, "parameter stages")?;
    if count > MAX_ITEMS || stages != intervals + 1 {
        return Err(corrupt("parameter table out of range"));
    }
    let mut decls = Vec::new();
    for _ in 0..count {
        let w = words(l.expect("param")?);
        let [name, len, sv] = w.as_slice() else {
            return Err(corrupt("malformed param"));
        };
        let sv = match sv.as_str() {
            "0" => false,
            "1" => true,
            _ => return Err(corrupt("bad stage flag")),
        };
        let len = parse_usize(len, "parameter length")?;
        if len > MAX_ITEMS {
            return Err(corrupt("parameter too long"));
        }
        decls.push((name.clone(), len, sv));
    }
    let mut opt = |key: &str| -> Result<&str, RuntimeError> {
        let rest = l.expect("option")?;
        rest.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| corrupt(format!("expected option {key}")))
    };
    let float = |s: &str| s.parse::<f64>().map_err(|_| corrupt("bad option value"));
    let options = SqpOptions {
        max_iter: parse_usize(opt("max_iter")?, "max_iter")?,
        tol_pr: float(opt("tol_pr")?)?,
        tol_du: float(opt("tol_du")?)?,
        hessian: HessianMode::from_name(opt("hessian")?)
            .ok_or_else(|| corrupt("unknown hessian mode"))?,
        reg_floor: float(opt("reg_floor")?)?,
        armijo_c1: float(opt("armijo_c1")?)?,
        backtrack: float(opt("backtrack")?)?,
        max_ls: parse_usize(opt("max_ls")?, "max_ls")?,
        penalty_factor: float(opt("penalty_factor")?)?,
    };
    let lbw = parse_floats(l.expect("lbw")?)?;
    let ubw = parse_floats(l.expect("ubw")?)?;
    if !l.is_done() {
        return Err(corrupt("trailing meta lines"));
    }
    let count = |f: fn(&ModelLayout) -> usize| models.iter().map(f).sum::<usize>();
    let per_stage = count(|m| m.states.len() + m.controls.len() + m.algebraic.len());
    if per_stage > MAX_DECISION_VARIABLES {
        return Err(corrupt("too many model components"));
    }
    let layout = Layout {
        method,
        intervals,
        nx: count(|m| m.states.len()),
        nu: count(|m| m.controls.len()),
        nz: count(|m| m.algebraic.len()),
        free_time,
        horizon,
        models,
    };
    Ok(Meta {
        name,
        cfg: TranscriptionCfg {
            method,
            intervals,
            integrator,
            lagrange,
        },
        options,
        layout,
        params: ParamLayout::new(&decls, stages),
        lbw,
        ubw,
    })
}
