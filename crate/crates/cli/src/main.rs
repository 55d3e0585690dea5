//! `nmpc-forge`: check models, solve problem files, export controller
//! bundles and run closed-loop scenarios.
//!
//! Exit codes: 0 success, 1 file I/O, 2 invalid input, 3 solver failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use nmpc_forge::model_io::{load_model, ModelError};
use nmpc_forge::offsetfree::{run_closed_loop, Mode, OffsetFreeError, Scenario};
use nmpc_forge::problem::{load_problem, parse_assignment, Problem, ProblemError};
use nmpc_forge::runtime::{Bundle, Instance, RuntimeError, Selector, Stage};
use nmpc_forge::solver::Status;

#[derive(Parser)]
#[command(name = "nmpc-forge", version, about = "Nonlinear MPC toolchain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a model file or a problem file.
    Check { path: PathBuf },
    /// Solve one optimal control problem.
    Solve {
        problem: PathBuf,
        /// Override a parameter value: `name=v0,v1,...`.
        #[arg(long = "param", value_name = "NAME=VALUES")]
        params: Vec<String>,
        /// Solve with a previously exported bundle instead of transcribing.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Trajectory CSV: t, states, controls.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Solver statistics JSON; written even when the solve fails.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Transcribe a problem and write a controller bundle.
    Export {
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "param", value_name = "NAME=VALUES")]
        params: Vec<String>,
    },
    /// Run a closed-loop scenario.
    Simulate {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "offsetfree")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Controller bundle; overrides the scenario's `controller`.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long = "param", value_name = "NAME=VALUES")]
        params: Vec<String>,
        /// Write zeros in the solve-time column.
        #[arg(long)]
        zero_timing: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Offsetfree,
    Traditional,
}

struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn io(msg: impl Into<String>) -> Self {
        Fail {
            code: 1,
            msg: msg.into(),
        }
    }
    fn invalid(msg: impl Into<String>) -> Self {
        Fail {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<ProblemError> for Fail {
    fn from(e: ProblemError) -> Self {
        Fail {
            code: if e.is_io() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

impl From<RuntimeError> for Fail {
    fn from(e: RuntimeError) -> Self {
        Fail {
            code: if matches!(e, RuntimeError::Io(..)) {
                1
            } else {
                2
            },
            msg: e.to_string(),
        }
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        Fail {
            code: if e.is_io() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

impl From<OffsetFreeError> for Fail {
    fn from(e: OffsetFreeError) -> Self {
        match e {
            OffsetFreeError::Runtime(e) => e.into(),
            e => Fail::invalid(e.to_string()),
        }
    }
}

type Result<T, E = Fail> = std::result::Result<T, E>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Check { path } => check(&path),
        Cmd::Solve {
            problem,
            params,
            bundle,
            out,
            stats,
        } => solve(
            &problem,
            &params,
            bundle.as_deref(),
            out.as_deref(),
            stats.as_deref(),
        ),
        Cmd::Export {
            problem,
            out,
            params,
        } => export(&problem, &out, &params),
        Cmd::Simulate {
            scenario,
            mode,
            out,
            bundle,
            params,
            zero_timing,
        } => {
            let mode = match mode {
                ModeArg::Offsetfree => Mode::OffsetFree,
                ModeArg::Traditional => Mode::Traditional,
            };
            simulate(
                &scenario,
                mode,
                out.as_deref(),
                bundle.as_deref(),
                &params,
                zero_timing,
            )
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Fail::io(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|e| Fail::io(format!("cannot write {}: {e}", path.display())))
}

fn check(path: &Path) -> Result<()> {
    let text = read(path)?;
    let is_problem = serde_yaml::from_str::<serde_yaml::Value>(&text)
        .ok()
        .and_then(|v| v.as_mapping().map(|m| m.contains_key("models")))
        .unwrap_or(false);
    if is_problem {
        let prob = load_problem(path)?;
        let bundle = prob.bundle()?;
        let lay = &bundle.nlp().layout;
        println!(
            "problem {}: {} intervals, {} decision variables, {} parameters",
            prob.name,
            lay.intervals,
            bundle.nlp().nw(),
            prob.values.len()
        );
        return Ok(());
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let (spec, model) = load_model(path, stem.split('.').next().unwrap_or(stem))?;
    for w in &spec.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "model {}: states [{}], controls [{}], algebraic [{}]",
        model.name,
        model.state_names().join(", "),
        model.control_names().join(", "),
        model.algebraic_names().join(", ")
    );
    Ok(())
}

fn apply_params(prob: &mut Problem, params: &[String]) -> Result<()> {
    for a in params {
        let (name, v) = parse_assignment(a).map_err(Fail::invalid)?;
        prob.set_value(&name, &v)?;
    }
    Ok(())
}

fn controller(prob: &Problem, bundle: Option<&Path>) -> Result<Arc<Bundle>> {
    Ok(Arc::new(match bundle {
        Some(p) => Bundle::load(p)?,
        None => prob.bundle()?,
    }))
}

fn solve(
    path: &Path,
    params: &[String],
    bundle: Option<&Path>,
    out: Option<&Path>,
    stats_path: Option<&Path>,
) -> Result<()> {
    let mut prob = load_problem(path)?;
    apply_params(&mut prob, params)?;
    let b = controller(&prob, bundle)?;
    let mut inst = prob.instance(b)?;
    let status = inst.solve();
    let st = inst.stats().clone();
    let f_opt = inst.solution().map(|s| s.f);

    if let Some(p) = stats_path {
        let mut echo = Map::new();
        for (name, v) in &prob.values {
            echo.insert(name.clone(), json!(v));
        }
        let doc = json!({
            "status": status.name(),
            "iterations": st.iterations,
            "solve_time_s": st.solve_time_s,
            "f_opt": f_opt,
            "primal_inf": st.primal_inf,
            "dual_inf": st.dual_inf,
            "params": Value::Object(echo),
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
        text.push('\n');
        write(p, text.as_bytes())?;
    }
    println!(
        "status {} after {} iterations, objective {}",
        status.name(),
        st.iterations,
        f_opt.map_or("n/a".to_string(), |f| format!("{f:.10e}"))
    );
    if status != Status::Solved {
        return Err(Fail {
            code: 3,
            msg: format!("solver finished with status {}", status.name()),
        });
    }
    if let Some(p) = out {
        write(p, trajectory_csv(&inst)?.as_bytes())?;
    }
    Ok(())
}

fn trajectory_csv(inst: &Instance) -> Result<String> {
    let nlp = inst.bundle().nlp();
    let lay = &nlp.layout;
    let n = lay.intervals;
    let get = |id: &str| inst.get_vec(&Selector::new(id, Stage::Everywhere));
    let x = get("x_opt")?;
    let u = if lay.nu > 0 {
        get("u_opt")?
    } else {
        Vec::new()
    };
    let z = if lay.nz > 0 {
        get("z_opt")?
    } else {
        Vec::new()
    };
    let horizon = match (lay.free_time, inst.solution()) {
        (true, Some(s)) => *s.w.last().expect("free time is the last variable"),
        _ => lay.horizon,
    };
    let mut cols = vec!["t".to_string()];
    for m in &lay.models {
        cols.extend(m.states.iter().map(|s| format!("{}.{s}", m.name)));
    }
    for m in &lay.models {
        cols.extend(m.controls.iter().map(|s| format!("{}.{s}", m.name)));
    }
    for m in &lay.models {
        cols.extend(m.algebraic.iter().map(|s| format!("{}.{s}", m.name)));
    }
    let mut s = cols.join(",");
    s.push('\n');
    for k in 0..=n {
        let t = horizon * k as f64 / n as f64;
        let mut row = vec![t];
        row.extend_from_slice(&x[k * lay.nx..(k + 1) * lay.nx]);
        // Controls are piecewise constant; the final node repeats the last.
        let ku = k.min(n - 1);
        row.extend_from_slice(&u[ku * lay.nu..(ku + 1) * lay.nu]);
        row.extend_from_slice(&z[ku * lay.nz..(ku + 1) * lay.nz]);
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn export(path: &Path, out: &Path, params: &[String]) -> Result<()> {
    let mut prob = load_problem(path)?;
    apply_params(&mut prob, params)?;
    let b = prob.bundle()?;
    b.save(out)?;
    println!(
        "bundle {} written to {} (sha256 {})",
        b.name(),
        out.display(),
        b.hash()
    );
    println!("{:<16} {:>5} {:>7}  default", "parameter", "size", "stages");
    for e in &b.nlp().params.entries {
        let stages = if e.stage_varying {
            b.nlp().params.stages
        } else {
            1
        };
        let default = prob.value(&e.name).unwrap_or_default();
        let shown: Vec<String> = default.iter().take(8).map(|v| format!("{v}")).collect();
        let more = if default.len() > 8 { " ..." } else { "" };
        println!(
            "{:<16} {:>5} {:>7}  [{}{more}]",
            e.name,
            e.len,
            stages,
            shown.join(", ")
        );
    }
    Ok(())
}

fn simulate(
    path: &Path,
    mode: Mode,
    out: Option<&Path>,
    bundle: Option<&Path>,
    params: &[String],
    zero_timing: bool,
) -> Result<()> {
    let scenario = Scenario::parse(&read(path)?)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let source = scenario.controller.as_ref().map(|c| dir.join(c));
    let is_bundle = |p: &Path| p.extension().is_some_and(|e| e == "impb");

    let mut inst = match (bundle, &source) {
        (None, None) => return Err(Fail::invalid("scenario names no controller; pass --bundle")),
        (b, Some(src)) if !is_bundle(src) => {
            let mut prob = load_problem(src)?;
            apply_params(&mut prob, params)?;
            prob.instance(controller(&prob, b)?)?
        }
        (b, src) => {
            let p = b.or(src.as_deref()).expect("one of them is set");
            let mut inst = Instance::new(Arc::new(Bundle::load(p)?));
            for a in params {
                let (name, v) = parse_assignment(a).map_err(Fail::invalid)?;
                inst.set(&Selector::new(&name, Stage::Everywhere), &v)?;
            }
            inst
        }
    };
    let cl = run_closed_loop(&scenario, mode, &mut inst)?;
    if let Some(p) = out {
        let mut buf = Vec::new();
        cl.write_csv(&mut buf, zero_timing)
            .map_err(|e| Fail::io(e.to_string()))?;
        write(p, &buf)?;
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "mode {}: {} samples, {} failed solves",
        mode.name(),
        cl.rows.len(),
        cl.failures
    );
    for m in cl.metrics(&scenario.phases) {
        let _ = writeln!(
            s,
            "phase {} [{}, {}): mean |theta - theta_ref| = {:.6e} over {} samples",
            m.name, m.from, m.to, m.mean_abs_error, m.samples
        );
    }
    let max_time = cl.rows.iter().map(|r| r.solve_time_s).fold(0.0, f64::max);
    let _ = writeln!(
        s,
        "max solve time {max_time:.3e} s, total {:.3e} s",
        cl.total_solve_time()
    );
    let mut hist = std::collections::BTreeMap::new();
    for r in &cl.rows {
        *hist.entry(r.iter).or_insert(0usize) += 1;
    }
    let parts: Vec<String> = hist.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let _ = writeln!(s, "iterations histogram {}", parts.join(" "));
    std::io::stdout()
        .write_all(s.as_bytes())
        .map_err(|e| Fail::io(e.to_string()))?;
    Ok(())
}
