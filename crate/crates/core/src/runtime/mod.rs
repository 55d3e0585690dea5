//! Handle-based controller runtime: load a bundle, set parameters, solve,
//! read results.

mod bundle;
mod codec;
mod state;

use std::sync::Arc;

use thiserror::Error;

pub use bundle::{export_bundle, Bundle, BUNDLE_VERSION};
pub use state::{StateBlob, STATE_VERSION};

use crate::model_io::Part;
use crate::solver::{
    default_guess, sqp_solve, Guess, Solution, SolveStats, SqpOptions, SqpWorkspace, Status,
};
use crate::transcription::{Method, TranscriptionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("unsupported format version `{0}`")]
    Version(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("unknown identifier `{0}`")]
    UnknownId(String),
    #[error("read-only identifier `{0}`")]
    ReadOnly(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("stage {stage} out of range for `{id}` ({stages} stages)")]
    Stage {
        id: String,
        stage: usize,
        stages: usize,
    },
    #[error("no solution")]
    NoSolution,
    #[error("state blob belongs to a different bundle")]
    BundleMismatch,
    #[error("invalid selector flags: {0}")]
    Flags(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
}

/// Selector flag bits, shared with the C facade.
pub mod flags {
    pub const FULL: u32 = 1;
    pub const HREP: u32 = 2;
    pub const ROW_MAJOR: u32 = 4;
    pub const COLUMN_MAJOR: u32 = 8;
    /// Stage value meaning "every stage".
    pub const EVERYWHERE: i64 = -1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    At(usize),
    Everywhere,
}

impl Stage {
    /// `-1` is [`Stage::Everywhere`]; other negatives are rejected.
    pub fn from_index(i: i64) -> Result<Stage, RuntimeError> {
        match i {
            flags::EVERYWHERE => Ok(Stage::Everywhere),
            i if i >= 0 => Ok(Stage::At(i as usize)),
            _ => Err(RuntimeError::Flags(format!("stage {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repetition {
    /// Distinct data per selected stage.
    Full,
    /// One vector replicated over the selected stages.
    Hrep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    /// `data[s * rows + r]`: stages contiguous.
    RowMajor,
    /// `data[r * stages + s]`: components contiguous across stages.
    ColumnMajor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selector {
    pub id: String,
    pub stage: Stage,
    pub repetition: Repetition,
    pub ordering: Ordering,
}

impl Selector {
    pub fn new(id: &str, stage: Stage) -> Self {
        Selector {
            id: id.to_string(),
            stage,
            repetition: Repetition::Full,
            ordering: Ordering::RowMajor,
        }
    }

    pub fn hrep(mut self) -> Self {
        self.repetition = Repetition::Hrep;
        self
    }

    pub fn column_major(mut self) -> Self {
        self.ordering = Ordering::ColumnMajor;
        self
    }

    /// Exactly one repetition flag and one ordering flag must be set.
    pub fn from_flags(id: &str, stage: i64, bits: u32) -> Result<Self, RuntimeError> {
        use flags::*;
        if bits & !(FULL | HREP | ROW_MAJOR | COLUMN_MAJOR) != 0 {
            return Err(RuntimeError::Flags(format!("unknown bits {bits:#x}")));
        }
        let repetition = match (bits & FULL != 0, bits & HREP != 0) {
            (true, false) => Repetition::Full,
            (false, true) => Repetition::Hrep,
            _ => return Err(RuntimeError::Flags("need exactly one of FULL, HREP".into())),
        };
        let ordering = match (bits & ROW_MAJOR != 0, bits & COLUMN_MAJOR != 0) {
            (true, false) => Ordering::RowMajor,
            (false, true) => Ordering::ColumnMajor,
            _ => {
                return Err(RuntimeError::Flags(
                    "need exactly one of ROW_MAJOR, COLUMN_MAJOR".into(),
                ))
            }
        };
        Ok(Selector {
            id: id.to_string(),
            stage: Stage::from_index(stage)?,
            repetition,
            ordering,
        })
    }
}

/// Initial iterate for the next solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HotStart {
    /// Previous solution as-is.
    Previous,
    /// Previous solution advanced one stage, last stage repeated.
    Shift,
}

impl HotStart {
    pub fn name(self) -> &'static str {
        match self {
            HotStart::Previous => "previous",
            HotStart::Shift => "shift",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "previous" => Some(HotStart::Previous),
            "shift" => Some(HotStart::Shift),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Param(usize),
    X,
    U,
    Z,
    F,
    Comp(Part, usize),
}

/// A compiled controller.
pub struct Instance {
    bundle: Arc<Bundle>,
    p: Vec<f64>,
    options: SqpOptions,
    hot_start: HotStart,
    iterate: Option<Guess>,
    last: Option<Solution>,
    /// `xtraj` of the last solution.
    last_x: Vec<f64>,
    stats: SolveStats,
    solves: usize,
    ws: SqpWorkspace,
}

impl Instance {
    /// Zeroed parameters and a cold start.
    pub fn new(bundle: Arc<Bundle>) -> Self {
        let np = bundle.nlp().np();
        let options = bundle.options().clone();
        Instance {
            bundle,
            p: vec![0.0; np],
            options,
            hot_start: HotStart::Previous,
            iterate: None,
            last: None,
            last_x: Vec::new(),
            stats: SolveStats::unsolved(),
            solves: 0,
            ws: SqpWorkspace::default(),
        }
    }

    pub fn bundle(&self) -> &Arc<Bundle> {
        &self.bundle
    }

    pub fn options(&self) -> &SqpOptions {
        &self.options
    }

    pub fn set_options(&mut self, options: SqpOptions) -> Result<(), RuntimeError> {
        options.validate().map_err(RuntimeError::Invalid)?;
        self.options = options;
        Ok(())
    }

    pub fn hot_start(&self) -> HotStart {
        self.hot_start
    }

    pub fn set_hot_start(&mut self, mode: HotStart) {
        self.hot_start = mode;
    }

    /// Drops the stored iterate; the next solve starts cold.
    pub fn reset(&mut self) {
        self.iterate = None;
    }

    pub fn solve_count(&self) -> usize {
        self.solves
    }

    pub fn stats(&self) -> &SolveStats {
        &self.stats
    }

    pub fn solution(&self) -> Option<&Solution> {
        self.last.as_ref()
    }

    /// Full parameter vector in layout order.
    pub fn parameters(&self) -> &[f64] {
        &self.p
    }

    fn resolve(&self, id: &str) -> Result<Target, RuntimeError> {
        let nlp = self.bundle.nlp();
        if let Some(i) = nlp.params.entries.iter().position(|e| e.name == id) {
            return Ok(Target::Param(i));
        }
        let t = match id {
            "x_opt" => Target::X,
            "u_opt" => Target::U,
            "z_opt" => Target::Z,
            "f_opt" => Target::F,
            _ => nlp
                .layout
                .component(id)
                .map(|(part, i)| Target::Comp(part, i))
                .ok_or_else(|| RuntimeError::UnknownId(id.to_string()))?,
        };
        Ok(t)
    }

    /// (rows, stages) of a target.
    fn shape(&self, t: Target) -> (usize, usize) {
        let nlp = self.bundle.nlp();
        let lay = &nlp.layout;
        let n = lay.intervals;
        match t {
            Target::Param(i) => {
                let e = &nlp.params.entries[i];
                (
                    e.len,
                    if e.stage_varying {
                        nlp.params.stages
                    } else {
                        1
                    },
                )
            }
            Target::X => (lay.nx, n + 1),
            Target::U => (lay.nu, n),
            Target::Z => (lay.nz, n),
            Target::F => (1, 1),
            Target::Comp(Part::X, _) => (1, n + 1),
            Target::Comp(_, _) => (1, n),
        }
    }

    fn stages(&self, sel: &Selector, stages: usize) -> Result<Vec<usize>, RuntimeError> {
        match sel.stage {
            Stage::Everywhere => Ok((0..stages).collect()),
            Stage::At(k) if k < stages => Ok(vec![k]),
            Stage::At(k) => Err(RuntimeError::Stage {
                id: sel.id.clone(),
                stage: k,
                stages,
            }),
        }
    }

    /// Number of values `set`/`get` expect for `sel`.
    pub fn len(&self, sel: &Selector) -> Result<usize, RuntimeError> {
        let (rows, stages) = self.shape(self.resolve(&sel.id)?);
        let sel_stages = self.stages(sel, stages)?;
        Ok(match sel.repetition {
            Repetition::Full => rows * sel_stages.len(),
            Repetition::Hrep => rows,
        })
    }

    fn index(sel: &Selector, rows: usize, nsel: usize, si: usize, r: usize) -> usize {
        match (sel.repetition, sel.ordering) {
            (Repetition::Hrep, _) => r,
            (Repetition::Full, Ordering::RowMajor) => si * rows + r,
            (Repetition::Full, Ordering::ColumnMajor) => r * nsel + si,
        }
    }

    /// Writes a parameter. Solution ids are read-only.
    pub fn set(&mut self, sel: &Selector, data: &[f64]) -> Result<(), RuntimeError> {
        let t = self.resolve(&sel.id)?;
        let Target::Param(i) = t else {
            return Err(RuntimeError::ReadOnly(sel.id.clone()));
        };
        let (rows, stages) = self.shape(t);
        let sel_stages = self.stages(sel, stages)?;
        let expected = self.len(sel)?;
        if data.len() != expected {
            return Err(RuntimeError::Length {
                expected,
                got: data.len(),
            });
        }
        let params = &self.bundle.nlp().params;
        let e = &params.entries[i];
        for (si, &s) in sel_stages.iter().enumerate() {
            let off = params.stage_offset(e, s);
            for r in 0..rows {
                self.p[off + r] = data[Self::index(sel, rows, sel_stages.len(), si, r)];
            }
        }
        Ok(())
    }

    /// Reads a parameter or part of the last solution. With `Hrep` the
    /// first selected stage is returned.
    pub fn get(&self, sel: &Selector, out: &mut [f64]) -> Result<(), RuntimeError> {
        let t = self.resolve(&sel.id)?;
        let (rows, stages) = self.shape(t);
        let sel_stages = self.stages(sel, stages)?;
        let expected = self.len(sel)?;
        if out.len() != expected {
            return Err(RuntimeError::Length {
                expected,
                got: out.len(),
            });
        }
        let nlp = self.bundle.nlp();
        let lay = &nlp.layout;
        let sol = match t {
            Target::Param(_) => None,
            _ => Some(self.last.as_ref().ok_or(RuntimeError::NoSolution)?),
        };
        let value = |s: usize, r: usize| -> f64 {
            match t {
                Target::Param(i) => {
                    let e = &nlp.params.entries[i];
                    self.p[nlp.params.stage_offset(e, s) + r]
                }
                Target::X => self.last_x[s * lay.nx + r],
                Target::U => sol.map_or(0.0, |x| x.w[lay.u_offset(s) + r]),
                Target::Z => sol.map_or(0.0, |x| x.w[lay.z_offset(s) + r]),
                Target::F => sol.map_or(0.0, |x| x.f),
                Target::Comp(Part::X, c) => self.last_x[s * lay.nx + c],
                Target::Comp(Part::U, c) => sol.map_or(0.0, |x| x.w[lay.u_offset(s) + c]),
                Target::Comp(Part::Z, c) => sol.map_or(0.0, |x| x.w[lay.z_offset(s) + c]),
            }
        };
        let n_out = match sel.repetition {
            Repetition::Full => sel_stages.len(),
            Repetition::Hrep => 1,
        };
        for (si, &s) in sel_stages.iter().take(n_out).enumerate() {
            for r in 0..rows {
                out[Self::index(sel, rows, sel_stages.len(), si, r)] = value(s, r);
            }
        }
        Ok(())
    }

    /// Convenience wrapper around [`Instance::get`].
    pub fn get_vec(&self, sel: &Selector) -> Result<Vec<f64>, RuntimeError> {
        let mut out = vec![0.0; self.len(sel)?];
        self.get(sel, &mut out)?;
        Ok(out)
    }

    fn shifted(&self, g: &Guess) -> Guess {
        let lay = &self.bundle.nlp().layout;
        let n = lay.intervals;
        let mut w = g.w.clone();
        let mut shift = |off: &dyn Fn(usize) -> usize, width: usize, blocks: usize| {
            for k in 0..blocks.saturating_sub(1) {
                for i in 0..width {
                    w[off(k) + i] = g.w[off(k + 1) + i];
                }
            }
        };
        if lay.method == Method::MultipleShooting {
            shift(&|k| k * lay.nx, lay.nx, n + 1);
        }
        shift(&|k| lay.u_offset(k), lay.nu, n);
        shift(&|k| lay.z_offset(k), lay.nz, n);
        Guess { w, ..g.clone() }
    }

    /// Runs the SQP method from the stored iterate (or the default guess).
    /// A failed solve clears the iterate so the next solve starts cold.
    pub fn solve(&mut self) -> Status {
        let nlp = self.bundle.nlp().clone();
        let guess = match (&self.iterate, self.hot_start) {
            (Some(g), HotStart::Previous) => g.clone(),
            (Some(g), HotStart::Shift) => self.shifted(g),
            (None, _) => Guess {
                w: default_guess(&nlp, &self.p),
                ..Guess::default()
            },
        };
        let sol = sqp_solve(&nlp, &self.p, Some(&guess), &self.options, &mut self.ws);
        self.solves += 1;
        let status = sol.stats.status;
        let usable = matches!(status, Status::Solved | Status::MaxIter)
            && sol.w.iter().all(|v| v.is_finite());
        self.iterate = usable.then(|| Guess {
            w: sol.w.clone(),
            lam_g: Some(sol.lam_g.clone()),
            lam_h: Some(sol.lam_h.clone()),
            lam_x: Some(sol.lam_x.clone()),
            working: Some(sol.working.clone()),
        });
        self.last_x = nlp
            .xtraj
            .call(&[&sol.w, &self.p])
            .unwrap_or_else(|_| vec![f64::NAN; (nlp.layout.intervals + 1) * nlp.layout.nx]);
        self.stats = sol.stats.clone();
        self.last = Some(sol);
        status
    }

    pub fn save_state(&self) -> Vec<u8> {
        StateBlob {
            bundle_hash: self.bundle.hash().to_string(),
            hot_start: self.hot_start,
            p: self.p.clone(),
            iterate: self.iterate.clone(),
        }
        .encode()
    }

    /// Restores parameters and the hot-start iterate.
    pub fn load_state(&mut self, data: &[u8]) -> Result<(), RuntimeError> {
        let blob = StateBlob::decode(data)?;
        if blob.bundle_hash != self.bundle.hash() {
            return Err(RuntimeError::BundleMismatch);
        }
        let nlp = self.bundle.nlp();
        let len_ok = |v: &Option<Vec<f64>>, n: usize| v.as_ref().is_none_or(|v| v.len() == n);
        if blob.p.len() != nlp.np() {
            return Err(RuntimeError::Corrupt("parameter vector length".into()));
        }
        if let Some(g) = &blob.iterate {
            let ws_ok = g
                .working
                .as_ref()
                .is_none_or(|ws| ws.rows.len() == nlp.ng() + nlp.nh() && ws.vars.len() == nlp.nw());
            if g.w.len() != nlp.nw()
                || !len_ok(&g.lam_g, nlp.ng())
                || !len_ok(&g.lam_h, nlp.nh())
                || !len_ok(&g.lam_x, nlp.nw())
                || !ws_ok
            {
                return Err(RuntimeError::Corrupt("iterate dimensions".into()));
            }
        }
        self.p = blob.p;
        self.iterate = blob.iterate;
        self.hot_start = blob.hot_start;
        Ok(())
    }
}
