//! Closed-loop scenarios: reference and disturbance schedules, plant
//! mismatch, observer tuning and the simulation loop.

use std::io::Write;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::Deserialize;

use super::{
    target_select, AugmentedModel, Coulomb, KalmanFilter, LinearPlant, Mode, OffsetFreeError,
};
use crate::presets;
use crate::runtime::{Instance, Selector, Stage};
use crate::solver::Status;

pub const CSV_HEADER: &str =
    "t,theta,theta_ref,theta_hat,dtheta_hat,d_hat,u_cmd,u_applied,status,iter,solve_time_s";

/// Continuous-time controller model `x' = A x + B u`, `y = C x`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantCfg {
    /// Multiplies the input matrix of the controller model.
    #[serde(default = "one")]
    pub gain_scale: f64,
    #[serde(default)]
    pub coulomb: f64,
    /// Index of the velocity state friction acts against.
    #[serde(default = "one_index")]
    pub velocity: usize,
    #[serde(default = "one_index")]
    pub substeps: usize,
    pub u_min: f64,
    pub u_max: f64,
}

fn one() -> f64 {
    1.0
}
fn one_index() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanCfg {
    pub q: Vec<f64>,
    pub r: f64,
    pub p0: f64,
}

/// Piecewise-constant schedule breakpoint: `value` from time `t` on.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub t: f64,
    pub value: f64,
}

/// Evaluation window `[from, to)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    /// Problem file (`.yaml`) or bundle (`.impb`) providing the controller,
    /// relative to the scenario file. Used by the command-line front end.
    #[serde(default)]
    pub controller: Option<String>,
    /// Sample time; must equal the controller interval when given.
    #[serde(default)]
    pub dt: Option<f64>,
    pub model: ModelCfg,
    pub plant: PlantCfg,
    pub kalman: KalmanCfg,
    pub reference: Vec<Step>,
    #[serde(default)]
    pub disturbance: Vec<Step>,
    #[serde(default)]
    pub phases: Vec<Phase>,
}

/// Slack for comparing sample times `k * dt` against schedule and window
/// boundaries, which rounding puts a few ulps off.
const TIME_EPS: f64 = 1e-9;

fn schedule(steps: &[Step], t: f64) -> f64 {
    steps
        .iter()
        .take_while(|s| s.t <= t + TIME_EPS)
        .last()
        .map_or(0.0, |s| s.value)
}

/// The bundled motor scenario.
pub fn motor_scenario() -> Scenario {
    Scenario::parse(presets::MOTOR_SCENARIO).expect("bundled scenario is valid")
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, OffsetFreeError> {
        let s: Scenario =
            serde_yaml::from_str(text).map_err(|e| OffsetFreeError::Yaml(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OffsetFreeError> {
        let bad = |m: &str| Err(OffsetFreeError::Invalid(m.to_string()));
        let n = self.model.a.len();
        if n != 2
            || self.model.a.iter().any(|r| r.len() != n)
            || self.model.b.len() != n
            || self.model.c.len() != n
        {
            return bad("model must have two states: a 2x2, b and c of length 2");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !self.model.a.iter().all(|r| finite(r))
            || !finite(&self.model.b)
            || !finite(&self.model.c)
        {
            return bad("model entries must be finite");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be finite and not negative");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("dt must be positive");
            }
        }
        let p = &self.plant;
        if !(p.u_min < p.u_max)
            || !p.gain_scale.is_finite()
            || !(p.coulomb >= 0.0 && p.coulomb.is_finite())
        {
            return bad("plant needs u_min < u_max, finite gain_scale and coulomb >= 0");
        }
        if p.velocity >= n || p.substeps == 0 || p.substeps > 10_000 {
            return bad("plant velocity index or substeps out of range");
        }
        for sched in [&self.reference, &self.disturbance] {
            if sched
                .iter()
                .any(|s| !s.t.is_finite() || !s.value.is_finite())
            {
                return bad("schedule entries must be finite");
            }
            if sched.windows(2).any(|w| w[1].t <= w[0].t) {
                return bad("schedule times must increase");
            }
        }
        if self.reference.is_empty() {
            return bad("reference schedule is empty");
        }
        if self.phases.iter().any(|ph| !(ph.from < ph.to)) {
            return bad("phase windows need from < to");
        }
        Ok(())
    }

    fn matrices(&self) -> (DMatrix<f64>, DVector<f64>, RowDVector<f64>) {
        let n = self.model.a.len();
        let a = DMatrix::from_fn(n, n, |i, j| self.model.a[i][j]);
        (
            a,
            DVector::from_column_slice(&self.model.b),
            RowDVector::from_row_slice(&self.model.c),
        )
    }

    pub fn reference(&self, t: f64) -> f64 {
        schedule(&self.reference, t)
    }

    pub fn disturbance(&self, t: f64) -> f64 {
        schedule(&self.disturbance, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub theta: f64,
    pub theta_ref: f64,
    pub theta_hat: f64,
    pub dtheta_hat: f64,
    pub d_hat: f64,
    pub u_cmd: f64,
    pub u_applied: f64,
    pub status: Status,
    pub iter: usize,
    pub solve_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMetric {
    pub name: String,
    pub from: f64,
    pub to: f64,
    /// Mean of `|theta - theta_ref|` over samples in the window.
    pub mean_abs_error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub mode: Mode,
    pub rows: Vec<LogRow>,
    /// Samples whose solve did not succeed; the previous input was held.
    pub failures: usize,
}

impl ClosedLoop {
    pub fn metrics(&self, phases: &[Phase]) -> Vec<PhaseMetric> {
        phases
            .iter()
            .map(|ph| {
                let errs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.t >= ph.from - TIME_EPS && r.t < ph.to - TIME_EPS)
                    .map(|r| (r.theta - r.theta_ref).abs())
                    .collect();
                PhaseMetric {
                    name: ph.name.clone(),
                    from: ph.from,
                    to: ph.to,
                    mean_abs_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
                    samples: errs.len(),
                }
            })
            .collect()
    }

    pub fn total_solve_time(&self) -> f64 {
        self.rows.iter().map(|r| r.solve_time_s).sum()
    }

    /// Writes the log as CSV. With `zero_timing` the solve-time column is
    /// written as zero so the file is byte-reproducible.
    pub fn write_csv(&self, w: &mut dyn Write, zero_timing: bool) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            let time = if zero_timing { 0.0 } else { r.solve_time_s };
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e}",
                r.t,
                r.theta,
                r.theta_ref,
                r.theta_hat,
                r.dtheta_hat,
                r.d_hat,
                r.u_cmd,
                r.u_applied,
                r.status.name(),
                r.iter,
                time
            )?;
        }
        Ok(())
    }
}

fn check_controller(inst: &Instance, n: usize) -> Result<(), OffsetFreeError> {
    let want = [("x_meas", n), ("x_s", n), ("u_s", 1), ("u_opt", 1)];
    for (id, len) in want {
        let got = inst
            .len(&Selector::new(id, Stage::At(0)))
            .map_err(|e| OffsetFreeError::Controller(e.to_string()))?;
        if got != len {
            return Err(OffsetFreeError::Controller(format!(
                "`{id}` has {got} rows, expected {len}"
            )));
        }
    }
    Ok(())
}

/// Simulates `scenario` with `inst` as the controller. Each sample:
/// measure, update the observer, pick targets, solve, apply the first
/// input to the plant. A failed solve holds the previous input.
pub fn run_closed_loop(
    scenario: &Scenario,
    mode: Mode,
    inst: &mut Instance,
) -> Result<ClosedLoop, OffsetFreeError> {
    scenario.validate()?;
    let (a, b, c) = scenario.matrices();
    let n = a.nrows();
    check_controller(inst, n)?;
    let dt = inst.bundle().dt();
    if let Some(want) = scenario.dt {
        if (want - dt).abs() > 1e-12 * dt.max(1.0) {
            return Err(OffsetFreeError::Controller(format!(
                "controller interval {dt} differs from scenario dt {want}"
            )));
        }
    }
    let steps = (scenario.duration / dt).round() as usize;
    if steps > 10_000_000 {
        return Err(OffsetFreeError::Invalid(
            "duration / dt out of range".into(),
        ));
    }

    let pc = &scenario.plant;
    let mut plant = LinearPlant::new(a.clone(), &b * pc.gain_scale, c.clone(), dt, pc.substeps)?
        .with_saturation(pc.u_min, pc.u_max);
    if pc.coulomb > 0.0 {
        plant = plant.with_friction(Coulomb {
            level: pc.coulomb,
            velocity: pc.velocity,
        })?;
    }
    let (ad, bd) = super::zoh(&a, &b, dt);
    let kc = &scenario.kalman;
    let mut kf = KalmanFilter::new(AugmentedModel::new(&ad, &bd, &c), &kc.q, kc.r, kc.p0)?;

    let x_meas = Selector::new("x_meas", Stage::Everywhere);
    let x_s_sel = Selector::new("x_s", Stage::Everywhere);
    let u_s_sel = Selector::new("u_s", Stage::Everywhere);
    let u0_sel = Selector::new("u_opt", Stage::At(0));
    let mut u0 = [0.0];

    let mut rows = Vec::with_capacity(steps);
    let mut failures = 0;
    let mut u_cmd = 0.0;
    let mut u_prev = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let y = plant.output();
        let y_r = scenario.reference(t);
        kf.step(u_prev, y);
        let xh = kf.estimate().clone();
        let d_hat = xh[n];
        let (x_s, u_s) = match mode {
            Mode::OffsetFree => target_select(&a, &b, &c, y_r, d_hat)?,
            Mode::Traditional => target_select(&a, &b, &c, y_r, 0.0)?,
        };
        inst.set(&x_meas, &xh.as_slice()[..n])?;
        inst.set(&x_s_sel, x_s.as_slice())?;
        inst.set(&u_s_sel, &[u_s])?;
        let status = inst.solve();
        if status == Status::Solved {
            inst.get(&u0_sel, &mut u0)?;
            u_cmd = u0[0] + u_s;
        } else {
            failures += 1;
        }
        let stats = inst.stats();
        let u_applied = plant.step(u_cmd, scenario.disturbance(t));
        rows.push(LogRow {
            t,
            theta: y,
            theta_ref: y_r,
            theta_hat: xh[0],
            dtheta_hat: xh[1],
            d_hat,
            u_cmd,
            u_applied,
            status,
            iter: stats.iterations,
            solve_time_s: stats.solve_time_s,
        });
        u_prev = u_applied;
    }
    Ok(ClosedLoop {
        mode,
        rows,
        failures,
    })
}
