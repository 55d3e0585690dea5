//! Offset-free tracking around an exported controller: a disturbance
//! observer, steady-state target selection and a closed-loop simulator.

mod kalman;
mod plant;
mod scenario;

use nalgebra::{DMatrix, DVector, RowDVector};

pub use kalman::{AugmentedModel, KalmanFilter};
pub use plant::{zoh, Coulomb, LinearPlant};
pub use scenario::{
    motor_scenario, run_closed_loop, ClosedLoop, KalmanCfg, LogRow, ModelCfg, Phase, PhaseMetric,
    PlantCfg, Scenario, Step, CSV_HEADER,
};

use crate::runtime::RuntimeError;

#[derive(Debug, thiserror::Error)]
pub enum OffsetFreeError {
    #[error("{0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Yaml(String),
    #[error("controller does not fit the scenario: {0}")]
    Controller(String),
    #[error("steady-state target is not unique")]
    SingularTarget,
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Targets shifted by the disturbance estimate.
    OffsetFree,
    /// Targets from the reference alone.
    Traditional,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::OffsetFree => "offsetfree",
            Mode::Traditional => "traditional",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "offsetfree" => Some(Mode::OffsetFree),
            "traditional" => Some(Mode::Traditional),
            _ => None,
        }
    }
}

/// Steady state `(x_s, u_s)` with `0 = A x_s + B (u_s + d)` and
/// `C x_s = y_r` for a continuous-time model.
pub fn target_select(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &RowDVector<f64>,
    y_r: f64,
    d: f64,
) -> Result<(DVector<f64>, f64), OffsetFreeError> {
    let n = a.nrows();
    let mut k = DMatrix::zeros(n + 1, n + 1);
    k.view_mut((0, 0), (n, n)).copy_from(a);
    k.view_mut((0, n), (n, 1)).copy_from(b);
    k.view_mut((n, 0), (1, n)).copy_from(c);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = y_r;
    let lu = k.full_piv_lu();
    if !lu.is_invertible() {
        return Err(OffsetFreeError::SingularTarget);
    }
    let sol = lu.solve(&rhs).ok_or(OffsetFreeError::SingularTarget)?;
    Ok((sol.rows(0, n).into_owned(), sol[n] - d))
}
