//! Simulated plant: linear dynamics integrated exactly under zero-order
//! hold, with input saturation and optional Coulomb friction.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::OffsetFreeError;

/// Exact discretization of `x' = A x + B u` over `h` with `u` held
/// constant, from the exponential of `[[A, B], [0, 0]] h`.
pub fn zoh(a: &DMatrix<f64>, b: &DVector<f64>, h: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, 1)).copy_from(b);
    let e = (m * h).exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, 1)).column(0).into_owned(),
    )
}

/// Constant-magnitude friction opposing the velocity state, entering
/// through the input channel. A body at rest stays at rest while the
/// drive magnitude is at most `level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coulomb {
    pub level: f64,
    pub velocity: usize,
}

#[derive(Debug, Clone)]
pub struct LinearPlant {
    c: RowDVector<f64>,
    u_min: f64,
    u_max: f64,
    friction: Option<Coulomb>,
    substeps: usize,
    ad: DMatrix<f64>,
    bd: DVector<f64>,
    x: DVector<f64>,
}

impl LinearPlant {
    /// `dt` is the sample time; each sample is split into `substeps`
    /// exact sub-steps so friction can switch within a sample.
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        dt: f64,
        substeps: usize,
    ) -> Result<Self, OffsetFreeError> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || c.len() != n || n == 0 {
            return Err(OffsetFreeError::Invalid(
                "plant matrices have inconsistent shapes".into(),
            ));
        }
        if !(dt > 0.0 && dt.is_finite()) || substeps == 0 {
            return Err(OffsetFreeError::Invalid(
                "plant needs dt > 0 and at least one sub-step".into(),
            ));
        }
        let (ad, bd) = zoh(&a, &b, dt / substeps as f64);
        Ok(LinearPlant {
            c,
            u_min: f64::NEG_INFINITY,
            u_max: f64::INFINITY,
            friction: None,
            substeps,
            ad,
            bd,
            x: DVector::zeros(n),
        })
    }

    pub fn with_saturation(mut self, u_min: f64, u_max: f64) -> Self {
        self.u_min = u_min;
        self.u_max = u_max;
        self
    }

    pub fn with_friction(mut self, f: Coulomb) -> Result<Self, OffsetFreeError> {
        if f.velocity >= self.x.len() || !(f.level >= 0.0) {
            return Err(OffsetFreeError::Invalid(
                "friction needs a valid velocity index and level >= 0".into(),
            ));
        }
        self.friction = Some(f);
        Ok(self)
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn set_state(&mut self, x: &[f64]) {
        self.x.copy_from_slice(x);
    }

    pub fn output(&self) -> f64 {
        (&self.c * &self.x)[0]
    }

    /// Advances one sample with command `u` and input disturbance `d`.
    /// Returns the input after saturation.
    pub fn step(&mut self, u: f64, d: f64) -> f64 {
        let u = u.clamp(self.u_min, self.u_max);
        let drive = u + d;
        for _ in 0..self.substeps {
            let Some(f) = self.friction else {
                self.x = &self.ad * &self.x + &self.bd * drive;
                continue;
            };
            let v = self.x[f.velocity];
            if v == 0.0 && drive.abs() <= f.level {
                continue;
            }
            let fric = if v != 0.0 {
                f.level * v.signum()
            } else {
                f.level * drive.signum()
            };
            let mut next = &self.ad * &self.x + &self.bd * (drive - fric);
            if v != 0.0 && next[f.velocity].signum() != v.signum() {
                next[f.velocity] = 0.0;
            }
            self.x = next;
        }
        u
    }
}
