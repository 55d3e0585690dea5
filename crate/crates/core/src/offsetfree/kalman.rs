//! Kalman filter on the plant model augmented with a constant input
//! disturbance.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::OffsetFreeError;

/// `[x; d]+ = [[Ad, Bd], [0, 1]] [x; d] + [Bd; 0] u`, `y = [C 0] [x; d]`.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
}

impl AugmentedModel {
    pub fn new(ad: &DMatrix<f64>, bd: &DVector<f64>, c: &RowDVector<f64>) -> Self {
        let n = ad.nrows();
        let mut a = DMatrix::identity(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(ad);
        a.view_mut((0, n), (n, 1)).copy_from(bd);
        let mut b = DVector::zeros(n + 1);
        b.rows_mut(0, n).copy_from(bd);
        let mut ca = RowDVector::zeros(n + 1);
        ca.columns_mut(0, n).copy_from(c);
        AugmentedModel { a, b, c: ca }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct KalmanFilter {
    model: AugmentedModel,
    q: DMatrix<f64>,
    r: f64,
    x: DVector<f64>,
    p: DMatrix<f64>,
}

impl KalmanFilter {
    /// `q` is the diagonal of the process noise, `r` the measurement noise
    /// variance and `p0` the initial covariance scale.
    pub fn new(model: AugmentedModel, q: &[f64], r: f64, p0: f64) -> Result<Self, OffsetFreeError> {
        let n = model.n();
        if q.len() != n {
            return Err(OffsetFreeError::Invalid(format!(
                "kalman q needs {n} entries, got {}",
                q.len()
            )));
        }
        if q.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
            || !(r > 0.0 && r.is_finite())
            || !(p0 >= 0.0 && p0.is_finite())
        {
            return Err(OffsetFreeError::Invalid(
                "kalman noise levels must be finite, r > 0".into(),
            ));
        }
        Ok(KalmanFilter {
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            r,
            x: DVector::zeros(n),
            p: DMatrix::identity(n, n) * p0,
            model,
        })
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn set_estimate(&mut self, x: &[f64]) {
        self.x.copy_from_slice(x);
    }

    /// Predicts with the input applied over the last sample, then corrects
    /// with measurement `y`. Returns the innovation.
    pub fn step(&mut self, u_prev: f64, y: f64) -> f64 {
        let m = &self.model;
        self.x = &m.a * &self.x + &m.b * u_prev;
        self.p = &m.a * &self.p * m.a.transpose() + &self.q;
        let pc = &self.p * m.c.transpose();
        let s = (&m.c * &pc)[0] + self.r;
        let gain = pc / s;
        let innovation = y - (&m.c * &self.x)[0];
        self.x += &gain * innovation;
        let n = self.x.len();
        self.p = (DMatrix::identity(n, n) - &gain * &m.c) * &self.p;
        self.p = (&self.p + self.p.transpose()) * 0.5;
        innovation
    }
}
