//! Dense convex QP solver (Goldfarb–Idnani dual active set).
//!
//! ```text
//! min ½ xᵀHx + cᵀx   s.t.  lba <= A x <= uba,  lbx <= x <= ubx
//! ```
//!
//! Multipliers follow `Hx + c + Aᵀλa + λx = 0`: a positive multiplier
//! means an active upper bound, a negative one an active lower bound.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Qp {
    pub n: usize,
    pub m: usize,
    /// Row-major `n x n`, symmetric.
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Row-major `m x n`.
    pub a: Vec<f64>,
    pub lba: Vec<f64>,
    pub uba: Vec<f64>,
    pub lbx: Vec<f64>,
    pub ubx: Vec<f64>,
}

impl Qp {
    /// Unconstrained-variable QP with no rows.
    pub fn new(n: usize, h: Vec<f64>, c: Vec<f64>) -> Qp {
        Qp {
            n,
            m: 0,
            h,
            c,
            a: Vec::new(),
            lba: Vec::new(),
            uba: Vec::new(),
            lbx: vec![f64::NEG_INFINITY; n],
            ubx: vec![f64::INFINITY; n],
        }
    }

    fn check(&self) -> Result<(), QpStatus> {
        let n = self.n;
        let ok = self.h.len() == n * n
            && self.c.len() == n
            && self.a.len() == self.m * n
            && self.lba.len() == self.m
            && self.uba.len() == self.m
            && self.lbx.len() == n
            && self.ubx.len() == n;
        if !ok {
            return Err(QpStatus::Malformed);
        }
        let finite = self
            .h
            .iter()
            .chain(&self.c)
            .chain(&self.a)
            .all(|v| v.is_finite());
        let bounds_ok = self
            .lba
            .iter()
            .chain(&self.lbx)
            .chain(&self.uba)
            .chain(&self.ubx)
            .all(|v| !v.is_nan());
        if !finite || !bounds_ok {
            return Err(QpStatus::Malformed);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Inactive,
    Lower,
    Upper,
    Equal,
}

/// Active constraints, reusable as a warm start.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkingSet {
    pub rows: Vec<Side>,
    pub vars: Vec<Side>,
}

impl WorkingSet {
    pub fn count(&self) -> usize {
        self.rows
            .iter()
            .chain(&self.vars)
            .filter(|s| **s != Side::Inactive)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
    /// Dependent equality constraints or a Hessian that stays indefinite.
    Singular,
    /// Wrong dimensions or non-finite data.
    Malformed,
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// First regularization tried when `H` is not positive definite;
    /// doubled until the Cholesky factorization succeeds.
    pub reg_floor: f64,
    /// Iteration limit; `None` means `10 (n + m)`.
    pub max_iter: Option<usize>,
    /// One step of iterative refinement on the final active set.
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            reg_floor: 1e-8,
            max_iter: None,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub lam_a: Vec<f64>,
    pub lam_x: Vec<f64>,
    pub working: WorkingSet,
    pub iterations: usize,
    /// Regularization added to `H` (0 if none was needed).
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Normal {
    /// `sign * A[i]`.
    Row(usize, f64),
    /// `sign * e_j`.
    Var(usize, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Con {
    normal: Normal,
    /// `normalᵀx >= b` (or `==` for equalities).
    b: f64,
    eq: bool,
}

/// Factorization reused while `H` and the equality rows are unchanged.
#[derive(Debug, Clone)]
struct EqFactor {
    h_bits: Vec<u64>,
    eq_key: Vec<u64>,
    reg: f64,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

/// Reusable solver state. Not shared between threads.
#[derive(Debug, Default, Clone)]
pub struct QpWorkspace {
    cache: Option<EqFactor>,
    pub cache_hits: usize,
}

const DEP_TOL: f64 = 1e-13;

struct Active {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Constraint index per active position.
    set: Vec<usize>,
    u: Vec<f64>,
    rnorm: f64,
}

impl Active {
    fn q(&self) -> usize {
        self.set.len()
    }

    fn d(&self, qp: &Qp, n: Normal) -> Vec<f64> {
        let dim = qp.n;
        match n {
            Normal::Row(i, s) => {
                let a = &qp.a[i * dim..(i + 1) * dim];
                (0..dim)
                    .map(|col| {
                        let mut acc = 0.0;
                        for (k, ak) in a.iter().enumerate() {
                            acc += self.j[(k, col)] * ak;
                        }
                        s * acc
                    })
                    .collect()
            }
            Normal::Var(k, s) => (0..dim).map(|col| s * self.j[(k, col)]).collect(),
        }
    }

    /// Appends a constraint given `d = Jᵀ n`. False if it is linearly
    /// dependent on the active ones.
    fn add(&mut self, mut d: Vec<f64>, idx: usize) -> bool {
        let n = d.len();
        let q = self.q();
        for jj in (q + 1..n).rev() {
            let (a, b) = (d[jj - 1], d[jj]);
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            d[jj - 1] = h;
            d[jj] = 0.0;
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = c * t1 + s * t2;
                self.j[(k, jj)] = s * t1 - c * t2;
            }
        }
        if q >= n || d[q].abs() <= DEP_TOL * self.rnorm.max(1.0) {
            return false;
        }
        for (i, di) in d.iter().enumerate().take(q + 1) {
            self.r[(i, q)] = *di;
        }
        self.rnorm = self.rnorm.max(d[q].abs());
        self.set.push(idx);
        self.u.push(0.0);
        true
    }

    fn drop(&mut self, pos: usize) {
        let n = self.j.nrows();
        let q = self.q();
        for col in pos..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        self.set.remove(pos);
        self.u.remove(pos);
        let q = q - 1;
        for jj in pos..q {
            let (a, b) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            self.r[(jj, jj)] = h;
            self.r[(jj + 1, jj)] = 0.0;
            for k in jj + 1..q {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = c * t1 + s * t2;
                self.r[(jj + 1, k)] = s * t1 - c * t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = c * t1 + s * t2;
                self.j[(k, jj + 1)] = s * t1 - c * t2;
            }
        }
    }

    /// `R⁻¹ v` for the leading `q` entries.
    fn r_solve(&self, v: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut out = v[..q].to_vec();
        for i in (0..q).rev() {
            let mut s = out[i];
            for k in i + 1..q {
                s -= self.r[(i, k)] * out[k];
            }
            out[i] = s / self.r[(i, i)];
        }
        out
    }

    /// `R⁻ᵀ v`.
    fn rt_solve(&self, v: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut out = v[..q].to_vec();
        for i in 0..q {
            let mut s = out[i];
            for k in 0..i {
                s -= self.r[(k, i)] * out[k];
            }
            out[i] = s / self.r[(i, i)];
        }
        out
    }

    /// Solves `min ½ΔᵀHΔ + gᵀΔ  s.t. N_Aᵀ Δ = e`; returns `(Δ, u)` with
    /// `HΔ + g = N_A u`.
    fn eqp(&self, g: &[f64], e: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.j.nrows();
        let q = self.q();
        let jtg: Vec<f64> = (0..n)
            .map(|col| (0..n).map(|k| self.j[(k, col)] * g[k]).sum())
            .collect();
        let y1 = self.rt_solve(e);
        let mut x = vec![0.0; n];
        for k in 0..n {
            let mut s = 0.0;
            for col in 0..q {
                s += self.j[(k, col)] * y1[col];
            }
            for col in q..n {
                s -= self.j[(k, col)] * jtg[col];
            }
            x[k] = s;
        }
        let rhs: Vec<f64> = (0..q).map(|i| y1[i] + jtg[i]).collect();
        (x, self.r_solve(&rhs))
    }
}

fn dot_normal(qp: &Qp, n: Normal, x: &[f64]) -> f64 {
    match n {
        Normal::Row(i, s) => {
            s * qp.a[i * qp.n..(i + 1) * qp.n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        }
        Normal::Var(j, s) => s * x[j],
    }
}

fn constraints(qp: &Qp) -> Result<Vec<Con>, QpStatus> {
    let mut eqs = Vec::new();
    let mut ineqs = Vec::new();
    let mut push = |lo: f64, hi: f64, mk: &dyn Fn(f64) -> Normal| -> Result<(), QpStatus> {
        if lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(QpStatus::Infeasible);
        }
        if lo == hi {
            eqs.push(Con {
                normal: mk(1.0),
                b: lo,
                eq: true,
            });
            return Ok(());
        }
        if lo > f64::NEG_INFINITY {
            ineqs.push(Con {
                normal: mk(1.0),
                b: lo,
                eq: false,
            });
        }
        if hi < f64::INFINITY {
            ineqs.push(Con {
                normal: mk(-1.0),
                b: -hi,
                eq: false,
            });
        }
        Ok(())
    };
    for i in 0..qp.m {
        push(qp.lba[i], qp.uba[i], &|s| Normal::Row(i, s))?;
    }
    for j in 0..qp.n {
        push(qp.lbx[j], qp.ubx[j], &|s| Normal::Var(j, s))?;
    }
    eqs.extend(ineqs);
    Ok(eqs)
}

fn side_of(con: &Con) -> Side {
    let s = match con.normal {
        Normal::Row(_, s) | Normal::Var(_, s) => s,
    };
    if con.eq {
        Side::Equal
    } else if s > 0.0 {
        Side::Lower
    } else {
        Side::Upper
    }
}

/// `L⁻ᵀ` of the Cholesky factor of `H + τI`, with `τ` doubling from the
/// floor until positive definite.
fn factor(qp: &Qp, floor: f64) -> Option<(DMatrix<f64>, f64)> {
    let n = qp.n;
    let h = DMatrix::from_row_slice(n, n, &qp.h);
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut tau = 0.0;
    loop {
        let mut ht = h.clone();
        for i in 0..n {
            ht[(i, i)] += tau;
        }
        if let Some(ch) = ht.cholesky() {
            let l = ch.l();
            // J = L⁻ᵀ: solve Lᵀ J = I.
            let j = l
                .transpose()
                .solve_upper_triangular(&DMatrix::identity(n, n))?;
            if j.iter().all(|v| v.is_finite()) {
                return Some((j, tau));
            }
        }
        tau = if tau == 0.0 { floor } else { tau * 2.0 };
        if !(tau.is_finite() && tau <= 1e12 * scale) {
            return None;
        }
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn eq_key(qp: &Qp, cons: &[Con]) -> Vec<u64> {
    let mut key = Vec::new();
    for c in cons.iter().take_while(|c| c.eq) {
        match c.normal {
            Normal::Row(i, _) => {
                key.push(i as u64);
                key.extend(bits(&qp.a[i * qp.n..(i + 1) * qp.n]));
            }
            Normal::Var(j, _) => key.push(u64::MAX - j as u64),
        }
    }
    key
}

/// Solves a convex QP, optionally warm-started from a previous working set.
pub fn solve_qp(
    qp: &Qp,
    opts: &QpOptions,
    warm: Option<&WorkingSet>,
    ws: &mut QpWorkspace,
) -> QpSolution {
    let n = qp.n;
    let fail = |status: QpStatus, reg: f64| QpSolution {
        status,
        x: vec![0.0; qp.n],
        lam_a: vec![0.0; qp.m],
        lam_x: vec![0.0; qp.n],
        working: WorkingSet {
            rows: vec![Side::Inactive; qp.m],
            vars: vec![Side::Inactive; qp.n],
        },
        iterations: 0,
        reg,
    };
    if let Err(s) = qp.check() {
        return fail(s, 0.0);
    }
    let cons = match constraints(qp) {
        Ok(c) => c,
        Err(s) => return fail(s, 0.0),
    };
    let n_eq = cons.iter().take_while(|c| c.eq).count();
    let h_bits = bits(&qp.h);
    let key = eq_key(qp, &cons);

    let cached = ws
        .cache
        .as_ref()
        .filter(|c| c.h_bits == h_bits && c.eq_key == key && c.q == n_eq);
    let (mut act, reg) = if let Some(c) = cached {
        ws.cache_hits += 1;
        let act = Active {
            j: c.j.clone(),
            r: c.r.clone(),
            set: (0..n_eq).collect(),
            u: vec![0.0; n_eq],
            rnorm: (0..n_eq).fold(0.0f64, |m, i| m.max(c.r[(i, i)].abs())),
        };
        (act, c.reg)
    } else {
        let Some((j, tau)) = factor(qp, opts.reg_floor) else {
            return fail(QpStatus::Singular, 0.0);
        };
        let mut act = Active {
            j,
            r: DMatrix::zeros(n, n),
            set: Vec::new(),
            u: Vec::new(),
            rnorm: 0.0,
        };
        for (i, c) in cons.iter().enumerate().take(n_eq) {
            let d = act.d(qp, c.normal);
            if !act.add(d, i) {
                return fail(QpStatus::Singular, tau);
            }
        }
        ws.cache = Some(EqFactor {
            h_bits,
            eq_key: key,
            reg: tau,
            j: act.j.clone(),
            r: act.r.clone(),
            q: n_eq,
        });
        (act, tau)
    };
    let h_reg = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                qp.h[i * n..(i + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + reg * x[i]
            })
            .collect()
    };

    // Warm start: add the previous active inequalities in one batch.
    if let Some(w) = warm {
        for (i, c) in cons.iter().enumerate().skip(n_eq) {
            let side = match c.normal {
                Normal::Row(r, _) => w.rows.get(r),
                Normal::Var(v, _) => w.vars.get(v),
            };
            if side == Some(&side_of(c)) && act.q() < n {
                let d = act.d(qp, c.normal);
                act.add(d, i);
            }
        }
    }
    let rhs = |act: &Active| -> Vec<f64> { act.set.iter().map(|&i| cons[i].b).collect() };
    let (mut x, u) = act.eqp(&qp.c, &rhs(&act));
    act.u = u;
    // Drop warm-start members with the wrong multiplier sign.
    loop {
        let worst = (n_eq..act.q())
            .filter(|&k| act.u[k] < 0.0)
            .min_by(|&a, &b| act.u[a].total_cmp(&act.u[b]).then(a.cmp(&b)));
        let Some(k) = worst else { break };
        act.drop(k);
        let (x2, u2) = act.eqp(&qp.c, &rhs(&act));
        x = x2;
        act.u = u2;
    }

    let max_iter = opts.max_iter.unwrap_or(10 * (n + qp.m)).max(1);
    let mut iterations = 0;
    let viol_tol = |c: &Con| 1e-12 * c.b.abs().max(1.0);
    let status = 'outer: loop {
        // Most violated inequality, lowest index on ties.
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in cons.iter().enumerate().skip(n_eq) {
            if act.set.contains(&i) {
                continue;
            }
            let s = dot_normal(qp, c.normal, &x) - c.b;
            if s < -viol_tol(c) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else {
            break QpStatus::Optimal;
        };
        let np = cons[p].normal;
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer QpStatus::MaxIter;
            }
            let d = act.d(qp, np);
            let q = act.q();
            let z: Vec<f64> = (0..n)
                .map(|k| (q..n).map(|col| act.j[(k, col)] * d[col]).sum())
                .collect();
            let r = act.r_solve(&d);
            let s = dot_normal(qp, np, &x) - cons[p].b;
            let zn = dot_normal(qp, np, &z);
            let znorm = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let t2 = if znorm > 1e-14 && zn > 0.0 {
                -s / zn
            } else {
                f64::INFINITY
            };
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for k in n_eq..q {
                if r[k] > 0.0 {
                    let t = act.u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(k);
                    }
                }
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                break 'outer QpStatus::Infeasible;
            }
            if t2.is_finite() {
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * zi;
                }
            }
            for k in 0..q {
                act.u[k] -= t * r[k];
            }
            up += t;
            if t2 <= t1 {
                let d = act.d(qp, np);
                if !act.add(d, p) {
                    break 'outer QpStatus::Singular;
                }
                *act.u.last_mut().expect("just added") = up;
                continue 'outer;
            }
            act.drop(drop_at.expect("finite t1 has an index"));
        }
    };

    if status == QpStatus::Optimal && opts.polish && act.q() > 0 {
        let hx = h_reg(&x);
        let mut r1: Vec<f64> = hx.iter().zip(&qp.c).map(|(a, b)| a + b).collect();
        for (k, &i) in act.set.iter().enumerate() {
            match cons[i].normal {
                Normal::Row(row, s) => {
                    for (col, r) in r1.iter_mut().enumerate() {
                        *r -= act.u[k] * s * qp.a[row * n + col];
                    }
                }
                Normal::Var(j, s) => r1[j] -= act.u[k] * s,
            }
        }
        let e: Vec<f64> = act
            .set
            .iter()
            .map(|&i| cons[i].b - dot_normal(qp, cons[i].normal, &x))
            .collect();
        let (dx, du) = act.eqp(&r1, &e);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        for (k, d) in du.iter().enumerate() {
            act.u[k] += d;
            if k >= n_eq {
                act.u[k] = act.u[k].max(0.0);
            }
        }
    }

    let mut lam_a = vec![0.0; qp.m];
    let mut lam_x = vec![0.0; n];
    let mut working = WorkingSet {
        rows: vec![Side::Inactive; qp.m],
        vars: vec![Side::Inactive; n],
    };
    for (k, &i) in act.set.iter().enumerate() {
        let c = &cons[i];
        match c.normal {
            Normal::Row(row, s) => {
                lam_a[row] = -s * act.u[k];
                working.rows[row] = side_of(c);
            }
            Normal::Var(j, s) => {
                lam_x[j] = -s * act.u[k];
                working.vars[j] = side_of(c);
            }
        }
    }
    if x.iter().chain(&lam_a).chain(&lam_x).any(|v| !v.is_finite()) {
        return fail(QpStatus::Singular, reg);
    }
    QpSolution {
        status,
        x,
        lam_a,
        lam_x,
        working,
        iterations,
        reg,
    }
}
