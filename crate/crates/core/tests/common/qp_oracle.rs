//! Random dense QPs and an exhaustive active-set oracle.

use nalgebra::{DMatrix, DVector};
use nmpc_forge::solver::Qp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Strictly convex QP with n <= 6, m <= 8, feasible by construction.
pub fn random_qp(rng: &mut ChaCha8Rng) -> Qp {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(0..=8);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xf: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut qp = Qp::new(n, h.transpose().as_slice().to_vec(), c);
    qp.m = m;
    qp.a = a;
    let mut n_eq = 0;
    for i in 0..m {
        let ax: f64 = (0..n).map(|j| qp.a[i * n + j] * xf[j]).sum();
        let kind = rng.random_range(0..20);
        let (lo, hi) = match kind {
            0..=6 => (ax - rng.random_range(0.0..0.5), f64::INFINITY),
            7..=13 => (f64::NEG_INFINITY, ax + rng.random_range(0.0..0.5)),
            14..=17 => (
                ax - rng.random_range(0.0..0.3),
                ax + rng.random_range(0.0..0.3),
            ),
            _ if n_eq + 1 < n => {
                n_eq += 1;
                (ax, ax)
            }
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        qp.lba.push(lo);
        qp.uba.push(hi);
    }
    for j in 0..n {
        match rng.random_range(0..10) {
            0..=1 => qp.lbx[j] = xf[j] - rng.random_range(0.0..0.5),
            2..=3 => qp.ubx[j] = xf[j] + rng.random_range(0.0..0.5),
            _ => {}
        }
    }
    qp
}

/// Exhaustive active-set enumeration: the feasible equality-constrained
/// minimizer with the lowest objective over all candidate active sets.
pub fn brute_force(qp: &Qp) -> Vec<f64> {
    let n = qp.n;
    // (normal, rhs) for every one-sided constraint; equalities always active.
    let mut eqs: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut cands: Vec<(Vec<f64>, f64, usize)> = Vec::new();
    let row = |i: usize| qp.a[i * n..(i + 1) * n].to_vec();
    let unit = |j: usize| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        e
    };
    let mut group = 0;
    let mut add = |lo: f64, hi: f64, v: Vec<f64>| {
        if lo == hi {
            eqs.push((v, lo));
            return;
        }
        if lo.is_finite() {
            cands.push((v.clone(), lo, group));
        }
        if hi.is_finite() {
            cands.push((v, hi, group));
        }
        group += 1;
    };
    for i in 0..qp.m {
        add(qp.lba[i], qp.uba[i], row(i));
    }
    for j in 0..n {
        add(qp.lbx[j], qp.ubx[j], unit(j));
    }
    let h = DMatrix::from_row_slice(n, n, &qp.h);
    let c = DVector::from_column_slice(&qp.c);
    let feasible = |x: &DVector<f64>| {
        (0..qp.m).all(|i| {
            let ax: f64 = (0..n).map(|j| qp.a[i * n + j] * x[j]).sum();
            ax >= qp.lba[i] - 1e-9 && ax <= qp.uba[i] + 1e-9
        }) && (0..n).all(|j| x[j] >= qp.lbx[j] - 1e-9 && x[j] <= qp.ubx[j] + 1e-9)
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let k = cands.len();
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, vec![])];
    while let Some((start, set)) = stack.pop() {
        let active: Vec<(Vec<f64>, f64)> = eqs
            .iter()
            .cloned()
            .chain(set.iter().map(|&i| (cands[i].0.clone(), cands[i].1)))
            .collect();
        let q = active.len();
        let mut kkt = DMatrix::zeros(n + q, n + q);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        let mut rhs = DVector::zeros(n + q);
        for i in 0..n {
            rhs[i] = -c[i];
        }
        for (r, (v, b)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = v[j];
                kkt[(j, n + r)] = v[j];
            }
            rhs[n + r] = *b;
        }
        if let Some(sol) = kkt.clone().full_piv_lu().solve(&rhs) {
            let x = sol.rows(0, n).into_owned();
            if (&kkt * &sol - &rhs).amax() < 1e-9 && feasible(&x) {
                let obj = 0.5 * x.dot(&(&h * &x)) + c.dot(&x);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, x.as_slice().to_vec()));
                }
            }
        }
        if q < n {
            for i in start..k {
                if set.iter().any(|&s| cands[s].2 == cands[i].2) {
                    continue;
                }
                let mut s2 = set.clone();
                s2.push(i);
                stack.push((i + 1, s2));
            }
        }
    }
    best.expect("generated QPs are feasible").1
}
