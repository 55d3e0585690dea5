#![allow(dead_code)]

pub mod qp_oracle;

use nmpc_forge::expr::Expr;
use nmpc_forge::model_io::{bind, parse_model, BoundModel, ModelError};
use nmpc_forge::ocp::{Constraint, Horizon, ObjectiveTerm, OcpSpec};
use nmpc_forge::presets;

pub fn model(text: &str, name: &str) -> BoundModel {
    let spec = parse_model(text).unwrap();
    bind(&spec, name, &|f| Err(ModelError::Missing(f.to_string()))).unwrap()
}

pub fn c(v: f64) -> Expr {
    Expr::constant(v)
}

/// The pendulum workflow: swing from `x_0` to `x_f` with bounded torque.
pub fn pendulum_spec(horizon: Horizon) -> OcpSpec {
    let mut ocp = OcpSpec::new(horizon).unwrap();
    let p = ocp
        .add_model(model(presets::PENDULUM_MODEL, "pendulum"))
        .unwrap();
    let x0 = ocp.parameter("x_0", p.nx(), false).unwrap();
    let xf = ocp.parameter("x_f", p.nx(), false).unwrap();
    let wt = ocp.parameter("Wt", 2, false).unwrap();
    let f = p.get("F").unwrap();
    let dphi = p.get("dphi").unwrap();
    let v = wt
        .at(0)
        .unwrap()
        .mul(&f.pow(&c(2.0)).unwrap())
        .unwrap()
        .add(&wt.at(1).unwrap().mul(&dphi.pow(&c(2.0)).unwrap()).unwrap())
        .unwrap();
    ocp.add_objective(ObjectiveTerm::integral(v)).unwrap();
    let x = p.x();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&x).unwrap(), x0))
        .unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_tf(&x).unwrap(), xf))
        .unwrap();
    ocp.subject_to(Constraint::between(c(-2.0), f, c(2.0)))
        .unwrap();
    ocp
}

/// Pendulum parameter vector `[x_0, x_f, Wt]`.
pub const PENDULUM_P: [f64; 6] = [0.5, 0.0, 0.0, 0.0, 1.0, 1.0];

/// A smaller swing that is reachable with |F| <= 2 in 2 s. From 0.5 rad
/// the peak force needed is about 3.59, so `PENDULUM_P` is infeasible.
pub const PENDULUM_P_REACHABLE: [f64; 6] = [0.25, 0.0, 0.0, 0.0, 1.0, 1.0];

pub const INTEGRATOR_MODEL: &str = "
equations:
  inline:
    ode:
      x: u
differential_states:
  - name: x
controls:
  - name: u
";

/// `xdot = u`, one interval of length 1, from 0 to 1, minimize `u^2`.
pub fn integrator_spec() -> OcpSpec {
    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0)).unwrap();
    let m = ocp.add_model(model(INTEGRATOR_MODEL, "m")).unwrap();
    let u = m.u();
    ocp.add_objective(ObjectiveTerm::integral(u.pow(&c(2.0)).unwrap()))
        .unwrap();
    let x = m.x();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&x).unwrap(), c(0.0)))
        .unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_tf(&x).unwrap(), c(1.0)))
        .unwrap();
    ocp
}
