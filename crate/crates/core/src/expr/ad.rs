//! Symbolic algorithmic differentiation.
//!
//! Expressions are first scalarized (every vector node split into scalar
//! nodes, concat/index resolved), then differentiated node by node. Reverse
//! mode sweeps once per output entry, forward mode once per input entry;
//! both build new expression graphs rather than numbers, so derivatives can
//! be serialized and differentiated again.

use std::collections::HashMap;

use super::{sum, topo_order, BinaryOp, Expr, ExprError, FunctionDef, Node, UnaryOp};

struct Scalar {
    /// Scalarized entries of each requested root.
    roots: Vec<Vec<Expr>>,
    /// Scalar node id of each wrt entry -> column.
    leaves: HashMap<u64, usize>,
    n_in: usize,
}

fn scalarize(roots: &[Expr], wrt: &Expr) -> Result<Scalar, ExprError> {
    if !wrt.is_symbol() {
        return Err(ExprError::NotASymbol);
    }
    let wrt_entries = wrt.entries();
    let leaves = wrt_entries
        .iter()
        .enumerate()
        .map(|(j, e)| (e.id(), j))
        .collect();
    let mut memo: HashMap<u64, Vec<Expr>> = HashMap::new();
    memo.insert(wrt.id(), wrt_entries);
    for node in topo_order(roots) {
        if memo.contains_key(&node.id()) {
            continue;
        }
        let entries = match node.node() {
            Node::Const(v) if v.len() == 1 => vec![node.clone()],
            Node::Const(v) => v.iter().map(|&x| Expr::constant(x)).collect(),
            Node::Symbol(_) => node.entries(),
            Node::Unary(op, a) => memo[&a.id()].iter().map(|x| Expr::unary(*op, x)).collect(),
            Node::Binary(op, a, b) => {
                let (xa, xb) = (&memo[&a.id()], &memo[&b.id()]);
                (0..node.len())
                    .map(|i| {
                        let l = &xa[if xa.len() == 1 { 0 } else { i }];
                        let r = &xb[if xb.len() == 1 { 0 } else { i }];
                        Expr::binary(*op, l, r)
                    })
                    .collect::<Result<_, _>>()?
            }
            Node::Concat(parts) => parts
                .iter()
                .flat_map(|p| memo[&p.id()].iter().cloned())
                .collect(),
            Node::Index(a, s) => memo[&a.id()][*s..*s + node.len()].to_vec(),
        };
        memo.insert(node.id(), entries);
    }
    Ok(Scalar {
        roots: roots.iter().map(|r| memo[&r.id()].clone()).collect(),
        leaves,
        n_in: wrt.len(),
    })
}

struct Differ<'a> {
    leaves: &'a HashMap<u64, usize>,
    active: HashMap<u64, bool>,
}

impl<'a> Differ<'a> {
    fn new(leaves: &'a HashMap<u64, usize>) -> Self {
        Differ {
            leaves,
            active: HashMap::new(),
        }
    }

    /// Topological order of the scalar subgraph under `roots`, recording
    /// which nodes depend on a wrt entry.
    fn order(&mut self, roots: &[Expr]) -> Vec<Expr> {
        let order = topo_order(roots);
        for node in &order {
            if self.active.contains_key(&node.id()) {
                continue;
            }
            let a = self.leaves.contains_key(&node.id())
                || node.children().iter().any(|c| self.active[&c.id()]);
            self.active.insert(node.id(), a);
        }
        order
    }

    fn is_active(&self, e: &Expr) -> bool {
        self.active.get(&e.id()).copied().unwrap_or(false)
    }

    /// Adjoints of every wrt entry for the scalar `y`; missing entries are zero.
    fn reverse(&mut self, y: &Expr) -> Result<Vec<Option<Expr>>, ExprError> {
        let n = self.leaves.len();
        let mut out = vec![None; n];
        let order = self.order(std::slice::from_ref(y));
        if !self.is_active(y) {
            return Ok(out);
        }
        let mut contrib: HashMap<u64, Vec<Expr>> = HashMap::new();
        contrib.insert(y.id(), vec![Expr::constant(1.0)]);
        for node in order.iter().rev() {
            let Some(parts) = contrib.remove(&node.id()) else {
                continue;
            };
            let adj = sum(&parts);
            if let Some(&j) = self.leaves.get(&node.id()) {
                out[j] = Some(adj);
                continue;
            }
            let mut push = |child: &Expr, value: Expr| {
                contrib.entry(child.id()).or_default().push(value);
            };
            match node.node() {
                Node::Unary(op, x) => {
                    if self.is_active(x) {
                        push(x, unary_partial(*op, node, x, &adj)?);
                    }
                }
                Node::Binary(op, x, z) => {
                    let (ax, az) = (self.is_active(x), self.is_active(z));
                    let (dx, dz) = binary_partials(*op, node, x, z, &adj, ax, az)?;
                    if let Some(d) = dx {
                        push(x, d);
                    }
                    if let Some(d) = dz {
                        push(z, d);
                    }
                }
                _ => unreachable!("scalarized graphs contain no structural nodes above leaves"),
            }
        }
        Ok(out)
    }

    /// Tangents of `outputs` along wrt entry `j`.
    fn forward(
        &mut self,
        order: &[Expr],
        outputs: &[Expr],
        j: usize,
    ) -> Result<Vec<Option<Expr>>, ExprError> {
        let mut tan: HashMap<u64, Expr> = HashMap::new();
        for node in order {
            if !self.is_active(node) {
                continue;
            }
            if let Some(&col) = self.leaves.get(&node.id()) {
                if col == j {
                    tan.insert(node.id(), Expr::constant(1.0));
                }
                continue;
            }
            let t = match node.node() {
                Node::Unary(op, x) => match tan.get(&x.id()) {
                    Some(tx) => Some(unary_partial(*op, node, x, tx)?),
                    None => None,
                },
                Node::Binary(op, x, z) => {
                    let (tx, tz) = (tan.get(&x.id()), tan.get(&z.id()));
                    if tx.is_none() && tz.is_none() {
                        None
                    } else {
                        let one = Expr::constant(1.0);
                        let (dx, dz) =
                            binary_partials(*op, node, x, z, &one, tx.is_some(), tz.is_some())?;
                        let mut terms = Vec::new();
                        if let (Some(d), Some(t)) = (dx, tx) {
                            terms.push(d.mul(t)?);
                        }
                        if let (Some(d), Some(t)) = (dz, tz) {
                            terms.push(d.mul(t)?);
                        }
                        Some(sum(&terms))
                    }
                }
                _ => unreachable!("scalarized graphs contain no structural nodes above leaves"),
            };
            if let Some(t) = t {
                tan.insert(node.id(), t);
            }
        }
        Ok(outputs.iter().map(|o| tan.get(&o.id()).cloned()).collect())
    }
}

/// `adj · ∂op(x)/∂x`, with `v` the node value.
fn unary_partial(op: UnaryOp, v: &Expr, x: &Expr, adj: &Expr) -> Result<Expr, ExprError> {
    Ok(match op {
        UnaryOp::Neg => adj.neg(),
        UnaryOp::Sin => adj.mul(&x.cos())?,
        UnaryOp::Cos => adj.mul(&x.sin())?.neg(),
        UnaryOp::Tan => adj.mul(&Expr::constant(1.0).add(&v.mul(v)?)?)?,
        UnaryOp::Exp => adj.mul(v)?,
        UnaryOp::Log => adj.div(x)?,
        UnaryOp::Sqrt => adj.div(&v.scale(2.0))?,
    })
}

/// `adj · ∂op(x,z)/∂x` and `adj · ∂op(x,z)/∂z` for the active operands.
fn binary_partials(
    op: BinaryOp,
    v: &Expr,
    x: &Expr,
    z: &Expr,
    adj: &Expr,
    ax: bool,
    az: bool,
) -> Result<(Option<Expr>, Option<Expr>), ExprError> {
    let dx = |f: &dyn Fn() -> Result<Expr, ExprError>| if ax { f().map(Some) } else { Ok(None) };
    let dz = |f: &dyn Fn() -> Result<Expr, ExprError>| if az { f().map(Some) } else { Ok(None) };
    Ok(match op {
        BinaryOp::Add => (dx(&|| Ok(adj.clone()))?, dz(&|| Ok(adj.clone()))?),
        BinaryOp::Sub => (dx(&|| Ok(adj.clone()))?, dz(&|| Ok(adj.neg()))?),
        BinaryOp::Mul => (dx(&|| adj.mul(z))?, dz(&|| adj.mul(x))?),
        BinaryOp::Div => (dx(&|| adj.div(z))?, dz(&|| Ok(adj.mul(v)?.div(z)?.neg()))?),
        BinaryOp::Pow => {
            let base = || match z.as_const() {
                Some(c) => {
                    let c = c[0];
                    adj.mul(&Expr::constant(c).mul(&x.pow(&Expr::constant(c - 1.0))?)?)
                }
                None => adj.mul(&z.mul(&x.pow(&z.sub(&Expr::constant(1.0))?)?)?),
            };
            (dx(&base)?, dz(&|| adj.mul(&v.mul(&x.log())?))?)
        }
    })
}

fn dense(rows: Vec<Vec<Option<Expr>>>) -> Expr {
    let zero = Expr::constant(0.0);
    let entries: Vec<Expr> = rows
        .into_iter()
        .flatten()
        .map(|e| e.unwrap_or_else(|| zero.clone()))
        .collect();
    Expr::concat(&entries)
}

/// Dense row-major Jacobian of `e` with respect to the symbol `wrt`.
pub fn jacobian_expr(e: &Expr, wrt: &Expr) -> Result<Expr, ExprError> {
    let s = scalarize(std::slice::from_ref(e), wrt)?;
    let outs = &s.roots[0];
    let mut d = Differ::new(&s.leaves);
    if outs.len() <= s.n_in {
        let rows = outs
            .iter()
            .map(|y| d.reverse(y))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(dense(rows))
    } else {
        let order = d.order(outs);
        let mut rows = vec![vec![None; s.n_in]; outs.len()];
        for j in 0..s.n_in {
            for (i, t) in d.forward(&order, outs, j)?.into_iter().enumerate() {
                rows[i][j] = t;
            }
        }
        Ok(dense(rows))
    }
}

/// Gradient (as a column vector) of the scalar `e`.
pub fn gradient(e: &Expr, wrt: &Expr) -> Result<Expr, ExprError> {
    if e.len() != 1 {
        return Err(ExprError::NonScalar(e.len()));
    }
    jacobian_expr(e, wrt)
}

/// Dense row-major Hessian of the scalar `e`. Only the lower triangle is
/// differentiated; the upper triangle reuses the same expressions, so the
/// result is symmetric bit for bit.
pub fn hessian_expr(e: &Expr, wrt: &Expr) -> Result<Expr, ExprError> {
    if e.len() != 1 {
        return Err(ExprError::NonScalar(e.len()));
    }
    let s = scalarize(std::slice::from_ref(e), wrt)?;
    let n = s.n_in;
    let mut d = Differ::new(&s.leaves);
    let grad = d.reverse(&s.roots[0][0])?;
    let mut h: Vec<Vec<Option<Expr>>> = vec![vec![None; n]; n];
    for (i, gi) in grad.iter().enumerate() {
        let Some(gi) = gi else { continue };
        let row = d.reverse(gi)?;
        for (j, hij) in row.into_iter().enumerate().take(i + 1) {
            h[j][i] = hij.clone();
            h[i][j] = hij;
        }
    }
    Ok(dense(h))
}

/// Jacobian of output `output` with respect to input `input`, as a function
/// of the same inputs.
pub fn jacobian(f: &FunctionDef, output: usize, input: usize) -> Result<FunctionDef, ExprError> {
    check_indices(f, Some(output), input)?;
    let j = jacobian_expr(&f.outputs()[output], &f.inputs()[input])?;
    FunctionDef::new(&format!("jac_{}", f.name()), f.inputs().to_vec(), vec![j])
}

/// Hessian of the scalar first output with respect to input `input`.
pub fn hessian(f: &FunctionDef, input: usize) -> Result<FunctionDef, ExprError> {
    check_indices(f, Some(0), input)?;
    let h = hessian_expr(&f.outputs()[0], &f.inputs()[input])?;
    FunctionDef::new(&format!("hess_{}", f.name()), f.inputs().to_vec(), vec![h])
}

fn check_indices(f: &FunctionDef, output: Option<usize>, input: usize) -> Result<(), ExprError> {
    let bad = |reason: String| ExprError::BadFunction {
        function: f.name().to_string(),
        reason,
    };
    if input >= f.n_in() {
        return Err(bad(format!("input index {input} out of range")));
    }
    if let Some(o) = output {
        if o >= f.n_out() {
            return Err(bad(format!("output index {o} out of range")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::sym;

    fn eval1(f: &FunctionDef, x: &[f64]) -> Vec<f64> {
        f.call(&[x]).unwrap()
    }

    #[test]
    fn double_angle_derivative() {
        let phi = sym("phi", 1).unwrap();
        let e = Expr::constant(2.0)
            .mul(&phi.cos())
            .unwrap()
            .mul(&phi.sin())
            .unwrap();
        let f = FunctionDef::new("f", vec![phi], vec![e]).unwrap();
        let j = jacobian(&f, 0, 0).unwrap();
        assert_eq!(eval1(&j, &[0.0]), vec![2.0]);
    }

    #[test]
    fn identity_jacobian() {
        let x = sym("x", 2).unwrap();
        let f = FunctionDef::new("f", vec![x.clone()], vec![x]).unwrap();
        let j = jacobian(&f, 0, 0).unwrap();
        assert_eq!(eval1(&j, &[0.3, -4.0]), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let x = sym("x", 1).unwrap();
        let y = sym("y", 1).unwrap();
        let f =
            FunctionDef::new("f", vec![x.clone(), y.clone()], vec![x.mul(&y).unwrap()]).unwrap();
        let j = jacobian(&f, 0, 0).unwrap();
        assert_eq!(j.call(&[&[3.0], &[5.0]]).unwrap(), vec![5.0]);
    }

    #[test]
    fn hessian_examples() {
        let x = sym("x", 2).unwrap();
        let x0 = x.at(0).unwrap();
        let x1 = x.at(1).unwrap();
        let two = Expr::constant(2.0);
        let quad = x0
            .pow(&two)
            .unwrap()
            .add(&Expr::constant(3.0).mul(&x1.pow(&two).unwrap()).unwrap())
            .unwrap();
        let f = FunctionDef::new("f", vec![x.clone()], vec![quad]).unwrap();
        assert_eq!(
            eval1(&hessian(&f, 0).unwrap(), &[0.7, -1.1]),
            vec![2.0, 0.0, 0.0, 6.0]
        );

        let lin = x0.scale(3.0).sub(&x1).unwrap();
        let f = FunctionDef::new("f", vec![x.clone()], vec![lin]).unwrap();
        assert_eq!(eval1(&hessian(&f, 0).unwrap(), &[0.7, -1.1]), vec![0.0; 4]);

        let bil = x0.mul(&x1).unwrap();
        let f = FunctionDef::new("f", vec![x.clone()], vec![bil]).unwrap();
        assert_eq!(
            eval1(&hessian(&f, 0).unwrap(), &[0.7, -1.1]),
            vec![0.0, 1.0, 1.0, 0.0]
        );

        let f = FunctionDef::new("f", vec![x.clone()], vec![x.clone()]).unwrap();
        assert_eq!(hessian(&f, 0).unwrap_err(), ExprError::NonScalar(2));
    }

    #[test]
    fn forward_and_reverse_agree() {
        // Tall output forces forward mode; compare against per-row reverse.
        let x = sym("x", 2).unwrap();
        let x0 = x.at(0).unwrap();
        let x1 = x.at(1).unwrap();
        let outs = Expr::concat(&[
            x0.sin().mul(&x1).unwrap(),
            x0.exp().div(&x1).unwrap(),
            x1.sqrt().tan(),
            x0.pow(&x1).unwrap(),
        ]);
        let tall = jacobian_expr(&outs, &x).unwrap();
        let rows: Vec<Expr> = outs
            .entries()
            .iter()
            .map(|o| jacobian_expr(o, &x).unwrap())
            .collect();
        let f = FunctionDef::new("f", vec![x.clone()], vec![tall, Expr::concat(&rows)]).unwrap();
        let r = f.eval(&[&[0.4, 1.3]]).unwrap();
        for (a, b) in r[0].iter().zip(&r[1]) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn differentiates_through_slices_and_broadcast() {
        let w = sym("w", 3).unwrap();
        let s = sym("s", 1).unwrap();
        let e = w.slice(1, 2).unwrap().mul(&s).unwrap().sum_entries();
        let f = FunctionDef::new("f", vec![w.clone(), s.clone()], vec![e]).unwrap();
        let jw = jacobian(&f, 0, 0).unwrap();
        let js = jacobian(&f, 0, 1).unwrap();
        let args: [&[f64]; 2] = [&[1.0, 2.0, 3.0], &[4.0]];
        assert_eq!(jw.call(&args).unwrap(), vec![0.0, 4.0, 4.0]);
        assert_eq!(js.call(&args).unwrap(), vec![5.0]);
    }

    #[test]
    fn non_symbol_wrt_rejected() {
        let x = sym("x", 1).unwrap();
        assert_eq!(
            jacobian_expr(&x, &x.sin()).unwrap_err(),
            ExprError::NotASymbol
        );
    }
}
