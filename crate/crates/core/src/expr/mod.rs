//! Immutable expression graphs over real vectors.
//!
//! An [`Expr`] is a node in a directed acyclic graph. Every node has a
//! static length (number of scalar entries); elementwise binary operations
//! accept equal lengths or a scalar operand that is broadcast. Nodes are
//! reference counted and never mutated, so graphs share structure freely
//! and can be sent across threads.
//!
//! Symbols are identified by node identity, not by name: two calls to
//! [`sym`] with the same name produce two distinct symbols.

mod ad;
mod eval;
mod function;
mod serial;
pub mod text;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use ad::{gradient, hessian, hessian_expr, jacobian, jacobian_expr};
pub use function::FunctionDef;
pub use serial::{deserialize, graph_text, serialize};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("invalid symbol name {0:?}")]
    InvalidName(String),
    #[error("symbol length must be at least 1")]
    EmptySymbol,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("index range {start}..{end} out of bounds for length {len}")]
    IndexOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("function {function}: {reason}")]
    BadFunction { function: String, reason: String },
    #[error("expected scalar output, found length {0}")]
    NonScalar(usize),
    #[error("differentiation variable must be a symbol")]
    NotASymbol,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "neg" => UnaryOp::Neg,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "tan" => UnaryOp::Tan,
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tan => x.tan(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "add" => BinaryOp::Add,
            "sub" => BinaryOp::Sub,
            "mul" => BinaryOp::Mul,
            "div" => BinaryOp::Div,
            "pow" => BinaryOp::Pow,
            _ => return None,
        })
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

pub(crate) enum Node {
    Const(Vec<f64>),
    Symbol(String),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
    Concat(Vec<Expr>),
    /// Contiguous slice starting at the given offset; length is the node's.
    Index(Expr, usize),
}

pub(crate) struct Inner {
    id: u64,
    len: usize,
    node: Node,
}

impl Drop for Inner {
    // Long sum chains and unrolled integrators produce deep graphs; dropping
    // them recursively would overflow the stack.
    fn drop(&mut self) {
        let mut stack = Vec::new();
        take_children(&mut self.node, &mut stack);
        while let Some(e) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(e.0) {
                take_children(&mut inner.node, &mut stack);
            }
        }
    }
}

fn take_children(node: &mut Node, out: &mut Vec<Expr>) {
    match std::mem::replace(node, Node::Const(Vec::new())) {
        Node::Const(_) | Node::Symbol(_) => {}
        Node::Unary(_, a) | Node::Index(a, _) => out.push(a),
        Node::Binary(_, a, b) => {
            out.push(a);
            out.push(b);
        }
        Node::Concat(parts) => out.extend(parts),
    }
}

/// Handle to an immutable expression node.
#[derive(Clone)]
pub struct Expr(Arc<Inner>);

/// Creates a fresh symbol of length `n`.
pub fn sym(name: &str, n: usize) -> Result<Expr, ExprError> {
    if !is_identifier(name) {
        return Err(ExprError::InvalidName(name.to_string()));
    }
    if n == 0 {
        return Err(ExprError::EmptySymbol);
    }
    Ok(Expr::raw(Node::Symbol(name.to_string()), n))
}

/// Identifier grammar shared by symbols, model components and parameters:
/// `[A-Za-z_][A-Za-z0-9_]*`, optionally dotted.
pub fn is_identifier(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|part| {
            let mut chars = part.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

impl Expr {
    fn raw(node: Node, len: usize) -> Expr {
        Expr(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            len,
            node,
        }))
    }

    /// Symbol constructor without validation; zero-length symbols are used
    /// internally for empty parameter vectors.
    pub(crate) fn symbol_unchecked(name: &str, n: usize) -> Expr {
        Expr::raw(Node::Symbol(name.to_string()), n)
    }

    pub fn constant(value: f64) -> Expr {
        Expr::raw(Node::Const(vec![value]), 1)
    }

    pub fn constant_vec(values: Vec<f64>) -> Expr {
        let n = values.len();
        Expr::raw(Node::Const(values), n)
    }

    pub fn zeros(n: usize) -> Expr {
        Expr::constant_vec(vec![0.0; n])
    }

    /// Empty (length 0) expression.
    pub fn empty() -> Expr {
        Expr::constant_vec(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len
    }

    pub fn is_empty(&self) -> bool {
        self.0.len == 0
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0.node
    }

    pub fn ptr_eq(&self, other: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn is_symbol(&self) -> bool {
        matches!(self.0.node, Node::Symbol(_))
    }

    pub fn symbol_name(&self) -> Option<&str> {
        match &self.0.node {
            Node::Symbol(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_const(&self) -> Option<&[f64]> {
        match &self.0.node {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_const_value(&self, value: f64) -> bool {
        matches!(self.as_const(), Some(v) if v.iter().all(|&x| x == value))
    }

    pub(crate) fn children(&self) -> Vec<&Expr> {
        match &self.0.node {
            Node::Const(_) | Node::Symbol(_) => Vec::new(),
            Node::Unary(_, a) | Node::Index(a, _) => vec![a],
            Node::Binary(_, a, b) => vec![a, b],
            Node::Concat(parts) => parts.iter().collect(),
        }
    }

    pub fn unary(op: UnaryOp, a: &Expr) -> Expr {
        if let Some(v) = a.as_const() {
            return Expr::constant_vec(v.iter().map(|&x| op.apply(x)).collect());
        }
        Expr::raw(Node::Unary(op, a.clone()), a.len())
    }

    /// Elementwise binary operation with scalar broadcasting and light
    /// constant folding (`x+0`, `x-0`, `x*1`, `x/1`, `x^1`).
    pub fn binary(op: BinaryOp, a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
        let len = broadcast_len(a.len(), b.len()).ok_or_else(|| {
            ExprError::LengthMismatch(format!(
                "{} of lengths {} and {}",
                op.name(),
                a.len(),
                b.len()
            ))
        })?;
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let values = (0..len)
                .map(|i| op.apply(x[bi(i, x.len())], y[bi(i, y.len())]))
                .collect();
            return Ok(Expr::constant_vec(values));
        }
        let keep_a = a.len() == len;
        let keep_b = b.len() == len;
        match op {
            BinaryOp::Add if keep_a && b.is_const_value(0.0) => return Ok(a.clone()),
            BinaryOp::Add if keep_b && a.is_const_value(0.0) => return Ok(b.clone()),
            BinaryOp::Sub if keep_a && b.is_const_value(0.0) => return Ok(a.clone()),
            BinaryOp::Mul if keep_a && b.is_const_value(1.0) => return Ok(a.clone()),
            BinaryOp::Mul if keep_b && a.is_const_value(1.0) => return Ok(b.clone()),
            BinaryOp::Div if keep_a && b.is_const_value(1.0) => return Ok(a.clone()),
            BinaryOp::Pow if keep_a && b.is_const_value(1.0) => return Ok(a.clone()),
            _ => {}
        }
        Ok(Expr::raw(Node::Binary(op, a.clone(), b.clone()), len))
    }

    /// Raw binary node without folding; used by the deserializer so that a
    /// round-tripped graph is structurally identical to the original.
    pub(crate) fn binary_raw(op: BinaryOp, a: &Expr, b: &Expr) -> Result<Expr, ExprError> {
        let len = broadcast_len(a.len(), b.len())
            .ok_or_else(|| ExprError::LengthMismatch(format!("{} operands", op.name())))?;
        Ok(Expr::raw(Node::Binary(op, a.clone(), b.clone()), len))
    }

    pub(crate) fn unary_raw(op: UnaryOp, a: &Expr) -> Expr {
        Expr::raw(Node::Unary(op, a.clone()), a.len())
    }

    pub(crate) fn concat_raw(parts: Vec<Expr>) -> Expr {
        let len = parts.iter().map(Expr::len).sum();
        Expr::raw(Node::Concat(parts), len)
    }

    pub(crate) fn index_raw(a: &Expr, start: usize, len: usize) -> Result<Expr, ExprError> {
        if start + len > a.len() {
            return Err(ExprError::IndexOutOfBounds {
                start,
                end: start + len,
                len: a.len(),
            });
        }
        Ok(Expr::raw(Node::Index(a.clone(), start), len))
    }

    pub fn concat(parts: &[Expr]) -> Expr {
        let parts: Vec<Expr> = parts.iter().filter(|p| !p.is_empty()).cloned().collect();
        match parts.len() {
            0 => Expr::empty(),
            1 => parts[0].clone(),
            _ => {
                if parts.iter().all(|p| p.as_const().is_some()) {
                    let values = parts
                        .iter()
                        .flat_map(|p| p.as_const().unwrap().iter().copied())
                        .collect();
                    return Expr::constant_vec(values);
                }
                Expr::concat_raw(parts)
            }
        }
    }

    /// Slice `[start, start+len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Expr, ExprError> {
        if start + len > self.len() {
            return Err(ExprError::IndexOutOfBounds {
                start,
                end: start + len,
                len: self.len(),
            });
        }
        if start == 0 && len == self.len() {
            return Ok(self.clone());
        }
        match self.node() {
            Node::Const(v) => Ok(Expr::constant_vec(v[start..start + len].to_vec())),
            Node::Index(inner, s0) => inner.slice(s0 + start, len),
            Node::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    if start >= offset && start + len <= offset + p.len() {
                        return p.slice(start - offset, len);
                    }
                    offset += p.len();
                }
                Expr::index_raw(self, start, len)
            }
            _ => Expr::index_raw(self, start, len),
        }
    }

    /// Scalar entry `i`.
    pub fn at(&self, i: usize) -> Result<Expr, ExprError> {
        self.slice(i, 1)
    }

    /// Scalar entries of this expression.
    pub fn entries(&self) -> Vec<Expr> {
        (0..self.len())
            .map(|i| self.at(i).expect("in range"))
            .collect()
    }

    pub fn neg(&self) -> Expr {
        Expr::unary(UnaryOp::Neg, self)
    }
    pub fn sin(&self) -> Expr {
        Expr::unary(UnaryOp::Sin, self)
    }
    pub fn cos(&self) -> Expr {
        Expr::unary(UnaryOp::Cos, self)
    }
    pub fn tan(&self) -> Expr {
        Expr::unary(UnaryOp::Tan, self)
    }
    pub fn exp(&self) -> Expr {
        Expr::unary(UnaryOp::Exp, self)
    }
    pub fn log(&self) -> Expr {
        Expr::unary(UnaryOp::Log, self)
    }
    pub fn sqrt(&self) -> Expr {
        Expr::unary(UnaryOp::Sqrt, self)
    }

    pub fn add(&self, other: &Expr) -> Result<Expr, ExprError> {
        Expr::binary(BinaryOp::Add, self, other)
    }
    pub fn sub(&self, other: &Expr) -> Result<Expr, ExprError> {
        Expr::binary(BinaryOp::Sub, self, other)
    }
    pub fn mul(&self, other: &Expr) -> Result<Expr, ExprError> {
        Expr::binary(BinaryOp::Mul, self, other)
    }
    pub fn div(&self, other: &Expr) -> Result<Expr, ExprError> {
        Expr::binary(BinaryOp::Div, self, other)
    }
    pub fn pow(&self, other: &Expr) -> Result<Expr, ExprError> {
        Expr::binary(BinaryOp::Pow, self, other)
    }

    pub fn scale(&self, factor: f64) -> Expr {
        self.mul(&Expr::constant(factor)).expect("scalar broadcast")
    }

    /// Sum of all entries as a scalar.
    pub fn sum_entries(&self) -> Expr {
        sum(&self.entries())
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&self, other: &Expr) -> Result<Expr, ExprError> {
        if self.len() != other.len() {
            return Err(ExprError::LengthMismatch(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.mul(other)?.sum_entries())
    }

    /// Symbols reachable from this expression, in first-visit order.
    pub fn free_symbols(&self) -> Vec<Expr> {
        free_symbols(std::slice::from_ref(self))
    }

    /// True if any symbol in `symbols` is reachable from this expression.
    pub fn depends_on(&self, symbols: &[Expr]) -> bool {
        let ids: Vec<u64> = symbols.iter().map(Expr::id).collect();
        self.free_symbols().iter().any(|s| ids.contains(&s.id()))
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(v) if v.len() == 1 => write!(f, "{:?}", v[0]),
            Node::Const(v) => write!(f, "{v:?}"),
            Node::Symbol(n) => write!(f, "{n}"),
            Node::Unary(op, a) => write!(f, "{}({a:?})", op.name()),
            Node::Binary(op, a, b) => write!(f, "{}({a:?}, {b:?})", op.name()),
            Node::Concat(parts) => write!(f, "concat{parts:?}"),
            Node::Index(a, s) => write!(f, "{a:?}[{s}..{}]", s + self.len()),
        }
    }
}

#[inline]
fn bi(i: usize, len: usize) -> usize {
    if len == 1 {
        0
    } else {
        i
    }
}

pub(crate) fn broadcast_len(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Balanced pairwise sum of scalar (or equal-length) terms. An empty list
/// sums to the scalar zero.
pub fn sum(terms: &[Expr]) -> Expr {
    match terms.len() {
        0 => Expr::constant(0.0),
        1 => terms[0].clone(),
        _ => {
            let mid = terms.len() / 2;
            sum(&terms[..mid])
                .add(&sum(&terms[mid..]))
                .expect("sum terms must have compatible lengths")
        }
    }
}

/// Iterative post-order traversal (children before parents) of every node
/// reachable from `roots`, each node visited once.
pub(crate) fn topo_order(roots: &[Expr]) -> Vec<Expr> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Expr, bool)> = roots.iter().rev().map(|r| (r.clone(), false)).collect();
    while let Some((e, expanded)) = stack.pop() {
        if expanded {
            order.push(e);
            continue;
        }
        if !seen.insert(e.id()) {
            continue;
        }
        stack.push((e.clone(), true));
        for c in e.children().into_iter().rev() {
            if !seen.contains(&c.id()) {
                stack.push((c.clone(), false));
            }
        }
    }
    order
}

pub(crate) fn free_symbols(roots: &[Expr]) -> Vec<Expr> {
    topo_order(roots)
        .into_iter()
        .filter(Expr::is_symbol)
        .collect()
}

/// Replaces every occurrence of the bound symbols. Bindings are keyed by
/// symbol identity; replacement lengths must match.
pub fn substitute(e: &Expr, bindings: &[(Expr, Expr)]) -> Result<Expr, ExprError> {
    Ok(substitute_many(std::slice::from_ref(e), bindings)?.remove(0))
}

/// [`substitute`] over several roots with a shared memo, preserving sharing
/// between them.
pub fn substitute_many(roots: &[Expr], bindings: &[(Expr, Expr)]) -> Result<Vec<Expr>, ExprError> {
    let mut memo: HashMap<u64, Expr> = HashMap::new();
    for (s, r) in bindings {
        if !s.is_symbol() {
            return Err(ExprError::LengthMismatch(
                "substitution key is not a symbol".into(),
            ));
        }
        if s.len() != r.len() {
            return Err(ExprError::LengthMismatch(format!(
                "binding for {} has length {}, expected {}",
                s.symbol_name().unwrap_or("?"),
                r.len(),
                s.len()
            )));
        }
        memo.insert(s.id(), r.clone());
    }
    if bindings.is_empty() {
        return Ok(roots.to_vec());
    }
    for node in topo_order(roots) {
        if memo.contains_key(&node.id()) {
            continue;
        }
        let get = |c: &Expr| memo.get(&c.id()).cloned().unwrap_or_else(|| c.clone());
        let rebuilt = match node.node() {
            Node::Const(_) | Node::Symbol(_) => continue,
            Node::Unary(op, a) => {
                let na = get(a);
                if na.ptr_eq(a) {
                    continue;
                }
                Expr::unary(*op, &na)
            }
            Node::Binary(op, a, b) => {
                let (na, nb) = (get(a), get(b));
                if na.ptr_eq(a) && nb.ptr_eq(b) {
                    continue;
                }
                Expr::binary(*op, &na, &nb)?
            }
            Node::Concat(parts) => {
                let np: Vec<Expr> = parts.iter().map(get).collect();
                if np.iter().zip(parts).all(|(x, y)| x.ptr_eq(y)) {
                    continue;
                }
                Expr::concat(&np)
            }
            Node::Index(a, s) => {
                let na = get(a);
                if na.ptr_eq(a) {
                    continue;
                }
                na.slice(*s, node.len())?
            }
        };
        memo.insert(node.id(), rebuilt);
    }
    Ok(roots
        .iter()
        .map(|r| memo.get(&r.id()).cloned().unwrap_or_else(|| r.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_constructor() {
        let phi = sym("phi", 1).unwrap();
        assert_eq!(phi.len(), 1);
        let x = sym("x", 2).unwrap();
        let u = sym("u", 1).unwrap();
        assert_eq!(Expr::concat(&[x, u]).len(), 3);
        assert!(sym("", 1).is_err());
        assert!(sym("x", 0).is_err());
        assert!(sym("1x", 1).is_err());
        assert!(sym("a b", 1).is_err());
    }

    #[test]
    fn same_name_distinct_symbols() {
        let a = sym("x", 1).unwrap();
        let b = sym("x", 1).unwrap();
        assert!(!a.ptr_eq(&b));
        let e = a.add(&b).unwrap();
        assert_eq!(e.free_symbols().len(), 2);
    }

    #[test]
    fn broadcasting_rules() {
        let x = sym("x", 3).unwrap();
        let s = sym("s", 1).unwrap();
        assert_eq!(x.mul(&s).unwrap().len(), 3);
        assert!(x.add(&sym("y", 2).unwrap()).is_err());
    }

    #[test]
    fn constant_folding() {
        let e = Expr::constant(2.0).mul(&Expr::constant(3.0)).unwrap();
        assert_eq!(e.as_const(), Some(&[6.0][..]));
        let x = sym("x", 1).unwrap();
        assert!(x.add(&Expr::constant(0.0)).unwrap().ptr_eq(&x));
        assert!(Expr::constant(1.0).mul(&x).unwrap().ptr_eq(&x));
    }

    #[test]
    fn slicing_through_concat() {
        let x = sym("x", 2).unwrap();
        let u = sym("u", 1).unwrap();
        let c = Expr::concat(&[x.clone(), u.clone()]);
        assert!(c.slice(2, 1).unwrap().ptr_eq(&u));
        assert!(c.slice(0, 2).unwrap().ptr_eq(&x));
        assert!(c.slice(2, 2).is_err());
    }

    #[test]
    fn substitute_replaces_and_keeps_unbound() {
        let phi = sym("phi", 1).unwrap();
        let e = phi.add(&Expr::constant(1.0)).unwrap();
        let r = substitute(&e, &[(phi.clone(), Expr::constant(2.0))]).unwrap();
        assert_eq!(r.as_const(), Some(&[3.0][..]));
        let same = substitute(&phi, &[]).unwrap();
        assert!(same.ptr_eq(&phi));
        assert!(substitute(&e, &[(phi, Expr::zeros(2))]).is_err());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = sym("x", 1).unwrap();
        let mut e = x.clone();
        for _ in 0..200_000 {
            e = Expr::binary(BinaryOp::Add, &e, &x).unwrap();
        }
        assert_eq!(topo_order(&[e.clone()]).len(), 200_001);
        drop(e);
    }
}
