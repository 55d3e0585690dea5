//! Line-oriented text format for [`FunctionDef`]s (`.fns`).
//!
//! ```text
//! fnser v1 f
//! in x 2
//! n0 sym x
//! n1 index n0 0 1
//! n2 sin n1
//! out n2
//! ```
//!
//! Constants are written with the shortest decimal representation that
//! parses back to the same double, so a round trip is bit exact.

use std::collections::HashMap;
use std::fmt::Write;

use super::{is_identifier, topo_order, BinaryOp, Expr, ExprError, FunctionDef, Node, UnaryOp};

const HEADER: &str = "fnser v1";
/// Upper bound on any declared length, to keep hostile files from
/// requesting absurd allocations.
const MAX_LEN: usize = 1 << 24;

pub fn serialize(f: &FunctionDef) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER} {}", f.name());
    for input in f.inputs() {
        let _ = writeln!(
            out,
            "in {} {}",
            input.symbol_name().unwrap_or("?"),
            input.len()
        );
    }
    out.push_str(&graph_text(f.outputs()));
    out
}

/// Node and output lines for the graph under `roots`. Structurally equal
/// graphs give equal text, which makes this usable as a sort key.
pub fn graph_text(roots: &[Expr]) -> String {
    let mut out = String::new();
    let mut num: HashMap<u64, usize> = HashMap::new();
    for (k, node) in topo_order(roots).iter().enumerate() {
        num.insert(node.id(), k);
        let _ = write!(out, "n{k} ");
        match node.node() {
            Node::Const(v) => {
                out.push_str("const");
                for x in v {
                    let _ = write!(out, " {x:?}");
                }
            }
            Node::Symbol(name) => {
                let _ = write!(out, "sym {name}");
            }
            Node::Unary(op, a) => {
                let _ = write!(out, "{} n{}", op.name(), num[&a.id()]);
            }
            Node::Binary(op, a, b) => {
                let _ = write!(out, "{} n{} n{}", op.name(), num[&a.id()], num[&b.id()]);
            }
            Node::Concat(parts) => {
                out.push_str("concat");
                for p in parts {
                    let _ = write!(out, " n{}", num[&p.id()]);
                }
            }
            Node::Index(a, s) => {
                let _ = write!(out, "index n{} {s} {}", num[&a.id()], node.len());
            }
        }
        out.push('\n');
    }
    for o in roots {
        let _ = writeln!(out, "out n{}", num[&o.id()]);
    }
    out
}

pub fn deserialize(text: &str) -> Result<FunctionDef, ExprError> {
    let err = |line: usize, reason: String| ExprError::Parse { line, reason };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty input".into()))?;
    let name = header
        .strip_prefix(HEADER)
        .and_then(|rest| rest.strip_prefix(' '))
        .filter(|n| !n.is_empty() && !n.contains(char::is_whitespace))
        .ok_or_else(|| err(1, format!("expected header `{HEADER} <name>`")))?;

    let mut inputs: Vec<Expr> = Vec::new();
    let mut by_name: HashMap<String, Expr> = HashMap::new();
    let mut nodes: Vec<Expr> = Vec::new();
    let mut outputs: Vec<Expr> = Vec::new();

    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            return Err(err(ln, "blank line".into()));
        }
        let node_ref = |tok: &str| -> Result<Expr, ExprError> {
            let k: usize = tok
                .strip_prefix('n')
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| err(ln, format!("bad node reference {tok:?}")))?;
            nodes
                .get(k)
                .cloned()
                .ok_or_else(|| err(ln, format!("reference to undefined node n{k}")))
        };
        let int = |tok: &str| -> Result<usize, ExprError> {
            tok.parse::<usize>()
                .ok()
                .filter(|&v| v <= MAX_LEN)
                .ok_or_else(|| err(ln, format!("bad integer {tok:?}")))
        };
        match toks[0] {
            "in" => {
                if !nodes.is_empty() || !outputs.is_empty() {
                    return Err(err(ln, "input declared after nodes".into()));
                }
                if toks.len() != 3 {
                    return Err(err(ln, "expected `in <name> <len>`".into()));
                }
                let len = int(toks[2])?;
                if !is_identifier(toks[1]) {
                    return Err(err(ln, format!("invalid input name {:?}", toks[1])));
                }
                // Zero-length inputs are legal here: empty parameter vectors.
                let s = Expr::symbol_unchecked(toks[1], len);
                if by_name.insert(toks[1].to_string(), s.clone()).is_some() {
                    return Err(err(ln, format!("duplicate input {:?}", toks[1])));
                }
                inputs.push(s);
            }
            "out" => {
                if toks.len() != 2 {
                    return Err(err(ln, "expected `out n<k>`".into()));
                }
                outputs.push(node_ref(toks[1])?);
            }
            label => {
                if !outputs.is_empty() {
                    return Err(err(ln, "node after outputs".into()));
                }
                if label != format!("n{}", nodes.len()) {
                    return Err(err(ln, format!("expected node label n{}", nodes.len())));
                }
                let op = *toks
                    .get(1)
                    .ok_or_else(|| err(ln, "missing opcode".into()))?;
                let args = &toks[2..];
                let arity = |n: usize| {
                    if args.len() == n {
                        Ok(())
                    } else {
                        Err(err(ln, format!("{op} takes {n} arguments")))
                    }
                };
                let node = match op {
                    "const" => {
                        if args.len() > MAX_LEN {
                            return Err(err(ln, "constant too long".into()));
                        }
                        let values = args
                            .iter()
                            .map(|t| {
                                t.parse::<f64>()
                                    .map_err(|_| err(ln, format!("bad number {t:?}")))
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        Expr::constant_vec(values)
                    }
                    "sym" => {
                        arity(1)?;
                        by_name
                            .get(args[0])
                            .cloned()
                            .ok_or_else(|| err(ln, format!("unknown input {:?}", args[0])))?
                    }
                    "concat" => {
                        let parts = args
                            .iter()
                            .map(|t| node_ref(t))
                            .collect::<Result<Vec<_>, _>>()?;
                        if parts.iter().map(Expr::len).sum::<usize>() > MAX_LEN {
                            return Err(err(ln, "concat too long".into()));
                        }
                        Expr::concat_raw(parts)
                    }
                    "index" => {
                        arity(3)?;
                        let a = node_ref(args[0])?;
                        Expr::index_raw(&a, int(args[1])?, int(args[2])?)
                            .map_err(|e| err(ln, e.to_string()))?
                    }
                    other => {
                        if let Some(u) = UnaryOp::from_name(other) {
                            arity(1)?;
                            Expr::unary_raw(u, &node_ref(args[0])?)
                        } else if let Some(b) = BinaryOp::from_name(other) {
                            arity(2)?;
                            Expr::binary_raw(b, &node_ref(args[0])?, &node_ref(args[1])?)
                                .map_err(|e| err(ln, e.to_string()))?
                        } else {
                            return Err(err(ln, format!("unknown opcode {other:?}")));
                        }
                    }
                };
                nodes.push(node);
            }
        }
    }
    FunctionDef::new(name, inputs, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::sym;

    #[test]
    fn empty_text_is_error() {
        assert!(matches!(
            deserialize(""),
            Err(ExprError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_sin() {
        let phi = sym("phi", 1).unwrap();
        let f = FunctionDef::new("f", vec![phi.clone()], vec![phi.sin()]).unwrap();
        let text = serialize(&f);
        let g = deserialize(&text).unwrap();
        assert_eq!(
            f.call(&[&[0.3]]).unwrap()[0].to_bits(),
            g.call(&[&[0.3]]).unwrap()[0].to_bits()
        );
        assert_eq!(serialize(&g), text);
    }

    #[test]
    fn constants_round_trip_exactly() {
        let x = sym("x", 1).unwrap();
        let c = Expr::constant_vec(vec![0.1, -1e-300, f64::MAX, 1.0 / 3.0, f64::INFINITY, -0.0]);
        let f = FunctionDef::new("c", vec![x.clone()], vec![c.mul(&x).unwrap()]).unwrap();
        let g = deserialize(&serialize(&f)).unwrap();
        let a = f.call(&[&[1.0]]).unwrap();
        let b = g.call(&[&[1.0]]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("fnser v1 f\nin x 1\nn0 sym x\nn1 frob n0\nout n1\n", 4),
            ("fnser v1 f\nin x 1\nn0 sym y\n", 3),
            ("fnser v1 f\nin x 1\nn0 sym x\nout n3\n", 4),
            ("fnser v2 f\n", 1),
            ("fnser v1 f\nin x 2\nn0 sym x\nn1 index n0 1 2\n", 4),
            ("fnser v1 f\nin x 1\nn1 sym x\n", 3),
        ];
        for (text, line) in cases {
            match deserialize(text) {
                Err(ExprError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn unused_inputs_and_empty_outputs_survive() {
        let x = sym("x", 2).unwrap();
        let p = sym("p", 3).unwrap();
        let f = FunctionDef::new("g", vec![x.clone(), p], vec![x.clone(), Expr::empty()]).unwrap();
        let text = serialize(&f);
        let g = deserialize(&text).unwrap();
        assert_eq!(g.n_in(), 2);
        assert_eq!(g.input_len(1), 3);
        assert_eq!(g.output_len(1), 0);
        assert_eq!(serialize(&g), text);
    }
}
