//! Infix expression text used by model files and problem files.
//!
//! ```text
//! expr     := sum
//! sum      := product (('+' | '-') product)*
//! product  := unary (('*' | '/') unary)*
//! unary    := ('-' | '+') unary | power
//! power    := postfix ('^' unary)?
//! postfix  := primary ('[' integer ']')*
//! primary  := number | name | name '(' args ')' | '(' expr ')'
//! relation := expr (('<=' | '>=' | '==') expr){0,2}
//! ```
//!
//! Names may be dotted (`pendulum.F`). `^` binds tighter than unary minus
//! and is right associative, so `-x^2` is `-(x^2)` and `2^3^2` is `2^9`.

use std::fmt;

use super::{Expr, UnaryOp};

/// Name resolution for the parser.
pub trait Scope {
    fn lookup(&self, name: &str) -> Option<Expr>;

    /// Hook for calls beyond the elementary functions. Returning `None`
    /// means the function is unknown.
    fn call(&self, _name: &str, _args: &[Expr]) -> Option<Result<Expr, String>> {
        None
    }
}

/// Parse error with a 1-based character column.
#[derive(Debug, Clone, PartialEq)]
pub struct TextError {
    pub column: usize,
    pub message: String,
}

impl fmt::Display for TextError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

impl std::error::Error for TextError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelOp {
    Le,
    Ge,
    Eq,
}

/// A parsed relation: `lhs op rhs`, or a chained `a op b op c`.
#[derive(Debug, Clone)]
pub struct Relation {
    pub terms: Vec<Expr>,
    pub ops: Vec<RelOp>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Op(char),
    Rel(RelOp),
    End,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, TextError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let fail = |col: usize, msg: String| TextError {
        column: col + 1,
        message: msg,
    };
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| fail(start, format!("malformed number {text:?}")))?;
            out.push((Tok::Num(v), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric()
                    || chars[i] == '_'
                    || (chars[i] == '.'
                        && chars
                            .get(i + 1)
                            .is_some_and(|d| d.is_ascii_alphabetic() || *d == '_')))
            {
                i += 1;
            }
            out.push((Tok::Name(chars[start..i].iter().collect()), start));
            continue;
        }
        let two = chars.get(i + 1) == Some(&'=');
        match c {
            '<' | '>' | '=' if two => {
                let op = match c {
                    '<' => RelOp::Le,
                    '>' => RelOp::Ge,
                    _ => RelOp::Eq,
                };
                out.push((Tok::Rel(op), start));
                i += 2;
            }
            '<' | '>' => {
                return Err(fail(
                    start,
                    format!("strict `{c}` is not supported, use `{c}=`"),
                ));
            }
            '+' | '-' | '*' | '/' | '^' | '(' | ')' | '[' | ']' | ',' => {
                out.push((Tok::Op(c), start));
                i += 1;
            }
            _ => return Err(fail(start, format!("unexpected character {c:?}"))),
        }
    }
    out.push((Tok::End, chars.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    scope: &'a dyn Scope,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn column(&self) -> usize {
        self.toks[self.pos].1 + 1
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, TextError> {
        Err(TextError {
            column: self.column(),
            message: message.into(),
        })
    }

    fn at_error<T>(column: usize, message: impl Into<String>) -> Result<T, TextError> {
        Err(TextError {
            column,
            message: message.into(),
        })
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat_op(&mut self, c: char) -> bool {
        if self.peek() == &Tok::Op(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, c: char) -> Result<(), TextError> {
        if self.eat_op(c) {
            Ok(())
        } else {
            self.error(format!("expected `{c}`"))
        }
    }

    fn sum(&mut self) -> Result<Expr, TextError> {
        let mut lhs = self.product()?;
        loop {
            let col = self.column();
            let op = match self.peek() {
                Tok::Op('+') => '+',
                Tok::Op('-') => '-',
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            let r = if op == '+' {
                lhs.add(&rhs)
            } else {
                lhs.sub(&rhs)
            };
            lhs = r.or_else(|e| Self::at_error(col, e.to_string()))?;
        }
    }

    fn product(&mut self) -> Result<Expr, TextError> {
        let mut lhs = self.unary()?;
        loop {
            let col = self.column();
            let op = match self.peek() {
                Tok::Op('*') => '*',
                Tok::Op('/') => '/',
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            let r = if op == '*' {
                lhs.mul(&rhs)
            } else {
                lhs.div(&rhs)
            };
            lhs = r.or_else(|e| Self::at_error(col, e.to_string()))?;
        }
    }

    fn unary(&mut self) -> Result<Expr, TextError> {
        if self.eat_op('-') {
            return Ok(self.unary()?.neg());
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, TextError> {
        let base = self.postfix()?;
        let col = self.column();
        if self.eat_op('^') {
            let exp = self.unary()?;
            return base
                .pow(&exp)
                .or_else(|e| Self::at_error(col, e.to_string()));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Expr, TextError> {
        let mut e = self.primary()?;
        while self.peek() == &Tok::Op('[') {
            self.bump();
            let col = self.column();
            let i = match self.bump() {
                Tok::Num(v) if v >= 0.0 && v.fract() == 0.0 => v as usize,
                _ => return Self::at_error(col, "index must be a non-negative integer"),
            };
            self.expect_op(']')?;
            e = e.at(i).or_else(|_| {
                Self::at_error(
                    col,
                    format!("index {i} out of range for length {}", e.len()),
                )
            })?;
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, TextError> {
        let col = self.column();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::constant(v)),
            Tok::Op('(') => {
                let e = self.sum()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Tok::Name(name) => {
                if self.eat_op('(') {
                    let mut args = Vec::new();
                    if !self.eat_op(')') {
                        loop {
                            args.push(self.sum()?);
                            if self.eat_op(')') {
                                break;
                            }
                            self.expect_op(',')?;
                        }
                    }
                    return self.apply(&name, args, col);
                }
                match self.scope.lookup(&name) {
                    Some(e) => Ok(e),
                    None => Self::at_error(col, format!("undeclared name {name}")),
                }
            }
            Tok::End => Self::at_error(col, "unexpected end of expression"),
            t => Self::at_error(col, format!("unexpected {}", describe(&t))),
        }
    }

    fn apply(&self, name: &str, args: Vec<Expr>, col: usize) -> Result<Expr, TextError> {
        if let Some(op) = UnaryOp::from_name(name).filter(|op| *op != UnaryOp::Neg) {
            if args.len() != 1 {
                return Self::at_error(col, format!("{name} takes 1 argument"));
            }
            return Ok(Expr::unary(op, &args[0]));
        }
        match self.scope.call(name, &args) {
            Some(Ok(e)) => Ok(e),
            Some(Err(msg)) => Self::at_error(col, msg),
            None => Self::at_error(col, format!("unknown function {name}")),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Name(n) => format!("name {n}"),
        Tok::Op(c) => format!("`{c}`"),
        Tok::Rel(RelOp::Le) => "`<=`".into(),
        Tok::Rel(RelOp::Ge) => "`>=`".into(),
        Tok::Rel(RelOp::Eq) => "`==`".into(),
        Tok::End => "end of expression".into(),
    }
}

/// Parses an arithmetic expression.
pub fn parse_expr(src: &str, scope: &dyn Scope) -> Result<Expr, TextError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
        scope,
    };
    let e = p.sum()?;
    if p.peek() != &Tok::End {
        let t = describe(p.peek());
        return p.error(format!("unexpected {t}"));
    }
    Ok(e)
}

/// Parses a relation with one or two comparison operators. Chains must be
/// monotone (`a <= b <= c` or `a >= b >= c`); `==` cannot be chained.
pub fn parse_relation(src: &str, scope: &dyn Scope) -> Result<Relation, TextError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
        scope,
    };
    let mut terms = vec![p.sum()?];
    let mut ops = Vec::new();
    while let Tok::Rel(op) = *p.peek() {
        let col = p.column();
        if ops.len() == 2 {
            return Parser::at_error(col, "at most two comparisons may be chained");
        }
        if let Some(&prev) = ops.last() {
            if prev != op || op == RelOp::Eq {
                return Parser::at_error(col, "chained comparisons must be `<= <=` or `>= >=`");
            }
        }
        p.bump();
        ops.push(op);
        terms.push(p.sum()?);
    }
    if p.peek() != &Tok::End {
        let t = describe(p.peek());
        return p.error(format!("unexpected {t}"));
    }
    if ops.is_empty() {
        return Parser::at_error(1, "expected a comparison (`<=`, `>=` or `==`)");
    }
    Ok(Relation { terms, ops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{sym, FunctionDef};
    use std::collections::HashMap;

    struct Names(HashMap<String, Expr>);

    impl Scope for Names {
        fn lookup(&self, name: &str) -> Option<Expr> {
            self.0.get(name).cloned()
        }
    }

    fn scope() -> (Names, Expr, Expr) {
        let phi = sym("phi", 1).unwrap();
        let x = sym("x", 2).unwrap();
        let mut m = HashMap::new();
        m.insert("phi".to_string(), phi.clone());
        m.insert("m.x".to_string(), x.clone());
        (Names(m), phi, x)
    }

    fn value(src: &str, phi: f64, x: [f64; 2]) -> f64 {
        let (s, p, xs) = scope();
        let e = parse_expr(src, &s).unwrap();
        let f = FunctionDef::new("f", vec![p, xs], vec![e]).unwrap();
        f.call(&[&[phi], &x]).unwrap()[0]
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(value("1 + 2 * 3", 0.0, [0.0; 2]), 7.0);
        assert_eq!(value("-phi^2", 3.0, [0.0; 2]), -9.0);
        assert_eq!(value("2^3^2", 0.0, [0.0; 2]), 512.0);
        assert_eq!(value("8 / 4 / 2", 0.0, [0.0; 2]), 1.0);
        assert_eq!(value("2^-1", 0.0, [0.0; 2]), 0.5);
        assert_eq!(value("m.x[1] - m.x[0]", 0.0, [1.0, 5.0]), 4.0);
        assert_eq!(value("1.5e1 + .5", 0.0, [0.0; 2]), 15.5);
        assert_eq!(
            value("2*cos(phi)*sin(phi)", 0.3, [0.0; 2]),
            2.0 * 0.3f64.cos() * 0.3f64.sin()
        );
    }

    #[test]
    fn undeclared_name_reported_with_column() {
        let (s, _, _) = scope();
        let err = parse_expr("2*cos(phi)*sin(ph)", &s).unwrap_err();
        assert_eq!(err.message, "undeclared name ph");
        assert_eq!(err.column, 16);
    }

    #[test]
    fn malformed_inputs() {
        let (s, _, _) = scope();
        for src in [
            "",
            "1 +",
            "(phi",
            "phi)",
            "sin(phi, phi)",
            "foo(phi)",
            "phi < 1",
            "m.x[2]",
            "phi $",
        ] {
            assert!(parse_expr(src, &s).is_err(), "{src}");
        }
    }

    #[test]
    fn relations() {
        let (s, _, _) = scope();
        let r = parse_relation("-2 <= phi <= 2", &s).unwrap();
        assert_eq!(r.ops, vec![RelOp::Le, RelOp::Le]);
        assert_eq!(r.terms.len(), 3);
        let r = parse_relation("m.x == 0", &s).unwrap();
        assert_eq!(r.ops, vec![RelOp::Eq]);
        assert!(parse_relation("phi", &s).is_err());
        assert!(parse_relation("0 <= phi >= 1", &s).is_err());
        assert!(parse_relation("0 == phi == 1", &s).is_err());
        assert!(parse_relation("0 <= phi <= 1 <= 2", &s).is_err());
    }
}
