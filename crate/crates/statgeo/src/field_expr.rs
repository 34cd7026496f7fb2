//! Scalar field expressions over chart coordinates.
//!
//! Metric coefficients, `beta` and the components of `delta` are given by the
//! user as infix arithmetic strings ("1/(1+x1^2)", "sin(x1)*exp(x2)", ...).
//! This module parses them into an evaluable tree with byte spans for error
//! reporting, evaluates them at chart points, and differentiates them by
//! central finite differences.

use std::fmt;

use thiserror::Error;

/// Byte range of a node in the source string.
pub type Span = (usize, usize);

/// Default central-difference step, scaled per coordinate by `max(1, |x_i|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("{message} (expression bytes {}..{})", span.0, span.1)]
    Domain { span: Span, message: String },
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Abs,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Neg => "-",
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "exp" => UnaryFn::Exp,
            "log" => UnaryFn::Log,
            "sqrt" => UnaryFn::Sqrt,
            "tanh" => UnaryFn::Tanh,
            "abs" => UnaryFn::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone)]
pub enum ExprKind {
    Const(f64),
    /// Index into the declared coordinate list.
    Var(usize),
    Unary(UnaryFn, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

/// A parsed scalar expression over a fixed list of chart coordinates.
///
/// Evaluation is pure: a `FieldExpr` can be shared across threads freely.
#[derive(Debug, Clone)]
pub struct FieldExpr {
    root: Expr,
    coords: Vec<String>,
}

impl FieldExpr {
    /// Parse `text` against the declared coordinate names.
    ///
    /// Precedence: `^` over `*` `/` over `+` `-`; all left-associative except
    /// `^`, which is right-associative. The seven named functions use call
    /// syntax, e.g. `sqrt(x1)`.
    pub fn parse(text: &str, coords: &[String]) -> Result<Self, ExprError> {
        let mut parser = Parser::new(text, coords)?;
        let root = parser.parse_expr()?;
        parser.expect_end()?;
        Ok(FieldExpr {
            root,
            coords: coords.to_vec(),
        })
    }

    /// Convenience constructor for a constant field.
    pub fn constant(value: f64, coords: &[String]) -> Self {
        FieldExpr {
            root: Expr {
                kind: ExprKind::Const(value),
                span: (0, 0),
            },
            coords: coords.to_vec(),
        }
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Evaluate at a chart point.
    pub fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        if point.len() != self.coords.len() {
            return Err(ExprError::DimensionMismatch {
                expected: self.coords.len(),
                got: point.len(),
            });
        }
        eval_node(&self.root, point)
    }

    /// Central-difference gradient with per-coordinate step
    /// `h * max(1, |x_i|)`.
    pub fn grad_fd(&self, point: &[f64], h: f64) -> Result<Vec<f64>, ExprError> {
        if point.len() != self.coords.len() {
            return Err(ExprError::DimensionMismatch {
                expected: self.coords.len(),
                got: point.len(),
            });
        }
        let mut grad = Vec::with_capacity(point.len());
        let mut probe = point.to_vec();
        for i in 0..point.len() {
            let step = h * point[i].abs().max(1.0);
            probe[i] = point[i] + step;
            let plus = eval_node(&self.root, &probe)?;
            probe[i] = point[i] - step;
            let minus = eval_node(&self.root, &probe)?;
            probe[i] = point[i];
            grad.push((plus - minus) / (2.0 * step));
        }
        Ok(grad)
    }

    /// Structural equality, ignoring source spans.
    pub fn structurally_equal(&self, other: &FieldExpr) -> bool {
        self.coords == other.coords && node_eq(&self.root, &other.root)
    }

    /// True if the tree is a literal constant equal to `value`.
    pub fn is_const(&self, value: f64) -> bool {
        matches!(self.root.kind, ExprKind::Const(c) if c == value)
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }
}

impl fmt::Display for FieldExpr {
    /// Fully parenthesized infix form; `parse(format!("{e}"))` reproduces the
    /// tree structurally.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.coords)
    }
}

fn node_eq(a: &Expr, b: &Expr) -> bool {
    match (&a.kind, &b.kind) {
        (ExprKind::Const(x), ExprKind::Const(y)) => x == y || (x.is_nan() && y.is_nan()),
        (ExprKind::Var(i), ExprKind::Var(j)) => i == j,
        (ExprKind::Unary(f, x), ExprKind::Unary(g, y)) => f == g && node_eq(x, y),
        (ExprKind::Binary(f, xl, xr), ExprKind::Binary(g, yl, yr)) => {
            f == g && node_eq(xl, yl) && node_eq(xr, yr)
        }
        _ => false,
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, e: &Expr, coords: &[String]) -> fmt::Result {
    match &e.kind {
        ExprKind::Const(c) => {
            if *c < 0.0 || c.is_nan() {
                write!(f, "({})", c)
            } else {
                write!(f, "{}", c)
            }
        }
        ExprKind::Var(i) => write!(f, "{}", coords[*i]),
        ExprKind::Unary(UnaryFn::Neg, x) => {
            write!(f, "(-")?;
            write_node(f, x, coords)?;
            write!(f, ")")
        }
        ExprKind::Unary(func, x) => {
            write!(f, "{}(", func.name())?;
            write_node(f, x, coords)?;
            write!(f, ")")
        }
        ExprKind::Binary(op, l, r) => {
            write!(f, "(")?;
            write_node(f, l, coords)?;
            write!(f, " {} ", op.symbol())?;
            write_node(f, r, coords)?;
            write!(f, ")")
        }
    }
}

fn domain_err(span: Span, message: impl Into<String>) -> ExprError {
    ExprError::Domain {
        span,
        message: message.into(),
    }
}

fn eval_node(e: &Expr, point: &[f64]) -> Result<f64, ExprError> {
    match &e.kind {
        ExprKind::Const(c) => Ok(*c),
        ExprKind::Var(i) => Ok(point[*i]),
        ExprKind::Unary(func, x) => {
            let v = eval_node(x, point)?;
            match func {
                UnaryFn::Neg => Ok(-v),
                UnaryFn::Sin => Ok(v.sin()),
                UnaryFn::Cos => Ok(v.cos()),
                UnaryFn::Exp => Ok(v.exp()),
                UnaryFn::Log => {
                    if v <= 0.0 {
                        Err(domain_err(e.span, format!("log of non-positive value {v}")))
                    } else {
                        Ok(v.ln())
                    }
                }
                UnaryFn::Sqrt => {
                    if v < 0.0 {
                        Err(domain_err(e.span, format!("sqrt of negative value {v}")))
                    } else {
                        Ok(v.sqrt())
                    }
                }
                UnaryFn::Tanh => Ok(v.tanh()),
                UnaryFn::Abs => Ok(v.abs()),
            }
        }
        ExprKind::Binary(op, l, r) => {
            let a = eval_node(l, point)?;
            let b = eval_node(r, point)?;
            match op {
                BinOp::Add => Ok(a + b),
                BinOp::Sub => Ok(a - b),
                BinOp::Mul => Ok(a * b),
                BinOp::Div => {
                    if b == 0.0 {
                        Err(domain_err(e.span, "division by zero"))
                    } else {
                        Ok(a / b)
                    }
                }
                BinOp::Pow => {
                    if a == 0.0 && b < 0.0 {
                        return Err(domain_err(e.span, "zero raised to a negative power"));
                    }
                    if a < 0.0 && b.fract() != 0.0 {
                        return Err(domain_err(
                            e.span,
                            format!("negative base {a} raised to non-integer power {b}"),
                        ));
                    }
                    Ok(a.powf(b))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser<'a> {
    tokens: Vec<(Token, Span)>,
    pos: usize,
    coords: &'a [String],
    len: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &str, coords: &'a [String]) -> Result<Self, ExprError> {
        if text.trim().is_empty() {
            return Err(ExprError::Syntax {
                offset: 0,
                message: "empty expression".into(),
            });
        }
        Ok(Parser {
            tokens: tokenize(text)?,
            pos: 0,
            coords,
            len: text.len(),
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<(Token, Span)> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(_, s)| s.0)
            .unwrap_or(self.len)
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        if self.pos == self.tokens.len() {
            Ok(())
        } else {
            Err(ExprError::Syntax {
                offset: self.here(),
                message: "unexpected trailing input".into(),
            })
        }
    }

    // expr := term (('+' | '-') term)*
    fn parse_expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinOp::Add,
                Some(Token::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.parse_term()?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                span,
            };
        }
    }

    // term := unary (('*' | '/') unary)*
    fn parse_term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => BinOp::Mul,
                Some(Token::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.parse_unary()?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                span,
            };
        }
    }

    // unary := '-' unary | power
    fn parse_unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Token::Minus) = self.peek() {
            let (_, span) = self.next().unwrap();
            let inner = self.parse_unary()?;
            let full = (span.0, inner.span.1);
            return Ok(Expr {
                kind: ExprKind::Unary(UnaryFn::Neg, Box::new(inner)),
                span: full,
            });
        }
        self.parse_power()
    }

    // power := atom ('^' unary)?   (right-associative, exponent may be signed)
    fn parse_power(&mut self) -> Result<Expr, ExprError> {
        let base = self.parse_atom()?;
        if let Some(Token::Caret) = self.peek() {
            self.next();
            let exp = self.parse_unary()?;
            let span = (base.span.0, exp.span.1);
            return Ok(Expr {
                kind: ExprKind::Binary(BinOp::Pow, Box::new(base), Box::new(exp)),
                span,
            });
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expr, ExprError> {
        let offset = self.here();
        match self.next() {
            Some((Token::Number(v), span)) => Ok(Expr {
                kind: ExprKind::Const(v),
                span,
            }),
            Some((Token::Ident(name), span)) => {
                if let Some(func) = UnaryFn::from_name(&name) {
                    match self.next() {
                        Some((Token::LParen, _)) => {}
                        _ => {
                            return Err(ExprError::Syntax {
                                offset: span.1,
                                message: format!("expected `(` after function `{name}`"),
                            })
                        }
                    }
                    let arg = self.parse_expr()?;
                    let close = self.expect_rparen()?;
                    Ok(Expr {
                        kind: ExprKind::Unary(func, Box::new(arg)),
                        span: (span.0, close),
                    })
                } else if let Some(idx) = self.coords.iter().position(|c| *c == name) {
                    Ok(Expr {
                        kind: ExprKind::Var(idx),
                        span,
                    })
                } else {
                    Err(ExprError::UnknownIdent {
                        name,
                        offset: span.0,
                    })
                }
            }
            Some((Token::LParen, span)) => {
                let inner = self.parse_expr()?;
                let close = self.expect_rparen()?;
                Ok(Expr {
                    kind: inner.kind,
                    span: (span.0, close),
                })
            }
            Some((tok, span)) => Err(ExprError::Syntax {
                offset: span.0,
                message: format!("unexpected token {tok:?}"),
            }),
            None => Err(ExprError::Syntax {
                offset,
                message: "unexpected end of expression".into(),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<usize, ExprError> {
        match self.next() {
            Some((Token::RParen, span)) => Ok(span.1),
            Some((_, span)) => Err(ExprError::Syntax {
                offset: span.0,
                message: "expected `)`".into(),
            }),
            None => Err(ExprError::Syntax {
                offset: self.len,
                message: "expected `)` before end of expression".into(),
            }),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Token, Span)>, ExprError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' => {
                tokens.push((Token::Plus, (i, i + 1)));
                i += 1;
            }
            b'-' => {
                tokens.push((Token::Minus, (i, i + 1)));
                i += 1;
            }
            b'*' => {
                tokens.push((Token::Star, (i, i + 1)));
                i += 1;
            }
            b'/' => {
                tokens.push((Token::Slash, (i, i + 1)));
                i += 1;
            }
            b'^' => {
                tokens.push((Token::Caret, (i, i + 1)));
                i += 1;
            }
            b'(' => {
                tokens.push((Token::LParen, (i, i + 1)));
                i += 1;
            }
            b')' => {
                tokens.push((Token::RParen, (i, i + 1)));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                // optional exponent part: e or E, optional sign, digits
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("invalid number literal `{lit}`"),
                })?;
                tokens.push((Token::Number(value), (start, i)));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push((Token::Ident(text[start..i].to_string()), (start, i)));
            }
            _ => {
                return Err(ExprError::Syntax {
                    offset: i,
                    message: format!("unexpected character `{}`", &text[i..i + 1]),
                })
            }
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn parse(text: &str, names: &[&str]) -> FieldExpr {
        FieldExpr::parse(text, &coords(names)).unwrap()
    }

    #[test]
    fn constant_literal() {
        let e = parse("1", &["x1"]);
        assert!(e.is_const(1.0));
    }

    #[test]
    fn precedence_pow_over_add() {
        let e = parse("x1^2 + 1", &["x1"]);
        match &e.root().kind {
            ExprKind::Binary(BinOp::Add, l, _) => {
                assert!(matches!(l.kind, ExprKind::Binary(BinOp::Pow, _, _)))
            }
            other => panic!("unexpected tree {other:?}"),
        }
        assert_eq!(e.eval(&[2.0]).unwrap(), 5.0);
    }

    #[test]
    fn product_of_functions() {
        let e = parse("sin(x1)*exp(x2)", &["x1", "x2"]);
        let v = e.eval(&[0.5, 1.0]).unwrap();
        assert!((v - 0.5f64.sin() * 1.0f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn unknown_identifier() {
        let err = FieldExpr::parse("x3", &coords(&["x1", "x2"])).unwrap_err();
        match err {
            ExprError::UnknownIdent { name, .. } => assert_eq!(name, "x3"),
            other => panic!("expected unknown identifier, got {other}"),
        }
    }

    #[test]
    fn pow_is_right_associative() {
        let e = parse("2^3^2", &[]);
        assert_eq!(e.eval(&[]).unwrap(), 512.0);
    }

    #[test]
    fn sub_is_left_associative() {
        let e = parse("8 - 3 - 2", &[]);
        assert_eq!(e.eval(&[]).unwrap(), 3.0);
    }

    #[test]
    fn unary_minus_binds_below_pow() {
        let e = parse("-x1^2", &["x1"]);
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
    }

    #[test]
    fn sqrt_eval() {
        let e = parse("sqrt(x1)", &["x1"]);
        assert_eq!(e.eval(&[4.0]).unwrap(), 2.0);
    }

    #[test]
    fn division_by_zero_reports_span() {
        let e = parse("1/x1", &["x1"]);
        match e.eval(&[0.0]).unwrap_err() {
            ExprError::Domain { span, .. } => assert_eq!(span, (0, 4)),
            other => panic!("expected domain error, got {other}"),
        }
    }

    #[test]
    fn log_of_nonpositive_fails() {
        let e = parse("log(x1)", &["x1"]);
        assert!(e.eval(&[0.0]).is_err());
        assert!(e.eval(&[-1.0]).is_err());
        assert!((e.eval(&[std::f64::consts::E]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_quadratic_matches_analytic() {
        let e = parse("x1^2", &["x1"]);
        let g = e.grad_fd(&[3.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn grad_constant_is_zero() {
        let e = parse("7", &["x1", "x2"]);
        let g = e.grad_fd(&[1.0, -2.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_bilinear() {
        let e = parse("x1*x2", &["x1", "x2"]);
        let g = e.grad_fd(&[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dimension_mismatch() {
        let e = parse("x1", &["x1", "x2"]);
        assert!(matches!(
            e.eval(&[1.0]),
            Err(ExprError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_is_syntax_error() {
        assert!(FieldExpr::parse("  ", &coords(&["x1"])).is_err());
    }

    #[test]
    fn display_round_trip_simple() {
        let names = coords(&["x1", "x2"]);
        for text in [
            "x1^2 + 1",
            "sin(x1)*exp(x2)",
            "-x1/(1 + x2^2)",
            "sqrt(abs(x1 - x2))",
            "2^-3",
            "1e-3*x1 + .5",
        ] {
            let e = FieldExpr::parse(text, &names).unwrap();
            let round = FieldExpr::parse(&e.to_string(), &names).unwrap();
            assert!(
                e.structurally_equal(&round),
                "round trip failed for `{text}`: `{e}`"
            );
        }
    }
}
