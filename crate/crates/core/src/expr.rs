//! A small arithmetic expression language for system definitions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          // right-associative
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! So `-a^2` is `-(a^2)` and `a^b^c` is `a^(b^c)`. There is no implicit
//! multiplication: `2x` is a parse error.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => pow(a, b),
        }
    }
}

// Integer exponents go through powi so that e.g. (-2)^3 is -8 rather than NaN.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Atan2,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Sinh,
    Cosh,
}

impl Func {
    pub const ALL: [Func; 12] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Atan,
        Func::Atan2,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
        Func::Tanh,
        Func::Sinh,
        Func::Cosh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Atan => "atan",
            Func::Atan2 => "atan2",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 => 2,
            _ => 1,
        }
    }

    fn apply(self, args: &[f64]) -> f64 {
        let a = args[0];
        match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Tan => a.tan(),
            Func::Atan => a.atan(),
            Func::Atan2 => a.atan2(args[1]),
            Func::Exp => a.exp(),
            Func::Log => a.ln(),
            Func::Sqrt => a.sqrt(),
            Func::Abs => a.abs(),
            Func::Tanh => a.tanh(),
            Func::Sinh => a.sinh(),
            Func::Cosh => a.cosh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    UnbalancedParens,
    UnknownFunction,
    WrongArity,
    EmptyOperand,
    TrailingInput,
    BadToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound identifier `{0}`")]
    Unbound(String),
}

/// Variable bindings for [`Expr::eval`].
#[derive(Debug, Clone, Default)]
pub struct Env {
    vars: HashMap<String, f64>,
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.vars.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.vars.get(name).copied()
    }
}

impl<S: AsRef<str>> FromIterator<(S, f64)> for Env {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        let mut env = Env::new();
        for (k, v) in iter {
            env.set(k.as_ref(), v);
        }
        env
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => env
                .get(name)
                .ok_or_else(|| EvalError::Unbound(name.clone()))?,
            Expr::Neg(inner) => -inner.eval(env)?,
            Expr::Binary(op, l, r) => op.apply(l.eval(env)?, r.eval(env)?),
            Expr::Call(f, args) => {
                let vals = args
                    .iter()
                    .map(|a| a.eval(env))
                    .collect::<Result<Vec<_>, _>>()?;
                f.apply(&vals)
            }
        })
    }

    /// All identifiers referenced by the expression.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(n) => {
                out.insert(n.clone());
            }
            Expr::Neg(e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Replace every occurrence of the named variables.
    pub fn substitute(&self, bindings: &HashMap<String, Expr>) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Var(n) => bindings.get(n).cloned().unwrap_or_else(|| self.clone()),
            Expr::Neg(e) => Expr::Neg(Box::new(e.substitute(bindings))),
            Expr::Binary(op, l, r) => Expr::binary(*op, l.substitute(bindings), r.substitute(bindings)),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.substitute(bindings)).collect()),
        }
    }

    /// Resolve identifiers against a slot layout (runtime inputs) and a set of
    /// constants (parameters). Constant subtrees are folded.
    pub fn compile(&self, slots: &[&str], consts: &Env) -> Result<Compiled, EvalError> {
        Ok(Compiled {
            root: self.lower(slots, consts)?,
        })
    }

    fn lower(&self, slots: &[&str], consts: &Env) -> Result<Node, EvalError> {
        let node = match self {
            Expr::Num(v) => Node::Const(*v),
            Expr::Var(name) => {
                if let Some(i) = slots.iter().position(|s| s == name) {
                    Node::Slot(i)
                } else if let Some(v) = consts.get(name) {
                    Node::Const(v)
                } else {
                    return Err(EvalError::Unbound(name.clone()));
                }
            }
            Expr::Neg(e) => match e.lower(slots, consts)? {
                Node::Const(v) => Node::Const(-v),
                n => Node::Neg(Box::new(n)),
            },
            Expr::Binary(op, l, r) => {
                let l = l.lower(slots, consts)?;
                let r = r.lower(slots, consts)?;
                match (&l, &r) {
                    (Node::Const(a), Node::Const(b)) => Node::Const(op.apply(*a, *b)),
                    _ => Node::Binary(*op, Box::new(l), Box::new(r)),
                }
            }
            Expr::Call(f, args) => {
                let args = args
                    .iter()
                    .map(|a| a.lower(slots, consts))
                    .collect::<Result<Vec<_>, _>>()?;
                if args.iter().all(|a| matches!(a, Node::Const(_))) {
                    let vals: Vec<f64> = args
                        .iter()
                        .map(|a| match a {
                            Node::Const(v) => *v,
                            _ => unreachable!(),
                        })
                        .collect();
                    Node::Const(f.apply(&vals))
                } else {
                    Node::Call(*f, args)
                }
            }
        };
        Ok(node)
    }
}

/// An expression with identifiers resolved to input slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    root: Node,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Compiled {
    pub fn constant(v: f64) -> Self {
        Self {
            root: Node::Const(v),
        }
    }

    pub fn eval(&self, inputs: &[f64]) -> f64 {
        self.root.eval(inputs)
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Const(v) => *v,
            Node::Slot(i) => x[*i],
            Node::Neg(e) => -e.eval(x),
            Node::Binary(op, l, r) => op.apply(l.eval(x), r.eval(x)),
            Node::Call(f, args) => match args.as_slice() {
                [a] => f.apply(&[a.eval(x)]),
                [a, b] => f.apply(&[a.eval(x), b.eval(x)]),
                _ => unreachable!("arity checked at parse time"),
            },
        }
    }
}

// Fully parenthesised output so that `parse(e.to_string()) == e`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(n) => write!(f, "{n}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let v: f64 = lit.parse().map_err(|_| ParseError {
                offset: start,
                kind: ParseErrorKind::BadToken,
                message: format!("malformed number `{lit}`"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(text[start..i].to_string())));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    let ch = text[start..].chars().next().unwrap_or('?');
                    return Err(ParseError {
                        offset: start,
                        kind: ParseErrorKind::BadToken,
                        message: format!("unexpected character `{ch}`"),
                    });
                }
            };
            out.push((start, tok));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn err(&self, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.offset(),
            kind,
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::binary(BinOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if let Some(Tok::LParen) = self.peek() {
                    let func = Func::from_name(&name).ok_or(ParseError {
                        offset,
                        kind: ParseErrorKind::UnknownFunction,
                        message: format!("unknown function `{name}`"),
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while let Some(Tok::Comma) = self.peek() {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.close_paren()?;
                    if args.len() != func.arity() {
                        return Err(ParseError {
                            offset,
                            kind: ParseErrorKind::WrongArity,
                            message: format!(
                                "`{name}` takes {} argument(s), got {}",
                                func.arity(),
                                args.len()
                            ),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.close_paren()?;
                Ok(inner)
            }
            Some(Tok::RParen) | Some(Tok::Op(_)) | Some(Tok::Comma) | None => Err(self.err(
                ParseErrorKind::EmptyOperand,
                "expected a number, identifier or `(`",
            )),
        }
    }

    fn close_paren(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(ParseErrorKind::UnbalancedParens, "expected `)`")),
        }
    }
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(ParseError {
            offset: 0,
            kind: ParseErrorKind::Empty,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let e = p.expr()?;
    match p.peek() {
        None => Ok(e),
        Some(Tok::RParen) => Err(p.err(ParseErrorKind::UnbalancedParens, "unmatched `)`")),
        Some(_) => Err(p.err(
            ParseErrorKind::TrailingInput,
            "expected an operator or end of input",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn ev(text: &str, env: &Env) -> f64 {
        parse(text).unwrap().eval(env).unwrap()
    }

    #[test]
    fn zero_literal() {
        assert_eq!(parse("0").unwrap(), Expr::Num(0.0));
    }

    #[test]
    fn friction_coefficient_expression() {
        let env: Env = [("mu", 1.0), ("g", 1.0), ("K", 1.0), ("m", 1.0), ("e1", 1.0), ("z1", 0.0)]
            .into_iter()
            .collect();
        assert_eq!(ev("-7/2 * mu * g * e1 - K/m * z1", &env), -3.5);
    }

    #[test]
    fn cubic_radial_eigenvalue() {
        let env = Env::new().with("e1", 1.0);
        assert_eq!(ev("2*e1^3 - e1 - 1/2", &env), 0.5);
    }

    #[test]
    fn builtin_functions() {
        let env = Env::new();
        assert_eq!(ev("sin(0)", &env), 0.0);
        assert!((ev("atan2(1,1)", &env) - FRAC_PI_4).abs() < 1e-15);
        let env = Env::new().with("z1", 1.0);
        assert_eq!(ev("(1+2*z1^2)/(1+z1^2)", &env), 1.5);
    }

    #[test]
    fn precedence_and_associativity() {
        let env: Env = [("a", 2.0), ("b", 3.0), ("c", 2.0)].into_iter().collect();
        assert_eq!(ev("a+b*c", &env), 8.0);
        assert_eq!(ev("a^b^c", &env), 512.0);
        assert_eq!(ev("-a^2", &env), -4.0);
        assert_eq!(ev("a^-1", &env), 0.5);
        assert_eq!(ev("a - b - c", &env), -3.0);
        assert_eq!(ev("(-2)^3", &env), -8.0);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse("(1+2").unwrap_err().kind, ParseErrorKind::UnbalancedParens);
        assert_eq!(parse("1+2)").unwrap_err().kind, ParseErrorKind::UnbalancedParens);
        assert_eq!(parse("foo(1)").unwrap_err().kind, ParseErrorKind::UnknownFunction);
        assert_eq!(parse("1+").unwrap_err().kind, ParseErrorKind::EmptyOperand);
        assert_eq!(parse("1 2").unwrap_err().kind, ParseErrorKind::TrailingInput);
        let err = parse("2x").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::TrailingInput);
        assert_eq!(err.offset, 1);
        assert_eq!(parse("   ").unwrap_err().kind, ParseErrorKind::Empty);
        assert_eq!(parse("atan2(1)").unwrap_err().kind, ParseErrorKind::WrongArity);
        assert_eq!(parse("1 $ 2").unwrap_err().kind, ParseErrorKind::BadToken);
    }

    #[test]
    fn unbound_identifier() {
        let e = parse("x + y").unwrap();
        assert_eq!(
            e.eval(&Env::new().with("x", 1.0)),
            Err(EvalError::Unbound("y".into()))
        );
        assert!(e.compile(&["x"], &Env::new()).is_err());
    }

    #[test]
    fn compile_folds_constants() {
        let e = parse("2*K + x").unwrap();
        let c = e.compile(&["x"], &Env::new().with("K", 3.0)).unwrap();
        assert_eq!(c.eval(&[1.0]), 7.0);
        let k = parse("2*K").unwrap().compile(&[], &Env::new().with("K", 3.0)).unwrap();
        assert_eq!(k.as_constant(), Some(6.0));
    }

    #[test]
    fn scientific_literals() {
        assert_eq!(ev("1e-3 + 2.5E+1", &Env::new()), 25.001);
        assert_eq!(ev(".5", &Env::new()), 0.5);
    }

    #[test]
    fn domain_errors_are_non_finite() {
        assert!(ev("log(-1)", &Env::new()).is_nan());
        assert!(ev("1/0", &Env::new()).is_infinite());
    }
}
