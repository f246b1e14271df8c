//! One-variable (or small fixed-variable-set) analytic expressions.
//!
//! Grammar, lowest to highest precedence:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?          right associative, constant exponent
//! primary := number | variable | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Functions: sin cos tan exp log sqrt sinh cosh tanh. Exponents must fold to
//! a constant; non-integer exponents evaluate as `exp(b·log(a))`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::scalar::{EvalError, Func, Scalar};
use crate::series::{ComplexSeries, Series, SeriesCtx};

#[derive(Debug, Clone, PartialEq)]
pub struct VarRef {
    pub index: usize,
    pub name: Arc<str>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(VarRef),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at line {line}, column {column}: {message} (expected one of: {})", expected.join(", "))]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub expected: Vec<String>,
}

/// Parses an expression in the single variable `t`.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    parse_with(text, &["t"])
}

/// Parses an expression over the given variable names; variable `i` of the
/// result binds to slot `i` at evaluation time.
pub fn parse_with(text: &str, vars: &[&str]) -> Result<Expr, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0, vars };
    if matches!(p.peek().kind, Tok::End) {
        return Err(p.error("empty input", &["number", "identifier", "(", "-"]));
    }
    let e = p.expr()?;
    if !matches!(p.peek().kind, Tok::End) {
        let msg = format!("unexpected {}", p.peek().kind.describe());
        return Err(p.error(&msg, &["+", "-", "*", "/", "^", "end of input"]));
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(x) => format!("number {x}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            col += 1;
            i += 1;
            continue;
        }
        let (start_line, start_col) = (line, col);
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(kind) = single {
            out.push(Token { kind, line, column: col });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| ParseError {
                line: start_line,
                column: start_col,
                message: format!("malformed number '{s}'"),
                expected: vec!["number".into()],
            })?;
            col += i - start;
            out.push(Token { kind: Tok::Num(v), line: start_line, column: start_col });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            let s: String = chars[start..i].iter().collect();
            out.push(Token { kind: Tok::Ident(s), line: start_line, column: start_col });
            continue;
        }
        return Err(ParseError {
            line,
            column: col,
            message: format!("unexpected character '{c}'"),
            expected: vec!["number".into(), "identifier".into(), "operator".into()],
        });
    }
    out.push(Token { kind: Tok::End, line, column: col });
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if !matches!(t.kind, Tok::End) {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: &str, expected: &[&str]) -> ParseError {
        let t = self.peek();
        ParseError {
            line: t.line,
            column: t.column,
            message: message.to_string(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().kind {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().kind {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().kind {
            Tok::Minus => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if !matches!(self.peek().kind, Tok::Caret) {
            return Ok(base);
        }
        self.bump();
        let at = self.peek().clone();
        let exponent = self.unary()?;
        match exponent.eval_with::<f64>(&[], &()) {
            Ok(v) if exponent.is_constant() => Ok(Expr::Pow(Box::new(base), v)),
            _ => Err(ParseError {
                line: at.line,
                column: at.column,
                message: "exponent must be a constant".into(),
                expected: vec!["number".into()],
            }),
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        const START: &[&str] = &["number", "identifier", "(", "-"];
        let tok = self.peek().clone();
        match tok.kind {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if !matches!(self.peek().kind, Tok::RParen) {
                    return Err(self.error("unbalanced parentheses", &[")", "+", "-", "*", "/", "^"]));
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(ref name) => {
                self.bump();
                if let Some(index) = self.vars.iter().position(|v| v == name) {
                    return Ok(Expr::Var(VarRef { index, name: Arc::from(name.as_str()) }));
                }
                let Some(f) = Func::from_name(name) else {
                    return Err(ParseError {
                        line: tok.line,
                        column: tok.column,
                        message: format!("unknown identifier '{name}'"),
                        expected: self
                            .vars
                            .iter()
                            .map(|v| v.to_string())
                            .chain(Func::ALL.iter().map(|f| f.name().to_string()))
                            .collect(),
                    });
                };
                if !matches!(self.peek().kind, Tok::LParen) {
                    return Err(self.error(&format!("function '{name}' needs an argument"), &["("]));
                }
                self.bump();
                let arg = self.expr()?;
                if !matches!(self.peek().kind, Tok::RParen) {
                    return Err(self.error("unbalanced parentheses", &[")", "+", "-", "*", "/", "^"]));
                }
                self.bump();
                Ok(Expr::Call(f, Box::new(arg)))
            }
            Tok::End => Err(self.error("unexpected end of input", START)),
            ref other => Err(self.error(&format!("unexpected {}", other.describe()), START)),
        }
    }
}

// Smart constructors with trivial constant folding, used by `differentiate`
// to keep derivative trees from growing needlessly.
fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        _ if is_num(&a, 0.0) => b,
        _ if is_num(&b, 0.0) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        _ if is_num(&b, 0.0) => a,
        _ if is_num(&a, 0.0) => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        _ if is_num(&a, 0.0) || is_num(&b, 0.0) => Expr::Num(0.0),
        _ if is_num(&a, 1.0) => b,
        _ if is_num(&b, 1.0) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        return Expr::Num(0.0);
    }
    if is_num(&b, 1.0) {
        return a;
    }
    Expr::Div(Box::new(a), Box::new(b))
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => Expr::Num(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn pow(a: Expr, n: f64) -> Expr {
    if n == 0.0 {
        Expr::Num(1.0)
    } else if n == 1.0 {
        a
    } else {
        Expr::Pow(Box::new(a), n)
    }
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(index: usize, name: &str) -> Expr {
        Expr::Var(VarRef { index, name: Arc::from(name) })
    }

    /// Sum with constant folding of zeros.
    pub fn plus(self, other: Expr) -> Expr {
        add(self, other)
    }

    pub fn minus(self, other: Expr) -> Expr {
        sub(self, other)
    }

    pub fn times(self, other: Expr) -> Expr {
        mul(self, other)
    }

    pub fn over(self, other: Expr) -> Expr {
        div(self, other)
    }

    pub fn powf(self, n: f64) -> Expr {
        pow(self, n)
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_constant() && b.is_constant()
            }
        }
    }

    /// Whether variable slot `index` occurs in the tree.
    pub fn uses_var(&self, index: usize) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => v.index == index,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.uses_var(index),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.uses_var(index) || b.uses_var(index)
            }
        }
    }

    /// Replaces every variable by the expression `f` returns for it.
    pub fn substitute(&self, f: &dyn Fn(&VarRef) -> Expr) -> Expr {
        let b = |e: &Expr| Box::new(e.substitute(f));
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Var(v) => f(v),
            Expr::Neg(a) => Expr::Neg(b(a)),
            Expr::Add(x, y) => Expr::Add(b(x), b(y)),
            Expr::Sub(x, y) => Expr::Sub(b(x), b(y)),
            Expr::Mul(x, y) => Expr::Mul(b(x), b(y)),
            Expr::Div(x, y) => Expr::Div(b(x), b(y)),
            Expr::Pow(a, n) => Expr::Pow(b(a), *n),
            Expr::Call(g, a) => Expr::Call(*g, b(a)),
        }
    }

    /// Exact symbolic derivative with respect to variable slot `var`.
    /// The result is not simplified beyond trivial constant folding.
    pub fn differentiate_var(&self, var: usize) -> Expr {
        let d = |e: &Expr| e.differentiate_var(var);
        match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(v) => Expr::Num(if v.index == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(d(a)),
            Expr::Add(a, b) => add(d(a), d(b)),
            Expr::Sub(a, b) => sub(d(a), d(b)),
            Expr::Mul(a, b) => add(mul(d(a), (**b).clone()), mul((**a).clone(), d(b))),
            Expr::Div(a, b) => div(
                sub(mul(d(a), (**b).clone()), mul((**a).clone(), d(b))),
                pow((**b).clone(), 2.0),
            ),
            Expr::Pow(a, n) => mul(mul(Expr::Num(*n), pow((**a).clone(), n - 1.0)), d(a)),
            Expr::Call(f, a) => {
                let u = (**a).clone();
                let du = d(a);
                let outer = match f {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Tan => div(Expr::Num(1.0), pow(call(Func::Cos, u), 2.0)),
                    Func::Exp => call(Func::Exp, u),
                    Func::Log => div(Expr::Num(1.0), u),
                    Func::Sqrt => div(Expr::Num(0.5), call(Func::Sqrt, u)),
                    Func::Sinh => call(Func::Cosh, u),
                    Func::Cosh => call(Func::Sinh, u),
                    Func::Tanh => sub(Expr::Num(1.0), pow(call(Func::Tanh, u), 2.0)),
                };
                mul(outer, du)
            }
        }
    }

    /// Derivative with respect to the first variable slot (`t`).
    pub fn differentiate(&self) -> Expr {
        self.differentiate_var(0)
    }

    /// Evaluates over any [`Scalar`] with variable slot `i` bound to `vars[i]`.
    pub fn eval_with<S: Scalar>(&self, vars: &[S], ctx: &S::Ctx) -> Result<S, EvalError> {
        match self {
            Expr::Num(v) => Ok(S::constant(ctx, *v)),
            Expr::Var(v) => vars.get(v.index).cloned().ok_or(EvalError::Unbound(v.index)),
            Expr::Neg(a) => Ok(a.eval_with(vars, ctx)?.neg()),
            Expr::Add(a, b) => a.eval_with(vars, ctx)?.add(&b.eval_with(vars, ctx)?),
            Expr::Sub(a, b) => a.eval_with(vars, ctx)?.sub(&b.eval_with(vars, ctx)?),
            Expr::Mul(a, b) => a.eval_with(vars, ctx)?.mul(&b.eval_with(vars, ctx)?),
            Expr::Div(a, b) => a.eval_with(vars, ctx)?.div(&b.eval_with(vars, ctx)?),
            Expr::Pow(a, n) => {
                let base = a.eval_with(vars, ctx)?;
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    base.powi(*n as i64)
                } else {
                    base.func(Func::Log)?.mul(&S::constant(ctx, *n))?.func(Func::Exp)
                }
            }
            Expr::Call(f, a) => a.eval_with(vars, ctx)?.func(*f),
        }
    }

    pub fn eval_real(&self, t: f64) -> Result<f64, EvalError> {
        let v = self.eval_with(&[t], &())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    pub fn eval_complex(&self, z: Complex64) -> Result<Complex64, EvalError> {
        self.eval_with(&[z], &())
    }

    /// Taylor coefficients `c₀..c_K` at `t0` by Taylor-mode propagation.
    pub fn taylor(&self, t0: f64, order: usize) -> Result<Series, EvalError> {
        let ctx = SeriesCtx { order, t0 };
        self.eval_with(&[Series::variable(order, t0)], &ctx)
            .map_err(non_analytic_at(t0))
    }

    /// Taylor coefficients at a complex point, in powers of `(s − z0)`.
    /// The expansion point recorded in the series is the real part only and
    /// carries no meaning for composition.
    pub fn taylor_complex(&self, z0: Complex64, order: usize) -> Result<ComplexSeries, EvalError> {
        let ctx = SeriesCtx { order, t0: 0.0 };
        let mut var = ComplexSeries::variable(order, 0.0);
        var.set_coeff(0, z0);
        self.eval_with(&[var], &ctx).map_err(non_analytic_at(z0.re))
    }

    /// Renders in the same grammar [`parse_with`] accepts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.write_prec(&mut s, 0);
        s
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn write_prec(&self, out: &mut String, min: u8) {
        let paren = self.prec() < min;
        if paren {
            out.push('(');
        }
        match self {
            Expr::Num(v) => out.push_str(&format!("{v:?}")),
            Expr::Var(v) => out.push_str(&v.name),
            Expr::Neg(a) => {
                out.push('-');
                a.write_prec(out, 3);
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.write_prec(out, 1);
                out.push_str(if matches!(self, Expr::Add(..)) { " + " } else { " - " });
                b.write_prec(out, 2);
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.write_prec(out, 2);
                out.push_str(if matches!(self, Expr::Mul(..)) { "*" } else { "/" });
                b.write_prec(out, 3);
            }
            Expr::Pow(a, n) => {
                a.write_prec(out, 5);
                if n.is_sign_negative() {
                    out.push_str(&format!("^({n:?})"));
                } else {
                    out.push_str(&format!("^{n:?}"));
                }
            }
            Expr::Call(f, a) => {
                out.push_str(f.name());
                out.push('(');
                a.write_prec(out, 0);
                out.push(')');
            }
        }
        if paren {
            out.push(')');
        }
    }
}

fn non_analytic_at(t0: f64) -> impl Fn(EvalError) -> EvalError {
    move |e| match e {
        EvalError::DivisionByZero | EvalError::Domain { .. } | EvalError::ZeroConstantTerm => {
            EvalError::NonAnalytic(format!("{e} at {t0}"))
        }
        other => other,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}
