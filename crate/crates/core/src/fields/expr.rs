//! Closed analytic expression family used for all coefficient and data
//! functions. Grammar (EBNF):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := factor (("*" | "/") factor)*
//! factor  := atom ("^" atom)?          (exponent must fold to a constant)
//! atom    := number | "pi" | "x1" | "x2" | "t"
//!          | ("sin" | "cos" | "exp") "(" expr ")"
//!          | "(" expr ")" | "-" atom
//! vector  := "(" expr ("," expr)* ")" | expr
//! ```
//!
//! Expressions differentiate symbolically, so gradients, divergences and
//! Laplacians of expression-backed fields are exact.

use crate::error::{Error, Result};

/// Differentiation variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X(usize),
    T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Spatial coordinate x1 or x2 (0-based axis index).
    Coord(usize),
    Time,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Pow(Box<Expr>, f64),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn eval(&self, x: &[f64; 2], t: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Coord(a) => x[*a],
            Expr::Time => t,
            Expr::Add(l, r) => l.eval(x, t) + r.eval(x, t),
            Expr::Sub(l, r) => l.eval(x, t) - r.eval(x, t),
            Expr::Mul(l, r) => l.eval(x, t) * r.eval(x, t),
            Expr::Div(l, r) => l.eval(x, t) / r.eval(x, t),
            Expr::Neg(e) => -e.eval(x, t),
            Expr::Sin(e) => e.eval(x, t).sin(),
            Expr::Cos(e) => e.eval(x, t).cos(),
            Expr::Exp(e) => e.eval(x, t).exp(),
            Expr::Pow(e, p) => e.eval(x, t).powf(*p),
        }
    }

    /// Symbolic derivative with respect to `var`.
    pub fn diff(&self, var: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Coord(a) => {
                if var == Var::X(*a) {
                    Const(1.0)
                } else {
                    Const(0.0)
                }
            }
            Time => {
                if var == Var::T {
                    Const(1.0)
                } else {
                    Const(0.0)
                }
            }
            Add(l, r) => add(l.diff(var), r.diff(var)),
            Sub(l, r) => sub(l.diff(var), r.diff(var)),
            Mul(l, r) => add(
                mul(l.diff(var), (**r).clone()),
                mul((**l).clone(), r.diff(var)),
            ),
            Div(l, r) => {
                // (l'r - l r') / r^2
                let num = sub(
                    mul(l.diff(var), (**r).clone()),
                    mul((**l).clone(), r.diff(var)),
                );
                Expr::Div(Box::new(num), Box::new(mul((**r).clone(), (**r).clone())))
            }
            Neg(e) => neg(e.diff(var)),
            Sin(e) => mul(Cos(e.clone()), e.diff(var)),
            Cos(e) => neg(mul(Sin(e.clone()), e.diff(var))),
            Exp(e) => mul(Exp(e.clone()), e.diff(var)),
            Pow(e, p) => mul(
                mul(Const(*p), Expr::Pow(e.clone(), p - 1.0)),
                e.diff(var),
            ),
        }
    }

    /// Fold to a constant if the expression contains no variables.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Coord(_) | Expr::Time => None,
            Expr::Add(l, r) => Some(l.as_const()? + r.as_const()?),
            Expr::Sub(l, r) => Some(l.as_const()? - r.as_const()?),
            Expr::Mul(l, r) => Some(l.as_const()? * r.as_const()?),
            Expr::Div(l, r) => Some(l.as_const()? / r.as_const()?),
            Expr::Neg(e) => Some(-e.as_const()?),
            Expr::Sin(e) => Some(e.as_const()?.sin()),
            Expr::Cos(e) => Some(e.as_const()?.cos()),
            Expr::Exp(e) => Some(e.as_const()?.exp()),
            Expr::Pow(e, p) => Some(e.as_const()?.powf(*p)),
        }
    }
}

// lightweight simplifying constructors to keep derivative trees small
fn add(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a + b),
        (Expr::Const(z), _) if *z == 0.0 => r,
        (_, Expr::Const(z)) if *z == 0.0 => l,
        _ => Expr::Add(Box::new(l), Box::new(r)),
    }
}
fn sub(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a - b),
        (_, Expr::Const(z)) if *z == 0.0 => l,
        _ => Expr::Sub(Box::new(l), Box::new(r)),
    }
}
fn mul(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a * b),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), _) if *o == 1.0 => r,
        (_, Expr::Const(o)) if *o == 1.0 => l,
        _ => Expr::Mul(Box::new(l), Box::new(r)),
    }
}
fn neg(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        other => Expr::Neg(Box::new(other)),
    }
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
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                toks.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1;
            }
            '/' => {
                toks.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                toks.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == '.'
                        || bytes[i] == 'e'
                        || bytes[i] == 'E'
                        || ((bytes[i] == '+' || bytes[i] == '-')
                            && i > start
                            && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                {
                    i += 1;
                }
                let s: String = bytes[start..i].iter().collect();
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad number '{s}'")))?;
                toks.push(Tok::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                toks.push(Tok::Ident(bytes[start..i].iter().collect()));
            }
            other => return Err(Error::Expr(format!("unexpected character '{other}'"))),
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }
    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(Error::Expr(format!("expected {t:?}, got {got:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.next();
                    let rhs = self.factor()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.next();
                    let rhs = self.factor()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.next();
            let exp = self.atom()?;
            let p = exp
                .as_const()
                .ok_or_else(|| Error::Expr("exponent must be a constant".into()))?;
            return Ok(Expr::Pow(Box::new(base), p));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::Minus) => Ok(Expr::Neg(Box::new(self.atom()?))),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                "x1" | "x" => Ok(Expr::Coord(0)),
                "x2" | "y" => Ok(Expr::Coord(1)),
                "t" => Ok(Expr::Time),
                "sin" | "cos" | "exp" => {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(Box::new(arg)),
                        "cos" => Expr::Cos(Box::new(arg)),
                        _ => Expr::Exp(Box::new(arg)),
                    })
                }
                other => Err(Error::Expr(format!("unknown identifier '{other}'"))),
            },
            got => Err(Error::Expr(format!("unexpected token {got:?}"))),
        }
    }
}

/// Parse a scalar expression.
pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Expr(format!(
            "trailing input at token {} in '{src}'",
            p.pos
        )));
    }
    Ok(e)
}

/// Parse a vector expression: `(e1, e2)` or a single scalar (1 component).
pub fn parse_vector(src: &str) -> Result<Vec<Expr>> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
    };
    // a leading '(' may open either a vector or a parenthesized scalar;
    // disambiguate by looking for a top-level comma
    if p.peek() == Some(&Tok::LParen) {
        let save = p.pos;
        p.next();
        let first = p.expr()?;
        if p.peek() == Some(&Tok::Comma) {
            let mut comps = vec![first];
            while p.peek() == Some(&Tok::Comma) {
                p.next();
                comps.push(p.expr()?);
            }
            p.expect(Tok::RParen)?;
            if p.pos != p.toks.len() {
                return Err(Error::Expr(format!("trailing input in '{src}'")));
            }
            return Ok(comps);
        }
        p.pos = save;
    }
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Expr(format!("trailing input in '{src}'")));
    }
    Ok(vec![e])
}
