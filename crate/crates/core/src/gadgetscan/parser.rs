//! Tokenizer and recursive-descent parser for a small C subset: function
//! definitions containing declarations, assignments, calls, `if`/`else`,
//! and `return`, with expressions over literals, names, calls, unary and
//! binary operators and the ternary operator.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{pos}: {msg}")]
pub struct ParseError {
    pub pos: Pos,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(u64),
    Str(String),
    Punct(&'static str),
    Eof,
}

const PUNCTS: [&str; 34] = [
    "<<=", ">>=", "->", "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "<<", ">>", "(", ")", "{", "}",
    "[", "]", ";", ",", "=", "<", ">", "!", "?", ":", "&", "|", "*", ".", "-",
];
const SINGLE: [&str; 6] = ["+", "/", "%", "^", "~", "#"];

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let mut at_line_start = true;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let pos = Pos { line, column: col };
        let adv = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            at_line_start = true;
            continue;
        }
        if c.is_whitespace() {
            adv(1, &mut i, &mut col);
            continue;
        }
        if c == '#' && at_line_start {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        at_line_start = false;
        if src[i..].starts_with("//") {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if src[i..].starts_with("/*") {
            let Some(end) = src[i + 2..].find("*/") else {
                return Err(ParseError { pos, msg: "unterminated comment".into() });
            };
            for ch in src[i..i + 2 + end + 2].chars() {
                if ch == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
            }
            i += end + 4;
            continue;
        }
        if c == '"' || c == '\'' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j] as char != c {
                if bytes[j] == b'\\' {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'\n' {
                    return Err(ParseError { pos, msg: "unterminated literal".into() });
                }
                j += 1;
            }
            if j >= bytes.len() {
                return Err(ParseError { pos, msg: "unterminated literal".into() });
            }
            let tok = if c == '"' { Tok::Str(src[i + 1..j].to_string()) } else { Tok::Int(u64::from(bytes[i + 1])) };
            out.push((tok, pos));
            adv(j + 1 - i, &mut i, &mut col);
            continue;
        }
        if c.is_ascii_digit() {
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let text = src[i..j].trim_end_matches(['u', 'U', 'l', 'L']);
            let v = if let Some(h) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                u64::from_str_radix(h, 16)
            } else {
                text.parse::<u64>()
            }
            .map_err(|_| ParseError { pos, msg: format!("bad number `{}`", &src[i..j]) })?;
            out.push((Tok::Int(v), pos));
            adv(j - i, &mut i, &mut col);
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            out.push((Tok::Ident(src[i..j].to_string()), pos));
            adv(j - i, &mut i, &mut col);
            continue;
        }
        if let Some(p) = PUNCTS.iter().chain(SINGLE.iter()).find(|p| src[i..].starts_with(**p)) {
            out.push((Tok::Punct(p), pos));
            adv(p.len(), &mut i, &mut col);
            continue;
        }
        return Err(ParseError { pos, msg: format!("unexpected character `{c}`") });
    }
    out.push((Tok::Eof, Pos { line, column: col }));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(u64),
    Str,
    Var { name: String, pos: Pos },
    Call { name: String, args: Vec<Expr> },
    Unary { op: &'static str, expr: Box<Expr> },
    Binary { op: &'static str, lhs: Box<Expr>, rhs: Box<Expr> },
    Ternary { cond: Box<Expr>, then: Box<Expr>, els: Box<Expr> },
    Cast(Box<Expr>),
}

impl Expr {
    pub fn has_call(&self) -> bool {
        match self {
            Expr::Call { .. } => true,
            Expr::Int(_) | Expr::Str | Expr::Var { .. } => false,
            Expr::Unary { expr, .. } | Expr::Cast(expr) => expr.has_call(),
            Expr::Binary { lhs, rhs, .. } => lhs.has_call() || rhs.has_call(),
            Expr::Ternary { cond, then, els } => cond.has_call() || then.has_call() || els.has_call(),
        }
    }

    /// Literal value, treating `true`/`false` and negation of literals as
    /// constants.
    pub fn constant(&self) -> Option<u64> {
        match self {
            Expr::Int(v) => Some(*v),
            Expr::Var { name, .. } if name == "true" => Some(1),
            Expr::Var { name, .. } if name == "false" || name == "NULL" => Some(0),
            Expr::Unary { op: "-", expr } => expr.constant().map(|v| v.wrapping_neg()),
            Expr::Cast(e) => e.constant(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Decl {
        name: String,
        width_bits: u32,
        pointer: bool,
        register: Option<String>,
        init: Option<Expr>,
        pos: Pos,
    },
    Assign { target: String, value: Expr, pos: Pos },
    Expr(Expr),
    If { cond: Expr, then: Vec<Stmt>, els: Vec<Stmt> },
    Return(Option<Expr>),
    Goto,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub pos: Pos,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceUnit {
    pub functions: Vec<Function>,
}

fn type_width(name: &str) -> Option<u32> {
    Some(match name {
        "bool" | "_Bool" => 1,
        "char" | "uchar" | "uint8_t" | "int8_t" => 8,
        "short" | "uint16_t" | "int16_t" => 16,
        "int" | "uint32_t" | "int32_t" | "DWORD" => 32,
        "long" | "size_t" | "ssize_t" | "uint64_t" | "int64_t" => 64,
        "void" => 0,
        _ => return None,
    })
}

const QUALIFIERS: [&str; 7] = ["static", "const", "register", "volatile", "struct", "signed", "unsigned"];

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

pub fn parse(src: &str) -> Result<SourceUnit, ParseError> {
    let mut p = Parser { toks: lex(src)?, at: 0 };
    let mut functions = Vec::new();
    while p.peek() != &Tok::Eof {
        functions.push(p.function()?);
    }
    Ok(SourceUnit { functions })
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.at + k).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { pos: self.pos(), msg: msg.into() })
    }

    fn is(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == k)
    }

    fn eat(&mut self, p: &str) -> bool {
        if self.is(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> Result<(), ParseError> {
        if self.eat(p) {
            Ok(())
        } else {
            self.err(format!("expected `{p}`"))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    /// Skip a balanced group starting at an opening bracket.
    fn skip_group(&mut self, open: &str, close: &str) -> Result<(), ParseError> {
        self.expect(open)?;
        let mut depth = 1;
        while depth > 0 {
            match self.bump() {
                Tok::Punct(p) if p == open => depth += 1,
                Tok::Punct(p) if p == close => depth -= 1,
                Tok::Eof => return self.err(format!("unbalanced `{open}`")),
                _ => {}
            }
        }
        Ok(())
    }

    fn function(&mut self) -> Result<Function, ParseError> {
        let pos = self.pos();
        // return type: any run of identifiers and `*` up to the name
        let mut name = None;
        loop {
            match self.peek().clone() {
                Tok::Ident(s) => {
                    self.bump();
                    name = Some(s);
                }
                Tok::Punct("*") => {
                    self.bump();
                }
                Tok::Punct("(") if name.is_some() => break,
                _ => return self.err("expected function definition"),
            }
        }
        let name = name.unwrap_or_default();
        self.skip_group("(", ")")?;
        let body = self.block()?;
        Ok(Function { name, pos, body })
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect("{")?;
        let mut out = Vec::new();
        while !self.eat("}") {
            if self.peek() == &Tok::Eof {
                return self.err("expected `}`");
            }
            self.stmt(&mut out)?;
        }
        Ok(out)
    }

    fn body(&mut self) -> Result<Vec<Stmt>, ParseError> {
        if self.is("{") {
            self.block()
        } else {
            let mut out = Vec::new();
            self.stmt(&mut out)?;
            Ok(out)
        }
    }

    fn starts_decl(&self) -> bool {
        match self.peek() {
            Tok::Ident(s) if QUALIFIERS.contains(&s.as_str()) || type_width(s).is_some() => true,
            // `Name *x` or `Name x`
            Tok::Ident(s) if !is_keyword(s) => match (self.peek_at(1), self.peek_at(2)) {
                (Tok::Ident(_), _) => true,
                (Tok::Punct("*"), Tok::Ident(_)) => matches!(self.peek_at(3), Tok::Punct("=" | ";" | "," | "[")),
                _ => false,
            },
            _ => false,
        }
    }

    fn stmt(&mut self, out: &mut Vec<Stmt>) -> Result<(), ParseError> {
        if self.eat(";") {
            return Ok(());
        }
        if self.is("{") {
            out.extend(self.block()?);
            return Ok(());
        }
        if self.is_kw("if") {
            self.bump();
            self.expect("(")?;
            let cond = self.expr()?;
            self.expect(")")?;
            let then = self.body()?;
            let els = if self.is_kw("else") {
                self.bump();
                self.body()?
            } else {
                Vec::new()
            };
            out.push(Stmt::If { cond, then, els });
            return Ok(());
        }
        if self.is_kw("return") {
            self.bump();
            let e = if self.is(";") { None } else { Some(self.expr()?) };
            self.expect(";")?;
            out.push(Stmt::Return(e));
            return Ok(());
        }
        if self.is_kw("goto") {
            self.bump();
            self.ident()?;
            self.expect(";")?;
            out.push(Stmt::Goto);
            return Ok(());
        }
        // label
        if matches!(self.peek(), Tok::Ident(_)) && matches!(self.peek_at(1), Tok::Punct(":")) {
            self.bump();
            self.bump();
            return Ok(());
        }
        if self.starts_decl() {
            return self.decl(out);
        }
        let pos = self.pos();
        let e = self.expr()?;
        if self.eat("=") {
            let target = match e {
                Expr::Var { name, .. } => name,
                Expr::Unary { op: "*", .. } => String::new(),
                _ => return Err(ParseError { pos, msg: "invalid assignment target".into() }),
            };
            let value = self.expr()?;
            self.expect(";")?;
            out.push(Stmt::Assign { target, value, pos });
            return Ok(());
        }
        if let Some(op) = ["+=", "-=", "<<=", ">>="].into_iter().find(|p| self.is(p)) {
            self.bump();
            let value = self.expr()?;
            self.expect(";")?;
            if let Expr::Var { name, .. } = e {
                let value = Expr::Binary { op, lhs: Box::new(Expr::Var { name: name.clone(), pos }), rhs: Box::new(value) };
                out.push(Stmt::Assign { target: name, value, pos });
            }
            return Ok(());
        }
        self.expect(";")?;
        out.push(Stmt::Expr(e));
        Ok(())
    }

    fn decl(&mut self, out: &mut Vec<Stmt>) -> Result<(), ParseError> {
        let mut register = false;
        let mut unsigned = false;
        let mut width = None;
        let mut last_type = None;
        while let Tok::Ident(s) = self.peek().clone() {
            if s == "register" {
                register = true;
            } else if s == "unsigned" || s == "signed" {
                unsigned = true;
            } else if QUALIFIERS.contains(&s.as_str()) {
            } else if let Some(w) = type_width(&s) {
                // `unsigned int`, `long long` keep the widest
                width = Some(width.map_or(w, |x: u32| x.max(w)));
            } else if width.is_none() && last_type.is_none() {
                last_type = Some(s);
            } else {
                break;
            }
            self.bump();
            // a template argument list
            if self.is("<") {
                self.skip_group("<", ">")?;
            }
        }
        loop {
            let mut pointer = false;
            while self.eat("*") {
                pointer = true;
            }
            let pos = self.pos();
            let name = self.ident()?;
            while self.is("[") {
                self.skip_group("[", "]")?;
            }
            let mut reg = None;
            if self.is_kw("asm") || self.is_kw("__asm__") {
                self.bump();
                self.expect("(")?;
                let Tok::Str(r) = self.bump() else {
                    return self.err("expected register name string");
                };
                reg = Some(r);
                self.expect(")")?;
            }
            let init = if self.eat("=") {
                if self.is("{") {
                    self.skip_group("{", "}")?;
                    None
                } else {
                    Some(self.expr()?)
                }
            } else {
                None
            };
            out.push(Stmt::Decl {
                name,
                width_bits: if pointer { 64 } else { width.unwrap_or(if unsigned { 32 } else { 64 }) },
                pointer,
                register: reg.or(register.then(String::new)),
                init,
                pos,
            });
            if !self.eat(",") {
                break;
            }
        }
        self.expect(";")
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let cond = self.binary(0)?;
        if self.eat("?") {
            let then = self.expr()?;
            self.expect(":")?;
            let els = self.expr()?;
            return Ok(Expr::Ternary { cond: Box::new(cond), then: Box::new(then), els: Box::new(els) });
        }
        Ok(cond)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Punct(op) = *self.peek() {
            let Some(prec) = precedence(op) else { break };
            if prec < min_prec {
                break;
            }
            self.bump();
            let rhs = self.binary(prec + 1)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        for op in ["!", "-", "&", "*", "~", "++", "--"] {
            if self.is(op) {
                self.bump();
                let expr = self.unary()?;
                return Ok(Expr::Unary { op, expr: Box::new(expr) });
            }
        }
        if self.is_kw("sizeof") {
            self.bump();
            if self.is("(") {
                self.skip_group("(", ")")?;
            } else {
                self.unary()?;
            }
            return Ok(Expr::Int(8));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let mut e = match self.bump() {
            Tok::Int(v) => Expr::Int(v),
            Tok::Str(_) => {
                while matches!(self.peek(), Tok::Str(_)) {
                    self.bump();
                }
                Expr::Str
            }
            Tok::Ident(name) => Expr::Var { name, pos },
            Tok::Punct("(") => {
                // cast `(type *) expr` or a parenthesised expression
                if let Tok::Ident(s) = self.peek().clone() {
                    let castish = type_width(&s).is_some()
                        || QUALIFIERS.contains(&s.as_str())
                        || (matches!(self.peek_at(1), Tok::Punct("*")) && matches!(self.peek_at(2), Tok::Punct(")" | "*")));
                    if castish {
                        while !self.eat(")") {
                            if self.peek() == &Tok::Eof {
                                return self.err("unbalanced cast");
                            }
                            self.bump();
                        }
                        let inner = self.unary()?;
                        return Ok(Expr::Cast(Box::new(inner)));
                    }
                }
                let inner = self.expr()?;
                self.expect(")")?;
                inner
            }
            Tok::Eof => return Err(ParseError { pos, msg: "unexpected end of input".into() }),
            Tok::Punct(p) => return Err(ParseError { pos, msg: format!("unexpected `{p}`") }),
        };
        loop {
            if self.is(".") || self.is("->") {
                self.bump();
                let field = self.ident()?;
                e = match e {
                    Expr::Var { name, pos } => Expr::Var { name: format!("{name}.{field}"), pos },
                    other => Expr::Unary { op: ".", expr: Box::new(other) },
                };
            } else if self.is("(") {
                self.bump();
                let mut args = Vec::new();
                if !self.eat(")") {
                    loop {
                        args.push(self.expr()?);
                        if self.eat(")") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                let name = match e {
                    Expr::Var { name, .. } => name,
                    _ => String::new(),
                };
                e = Expr::Call { name, args };
            } else if self.is("[") {
                self.skip_group("[", "]")?;
                e = Expr::Unary { op: "[]", expr: Box::new(e) };
            } else if self.is("++") || self.is("--") {
                self.bump();
            } else {
                break;
            }
        }
        Ok(e)
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(s, "if" | "else" | "return" | "goto" | "sizeof" | "while" | "for")
}

fn precedence(op: &str) -> Option<u8> {
    Some(match op {
        "||" => 1,
        "&&" => 2,
        "|" => 3,
        "^" => 4,
        "&" => 5,
        "==" | "!=" => 6,
        "<" | ">" | "<=" | ">=" => 7,
        "<<" | ">>" => 8,
        "+" | "-" => 9,
        "*" | "/" | "%" => 10,
        _ => return None,
    })
}
