//! Static gadget detection and flip-enumeration fuzzing.
//!
//! [`scan`] finds variables that start from a constant, may be rewritten by
//! an opaque computation, and then gate a branch. Each one is classified by
//! fuzzing its `(width, init, check)` triple: how many single-bit flips turn
//! a failing check into a passing one, and how many flips are needed at
//! least.

mod parser;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use parser::{parse, Expr, Function, ParseError, Pos, SourceUnit, Stmt};

use crate::victims::Check;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzResult {
    /// Bit positions whose single flip makes the check pass.
    pub single_flips: Vec<u32>,
    /// Fewest flips that make it pass; `None` when no value of this width
    /// passes.
    pub min_flips: Option<u32>,
}

pub fn width_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

pub fn flip_fuzz(width: u32, init: u64, check: Check) -> FuzzResult {
    let width = width.min(64);
    let mask = width_mask(width);
    let init = init & mask;
    let single_flips = (0..width).filter(|b| check.passes(init ^ (1 << b))).collect();
    let min_flips = match check {
        _ if check.passes(init) => Some(0),
        Check::Equals(v) => (v & !mask == 0).then(|| (init ^ v).count_ones()),
        Check::NotEquals(_) => (width > 0).then_some(1),
    };
    FuzzResult { single_flips, min_flips }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Hardness {
    /// Every single-bit flip succeeds.
    AnyBit,
    /// Only flipping bit 0 succeeds.
    LsbOnly,
    /// Some, but not all, single flips succeed.
    FewBits { count: u32 },
    /// No single flip succeeds.
    ExactPattern { min_flips: Option<u32> },
}

impl fmt::Display for Hardness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hardness::AnyBit => f.write_str("ANY_BIT"),
            Hardness::LsbOnly => f.write_str("LSB_ONLY"),
            Hardness::FewBits { count } => write!(f, "FEW_BITS({count})"),
            Hardness::ExactPattern { min_flips: Some(n) } => write!(f, "EXACT_PATTERN({n})"),
            Hardness::ExactPattern { min_flips: None } => f.write_str("EXACT_PATTERN(unsatisfiable)"),
        }
    }
}

pub fn classify(width: u32, init: u64, check: Check) -> (Hardness, FuzzResult) {
    let r = flip_fuzz(width, init, check);
    let n = r.single_flips.len() as u32;
    let h = if r.single_flips == [0] {
        Hardness::LsbOnly
    } else if n > 0 && n == width.min(64) {
        Hardness::AnyBit
    } else if n > 0 {
        Hardness::FewBits { count: n }
    } else {
        Hardness::ExactPattern { min_flips: r.min_flips }
    };
    (h, r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetReport {
    pub function: String,
    pub variable: String,
    /// Where the gating comparison is.
    pub line: usize,
    pub column: usize,
    pub width_bits: u32,
    pub register: Option<String>,
    pub init_value: u64,
    /// The condition an attacker needs to become true, normalised so the
    /// initial value fails it.
    pub check: Check,
    pub hardness: Hardness,
    pub exploitable_flips: u32,
    pub min_flips: Option<u32>,
    /// Only ever holds 0 or 1 but is wider than a boolean.
    pub could_be_bool: bool,
}

#[derive(Debug, Default)]
struct VarInfo {
    width: u32,
    register: Option<String>,
    init: Option<u64>,
    overwritten: bool,
    literals: BTreeSet<u64>,
    gates: Vec<(Check, Pos)>,
}

struct Walker {
    vars: BTreeMap<String, VarInfo>,
    order: Vec<String>,
}

impl Walker {
    fn stmts(&mut self, stmts: &[Stmt], opaque_ctx: bool) {
        for s in stmts {
            match s {
                Stmt::Decl { name, width_bits, pointer, register, init, .. } => {
                    let mut info = VarInfo { width: *width_bits, register: register.clone().filter(|r| !r.is_empty()), ..VarInfo::default() };
                    if *pointer {
                        info.width = 0;
                    }
                    if let Some(e) = init {
                        info.init = e.constant();
                        if let Some(c) = info.init {
                            info.literals.insert(c);
                        }
                        self.expr(e);
                    }
                    if !self.vars.contains_key(name) {
                        self.order.push(name.clone());
                    }
                    self.vars.insert(name.clone(), info);
                }
                Stmt::Assign { target, value, .. } => {
                    self.expr(value);
                    if let Some(v) = self.vars.get_mut(target) {
                        match value.constant() {
                            Some(c) => {
                                v.literals.insert(c);
                            }
                            None if is_truth_valued(value) => {
                                v.literals.extend([0, 1]);
                            }
                            None => {
                                // a computed value could be anything
                                v.literals.insert(u64::MAX);
                            }
                        }
                        if opaque_ctx || value.has_call() {
                            v.overwritten = true;
                        }
                    }
                }
                Stmt::Expr(e) => self.expr(e),
                Stmt::If { cond, then, els } => {
                    self.cond(cond);
                    let ctx = opaque_ctx || cond.has_call();
                    self.stmts(then, ctx);
                    self.stmts(els, ctx);
                }
                Stmt::Return(Some(e)) => self.expr(e),
                Stmt::Return(None) | Stmt::Goto => {}
            }
        }
    }

    /// Walk an expression evaluated for its value.
    fn expr(&mut self, e: &Expr) {
        match e {
            Expr::Ternary { cond, then, els } => {
                self.cond(cond);
                self.expr(then);
                self.expr(els);
            }
            Expr::Binary { op: "&&" | "||", lhs, rhs } => {
                self.cond(lhs);
                self.cond(rhs);
            }
            Expr::Binary { lhs, rhs, .. } => {
                self.expr(lhs);
                self.expr(rhs);
            }
            Expr::Call { args, .. } => {
                for a in args {
                    // passing `&x` lets the callee write x
                    if let Expr::Unary { op: "&", expr } = a {
                        if let Expr::Var { name, .. } = expr.as_ref() {
                            if let Some(v) = self.vars.get_mut(name) {
                                v.overwritten = true;
                                v.literals.insert(u64::MAX);
                            }
                        }
                    }
                    self.expr(a);
                }
            }
            Expr::Unary { expr, .. } | Expr::Cast(expr) => self.expr(expr),
            Expr::Int(_) | Expr::Str | Expr::Var { .. } => {}
        }
    }

    /// Walk an expression evaluated for truth.
    fn cond(&mut self, e: &Expr) {
        match e {
            Expr::Var { name, pos } => self.gate(name, Check::NotEquals(0), *pos),
            Expr::Unary { op: "!", expr } => match expr.as_ref() {
                Expr::Var { name, pos } => self.gate(name, Check::Equals(0), *pos),
                other => self.cond(other),
            },
            Expr::Cast(inner) => self.cond(inner),
            Expr::Binary { op: op @ ("==" | "!="), lhs, rhs } => {
                let pair = match (lhs.as_ref(), rhs.as_ref()) {
                    (Expr::Var { name, pos }, k) | (k, Expr::Var { name, pos }) => k.constant().map(|c| (name, *pos, c)),
                    _ => None,
                };
                match pair {
                    Some((name, pos, c)) => {
                        let check = if *op == "==" { Check::Equals(c) } else { Check::NotEquals(c) };
                        self.gate(name, check, pos);
                    }
                    None => {
                        self.expr(lhs);
                        self.expr(rhs);
                    }
                }
            }
            other => self.expr(other),
        }
    }

    fn gate(&mut self, name: &str, check: Check, pos: Pos) {
        if let Some(v) = self.vars.get_mut(name) {
            let (Check::Equals(c) | Check::NotEquals(c)) = check;
            v.literals.insert(c);
            v.gates.push((check, pos));
        }
    }
}

fn is_truth_valued(e: &Expr) -> bool {
    match e {
        Expr::Unary { op: "!", .. } => true,
        Expr::Binary { op, .. } => matches!(*op, "==" | "!=" | "<" | ">" | "<=" | ">=" | "&&" | "||"),
        Expr::Cast(inner) => is_truth_valued(inner),
        _ => false,
    }
}

fn negate(c: Check) -> Check {
    match c {
        Check::Equals(v) => Check::NotEquals(v),
        Check::NotEquals(v) => Check::Equals(v),
    }
}

fn scan_function(f: &Function) -> Vec<GadgetReport> {
    let mut w = Walker { vars: BTreeMap::new(), order: Vec::new() };
    w.stmts(&f.body, false);
    let mut out = Vec::new();
    for name in &w.order {
        let v = &w.vars[name];
        let Some(init) = v.init else { continue };
        if !v.overwritten || v.width == 0 {
            continue;
        }
        let mask = width_mask(v.width);
        let mut seen = BTreeSet::new();
        for (raw, pos) in &v.gates {
            let check = if raw.passes(init & mask) { negate(*raw) } else { *raw };
            if !seen.insert(check) {
                continue;
            }
            let (hardness, fuzz) = classify(v.width, init, check);
            out.push(GadgetReport {
                function: f.name.clone(),
                variable: name.clone(),
                line: pos.line,
                column: pos.column,
                width_bits: v.width,
                register: v.register.clone(),
                init_value: init & mask,
                check,
                hardness,
                exploitable_flips: fuzz.single_flips.len() as u32,
                min_flips: fuzz.min_flips,
                could_be_bool: v.width > 1 && v.literals.iter().all(|l| *l <= 1),
            });
        }
    }
    out
}

pub fn scan_unit(unit: &SourceUnit) -> Vec<GadgetReport> {
    unit.functions.iter().flat_map(scan_function).collect()
}

pub fn scan(source: &str) -> Result<Vec<GadgetReport>, ParseError> {
    Ok(scan_unit(&parse(source)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advice {
    pub summary: String,
    /// A replacement condition, when one is proposed.
    pub rewrite: Option<String>,
    pub constant: Option<u64>,
    pub notes: Vec<String>,
}

/// Random constant of `width` bits at Hamming distance >= 8 from `init`.
pub fn hard_constant<R: Rng + ?Sized>(width: u32, init: u64, rng: &mut R) -> Option<u64> {
    if width < 8 {
        return None;
    }
    let mask = width_mask(width);
    let want = 8.max(width / 4);
    loop {
        let c = rng.random::<u64>() & mask;
        let d = (c ^ init).count_ones();
        if d >= want {
            return Some(c);
        }
    }
}

pub fn suggest<R: Rng + ?Sized>(r: &GadgetReport, rng: &mut R) -> Advice {
    let mut notes = Vec::new();
    if r.could_be_bool {
        notes.push(format!(
            "`{}` only holds 0 or 1; a bool shrinks the target from {} bits to 1",
            r.variable, r.width_bits
        ));
    }
    let propose = |summary: String, rng: &mut R, notes: Vec<String>| {
        match hard_constant(r.width_bits, r.init_value, rng) {
            Some(c) => Advice {
                summary: format!("{summary}; compare against a value that needs {} flips", (c ^ r.init_value).count_ones()),
                rewrite: Some(format!("if ({} == {c:#x})", r.variable)),
                constant: Some(c),
                notes,
            },
            None => Advice { summary, rewrite: None, constant: None, notes },
        }
    };
    match r.hardness {
        Hardness::AnyBit => propose(
            format!("any of the {} bits of `{}` flips the check", r.width_bits, r.variable),
            rng,
            notes,
        ),
        Hardness::FewBits { count } => {
            propose(format!("{count} single-bit flips of `{}` pass the check", r.variable), rng, notes)
        }
        Hardness::LsbOnly => propose(
            format!("only bit 0 of `{}` matters; a multi-bit pattern is stronger", r.variable),
            rng,
            notes,
        ),
        Hardness::ExactPattern { min_flips: Some(n) } if n >= 8 => Advice {
            summary: format!("already hardened: {n} precise flips needed"),
            rewrite: None,
            constant: None,
            notes,
        },
        Hardness::ExactPattern { min_flips: Some(n) } => {
            propose(format!("only {n} precise flips needed"), rng, notes)
        }
        Hardness::ExactPattern { min_flips: None } => Advice {
            summary: "check cannot pass at this width".into(),
            rewrite: None,
            constant: None,
            notes,
        },
    }
}

/// Shipped sample programs, as `(file name, source)`.
pub const CORPUS: [(&str, &str); 13] = [
    ("listing02_gadget.c", include_str!("../../corpus/listing02_gadget.c")),
    ("listing04_sudo.c", include_str!("../../corpus/listing04_sudo.c")),
    ("listing05_openssh_authenticated.c", include_str!("../../corpus/listing05_openssh_authenticated.c")),
    ("listing06_openssh_result.c", include_str!("../../corpus/listing06_openssh_result.c")),
    ("listing07_bellcore.c", include_str!("../../corpus/listing07_bellcore.c")),
    ("listing08_mysql.c", include_str!("../../corpus/listing08_mysql.c")),
    ("listing09_tls_client.c", include_str!("../../corpus/listing09_tls_client.c")),
    ("listing12_loose.c", include_str!("../../corpus/listing12_loose.c")),
    ("listing13_tight.c", include_str!("../../corpus/listing13_tight.c")),
    ("listing14_pattern.c", include_str!("../../corpus/listing14_pattern.c")),
    ("fixed_sudo.c", include_str!("../../corpus/fixed_sudo.c")),
    ("fixed_openssh_result.c", include_str!("../../corpus/fixed_openssh_result.c")),
    ("fixed_tls_client.c", include_str!("../../corpus/fixed_tls_client.c")),
];

/// Expected findings for [`CORPUS`]: one line per report,
/// `file function variable hardness exploitable/width`.
pub const CORPUS_EXPECTED: &str = include_str!("../../corpus/expected.txt");

/// Render reports in the golden-file line format.
pub fn golden_lines(file: &str, reports: &[GadgetReport]) -> Vec<String> {
    reports
        .iter()
        .map(|r| format!("{file} {} {} {} {}/{}", r.function, r.variable, r.hardness, r.exploitable_flips, r.width_bits))
        .collect()
}
