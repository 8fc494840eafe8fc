//! Program evaluation: a small Python-subset generator with an exact interpreter,
//! encoder-decoder wiring over two stacks, teacher-forced accuracy and
//! difficulty heatmaps.
//!
//! The grammar covers integer literals, variables, `+ - *`, assignment,
//! single-line `for v in range(n):stmt`, conditional expressions with one
//! comparison, and `print`. Integers are arbitrary precision.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::time::Instant;

use num_bigint::BigInt;
use num_bigint::Sign;
use serde::{Deserialize, Serialize};

use crate::cells::UnitKind;
use crate::error::{Error, Result};
use crate::gfstack::{
    backward_steps, run_steps, sequence_backward_into, sequence_forward, step_with_cache, Arch, GateMode, Model, ModelConfig, StackState,
};
use crate::numerics::{argmax, Real, Rng};
use crate::training::{EpochMetrics, ExplosionRule, OptimizerConfig, Trainer, UpdateRecord};

pub const GRAMMAR_V1: &str = include_str!("../data/progeval_grammar_v1.txt");

pub const INPUT_VOCAB_SIZE: usize = 41;
pub const OUTPUT_VOCAB_SIZE: usize = 13;
pub const MINUS: usize = 10;
pub const EOS: usize = 11;
pub const SOS: usize = 12;

/// Encoder steps per truncated-BPTT segment.
pub const ENCODER_TRUNCATION: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 128;
/// Fixed-difficulty test sets in the paper hold this many samples per cell.
pub const PAPER_CELL_SAMPLES: usize = 2000;

/// Input and output alphabets of the task, parsed from the frozen grammar file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskVocab {
    input: Vec<char>,
    input_index: HashMap<char, usize>,
    output: Vec<String>,
    assign_names: Vec<char>,
    loop_names: Vec<char>,
}

impl TaskVocab {
    /// The embedded v1 grammar.
    pub fn v1() -> Self {
        TaskVocab::parse(GRAMMAR_V1).expect("embedded grammar is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section = "";
        let mut input = Vec::new();
        let mut output = Vec::new();
        let mut names: HashMap<String, Vec<char>> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match s {
                    "input" => "input",
                    "output" => "output",
                    "names" => "names",
                    other => return Err(Error::Parse { line: n + 1, reason: format!("unknown section `{other}`") }),
                };
                continue;
            }
            match section {
                "input" => input.push(match line {
                    "NL" => '\n',
                    "SP" => ' ',
                    s if s.chars().count() == 1 => s.chars().next().unwrap(),
                    s => return Err(Error::Parse { line: n + 1, reason: format!("bad input symbol `{s}`") }),
                }),
                "output" => output.push(line.to_string()),
                "names" => {
                    let (k, v) = line.split_once('=').ok_or(Error::Parse { line: n + 1, reason: "expected `kind = letters`".into() })?;
                    names.insert(k.trim().to_string(), v.split_whitespace().filter_map(|s| s.chars().next()).collect());
                }
                _ => return Err(Error::Parse { line: n + 1, reason: "entry outside a section".into() }),
            }
        }
        let input_index: HashMap<char, usize> = input.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if input_index.len() != input.len() {
            return Err(Error::Parse { line: 0, reason: "duplicate input symbol".into() });
        }
        let vocab = TaskVocab {
            input,
            input_index,
            output,
            assign_names: names.remove("assign").unwrap_or_default(),
            loop_names: names.remove("loop").unwrap_or_default(),
        };
        if vocab.output.len() != OUTPUT_VOCAB_SIZE
            || vocab.output[MINUS] != "-"
            || vocab.output[EOS] != "EOS"
            || vocab.output[SOS] != "SOS"
            || (0..10).any(|d| vocab.output[d] != d.to_string())
        {
            return Err(Error::Parse { line: 0, reason: "output alphabet must be 0-9, -, EOS, SOS".into() });
        }
        if vocab.assign_names.is_empty() || vocab.loop_names.is_empty() {
            return Err(Error::Parse { line: 0, reason: "missing variable names".into() });
        }
        Ok(vocab)
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn output_len(&self) -> usize {
        self.output.len()
    }

    pub fn input_symbols(&self) -> &[char] {
        &self.input
    }

    pub fn output_symbols(&self) -> &[String] {
        &self.output
    }

    pub fn encode_script(&self, script: &str) -> Result<Vec<usize>> {
        script
            .chars()
            .map(|c| {
                self.input_index.get(&c).copied().ok_or_else(|| Error::Data(format!("character {c:?} is not in the input vocabulary")))
            })
            .collect()
    }

    /// Target digits (and an optional leading minus), without control tokens.
    pub fn encode_target(&self, target: &str) -> Result<Vec<usize>> {
        target
            .chars()
            .map(|c| match c {
                '0'..='9' => Ok(c as usize - '0' as usize),
                '-' => Ok(MINUS),
                _ => Err(Error::Data(format!("character {c:?} is not in the output vocabulary"))),
            })
            .collect()
    }

    pub fn decode_output(&self, symbols: &[usize]) -> String {
        symbols
            .iter()
            .map(|&s| match s {
                0..=9 => char::from(b'0' + s as u8).to_string(),
                MINUS => "-".into(),
                _ => format!("<{}>", self.output.get(s).map_or("?", |v| v.as_str())),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    const ALL: [CmpOp; 6] = [CmpOp::Lt, CmpOp::Gt, CmpOp::Le, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne];

    fn text(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn holds(self, a: &BigInt, b: &BigInt) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Gt => a > b,
            CmpOp::Le => a <= b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Num(BigInt),
    Var(String),
    Neg(Box<Expr>),
    Bin(Box<Expr>, BinOp, Box<Expr>),
    /// `then if lhs op rhs else other`
    Cond {
        then: Box<Expr>,
        lhs: Box<Expr>,
        op: CmpOp,
        rhs: Box<Expr>,
        other: Box<Expr>,
    },
}

impl Expr {
    pub fn nesting(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(_) => 0,
            Expr::Neg(e) => e.nesting(),
            Expr::Bin(a, _, b) => 1 + a.nesting().max(b.nesting()),
            Expr::Cond { then, lhs, rhs, other, .. } => 1 + [then, lhs, rhs, other].iter().map(|e| e.nesting()).max().unwrap(),
        }
    }

    fn eval(&self, env: &HashMap<String, BigInt>, line: usize) -> Result<BigInt> {
        Ok(match self {
            Expr::Num(v) => v.clone(),
            Expr::Var(name) => {
                env.get(name).cloned().ok_or_else(|| Error::Parse { line, reason: format!("name `{name}` is not defined") })?
            }
            Expr::Neg(e) => -e.eval(env, line)?,
            Expr::Bin(a, op, b) => {
                let (x, y) = (a.eval(env, line)?, b.eval(env, line)?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                }
            }
            Expr::Cond { then, lhs, op, rhs, other } => {
                if op.holds(&lhs.eval(env, line)?, &rhs.eval(env, line)?) {
                    then.eval(env, line)?
                } else {
                    other.eval(env, line)?
                }
            }
        })
    }

    fn render(&self, out: &mut String, top: bool) {
        match self {
            Expr::Num(v) if v.sign() == Sign::Minus && !top => out.push_str(&format!("({v})")),
            Expr::Num(v) => out.push_str(&v.to_string()),
            Expr::Var(name) => out.push_str(name),
            Expr::Neg(e) => {
                out.push('-');
                e.render(out, false);
            }
            Expr::Bin(a, op, b) => {
                if !top {
                    out.push('(');
                }
                a.render(out, false);
                out.push(match op {
                    BinOp::Add => '+',
                    BinOp::Sub => '-',
                    BinOp::Mul => '*',
                });
                b.render(out, false);
                if !top {
                    out.push(')');
                }
            }
            Expr::Cond { then, lhs, op, rhs, other } => {
                if !top {
                    out.push('(');
                }
                then.render(out, false);
                out.push_str(" if ");
                lhs.render(out, false);
                out.push_str(op.text());
                rhs.render(out, false);
                out.push_str(" else ");
                other.render(out, false);
                if !top {
                    out.push(')');
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Assign(String, Expr),
    For { var: String, count: Expr, body: Box<Stmt> },
    Print(Expr),
}

impl Stmt {
    pub fn nesting(&self) -> usize {
        match self {
            Stmt::Assign(_, e) | Stmt::Print(e) => e.nesting(),
            Stmt::For { count, body, .. } => 1 + body.nesting().max(count.nesting()),
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            Stmt::Assign(v, e) => {
                out.push_str(v);
                out.push('=');
                e.render(out, true);
            }
            Stmt::For { var, count, body } => {
                out.push_str("for ");
                out.push_str(var);
                out.push_str(" in range(");
                count.render(out, true);
                out.push_str("):");
                body.render(out);
            }
            Stmt::Print(e) => {
                out.push_str("print(");
                e.render(out, false);
                out.push(')');
            }
        }
    }
}

/// Upper bound on loop iterations the interpreter accepts.
pub const MAX_LOOP_ITERATIONS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub stmts: Vec<Stmt>,
}

impl Program {
    /// Deepest statement nesting in the script.
    pub fn nesting(&self) -> usize {
        self.stmts.iter().map(Stmt::nesting).max().unwrap_or(0)
    }

    /// Runs the program; returns printed lines joined by newlines and the final bindings.
    pub fn run(&self) -> Result<(String, HashMap<String, BigInt>)> {
        let mut env = HashMap::new();
        let mut printed = Vec::new();
        for (n, s) in self.stmts.iter().enumerate() {
            exec(s, &mut env, &mut printed, n + 1)?;
        }
        Ok((printed.join("\n"), env))
    }
}

fn exec(stmt: &Stmt, env: &mut HashMap<String, BigInt>, printed: &mut Vec<String>, line: usize) -> Result<()> {
    match stmt {
        Stmt::Assign(v, e) => {
            let value = e.eval(env, line)?;
            env.insert(v.clone(), value);
        }
        Stmt::Print(e) => printed.push(e.eval(env, line)?.to_string()),
        Stmt::For { var, count, body } => {
            let n = count.eval(env, line)?;
            let n: u64 = if n.sign() == Sign::Minus {
                0
            } else {
                u64::try_from(&n)
                    .ok()
                    .filter(|&n| n <= MAX_LOOP_ITERATIONS)
                    .ok_or_else(|| Error::Parse { line, reason: "loop count too large".into() })?
            };
            for k in 0..n {
                env.insert(var.clone(), BigInt::from(k));
                exec(body, env, printed, line)?;
            }
        }
    }
    Ok(())
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (n, s) in self.stmts.iter().enumerate() {
            if n > 0 {
                out.push('\n');
            }
            s.render(&mut out);
        }
        f.write_str(&out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Int(BigInt),
    Name(String),
    Kw(&'static str),
    Op(&'static str),
    LParen,
    RParen,
    Colon,
}

const KEYWORDS: [&str; 6] = ["print", "for", "in", "range", "if", "else"];

fn tokenize_line(line: &str, n: usize) -> Result<Vec<Tok>> {
    let err = |reason: String| Error::Parse { line: n, reason };
    let chars: Vec<char> = line.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' => i += 1,
            '0'..='9' => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let digits: String = chars[start..i].iter().collect();
                if digits.len() > 1 && digits.starts_with('0') {
                    return Err(err(format!("leading zero in `{digits}`")));
                }
                toks.push(Tok::Int(digits.parse().expect("ascii digits")));
            }
            'a'..='z' => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_lowercase() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                match KEYWORDS.iter().find(|k| **k == word) {
                    Some(k) => toks.push(Tok::Kw(k)),
                    None => toks.push(Tok::Name(word)),
                }
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            ':' => {
                toks.push(Tok::Colon);
                i += 1;
            }
            '+' | '-' | '*' => {
                toks.push(Tok::Op(match c {
                    '+' => "+",
                    '-' => "-",
                    _ => "*",
                }));
                i += 1;
            }
            '<' | '>' | '=' | '!' => {
                let two = chars.get(i + 1) == Some(&'=');
                let op = match (c, two) {
                    ('<', true) => "<=",
                    ('>', true) => ">=",
                    ('=', true) => "==",
                    ('!', true) => "!=",
                    ('<', false) => "<",
                    ('>', false) => ">",
                    ('=', false) => "=",
                    _ => return Err(err("`!` must be followed by `=`".into())),
                };
                toks.push(Tok::Op(op));
                i += if two { 2 } else { 1 };
            }
            other => return Err(err(format!("unexpected character {other:?}"))),
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse { line: self.line, reason: reason.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(self.err(format!("expected {want:?}, found {other:?}"))),
        }
    }

    fn stmt(&mut self) -> Result<Stmt> {
        match self.next() {
            Some(Tok::Kw("print")) => {
                self.expect(Tok::LParen)?;
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(Stmt::Print(e))
            }
            Some(Tok::Kw("for")) => {
                let var = match self.next() {
                    Some(Tok::Name(v)) => v,
                    other => return Err(self.err(format!("expected loop variable, found {other:?}"))),
                };
                self.expect(Tok::Kw("in"))?;
                self.expect(Tok::Kw("range"))?;
                self.expect(Tok::LParen)?;
                let count = self.expr()?;
                self.expect(Tok::RParen)?;
                self.expect(Tok::Colon)?;
                let body = self.stmt()?;
                Ok(Stmt::For { var, count, body: Box::new(body) })
            }
            Some(Tok::Name(v)) => {
                self.expect(Tok::Op("="))?;
                Ok(Stmt::Assign(v, self.expr()?))
            }
            other => Err(self.err(format!("expected a statement, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let then = self.arith()?;
        if self.peek() != Some(&Tok::Kw("if")) {
            return Ok(then);
        }
        self.pos += 1;
        let lhs = self.arith()?;
        let op = match self.next() {
            Some(Tok::Op(o)) => {
                CmpOp::ALL.into_iter().find(|c| c.text() == o).ok_or_else(|| self.err(format!("`{o}` is not a comparison")))?
            }
            other => return Err(self.err(format!("expected a comparison, found {other:?}"))),
        };
        let rhs = self.arith()?;
        self.expect(Tok::Kw("else"))?;
        let other = self.expr()?;
        Ok(Expr::Cond { then: Box::new(then), lhs: Box::new(lhs), op, rhs: Box::new(rhs), other: Box::new(other) })
    }

    fn arith(&mut self) -> Result<Expr> {
        let mut acc = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op("+")) => BinOp::Add,
                Some(Tok::Op("-")) => BinOp::Sub,
                _ => return Ok(acc),
            };
            self.pos += 1;
            acc = Expr::Bin(Box::new(acc), op, Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.unary()?;
        while self.peek() == Some(&Tok::Op("*")) {
            self.pos += 1;
            acc = Expr::Bin(Box::new(acc), BinOp::Mul, Box::new(self.unary()?));
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Tok::Op("-")) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        match self.next() {
            Some(Tok::Int(v)) => Ok(Expr::Num(v)),
            Some(Tok::Name(v)) => Ok(Expr::Var(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            other => Err(self.err(format!("expected an operand, found {other:?}"))),
        }
    }
}

pub fn parse_program(script: &str) -> Result<Program> {
    let mut stmts = Vec::new();
    for (n, line) in script.split('\n').enumerate() {
        let mut p = Parser { toks: tokenize_line(line, n + 1)?, pos: 0, line: n + 1 };
        let s = p.stmt()?;
        if p.pos != p.toks.len() {
            return Err(p.err("trailing tokens after statement"));
        }
        stmts.push(s);
    }
    if !matches!(stmts.last(), Some(Stmt::Print(_))) {
        return Err(Error::Parse { line: stmts.len(), reason: "script must end with print".into() });
    }
    Ok(Program { stmts })
}

/// Evaluates a script in the supported subset and returns what it prints.
pub fn interpret(script: &str) -> Result<String> {
    Ok(parse_program(script)?.run()?.0)
}

/// Digits in a printed integer, sign excluded.
pub fn digit_length(target: &str) -> usize {
    target.trim_start_matches('-').len()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramSample {
    pub script: String,
    pub target: String,
    pub nesting: usize,
    pub target_length: usize,
}

/// Attempts per sample before generation gives up.
pub const MAX_GENERATION_ATTEMPTS: usize = 200_000;

struct Gen<'a> {
    rng: &'a mut Rng,
    length: usize,
    vocab: &'a TaskVocab,
}

impl Gen<'_> {
    fn literal(&mut self) -> Expr {
        let k = self.rng.range_inclusive(1, self.length);
        let mut digits = String::with_capacity(k);
        if k == 1 {
            digits.push(char::from(b'0' + self.rng.below(10) as u8));
        } else {
            digits.push(char::from(b'1' + self.rng.below(9) as u8));
            for _ in 1..k {
                digits.push(char::from(b'0' + self.rng.below(10) as u8));
            }
        }
        Expr::Num(digits.parse().expect("digits"))
    }

    fn leaf(&mut self, vars: &[String]) -> Expr {
        if !vars.is_empty() && self.rng.bernoulli(0.3) {
            Expr::Var(vars[self.rng.below(vars.len())].clone())
        } else {
            self.literal()
        }
    }

    /// Expression of exactly `depth` nesting levels.
    fn expr(&mut self, depth: usize, vars: &[String]) -> Expr {
        if depth == 0 {
            return self.leaf(vars);
        }
        if self.rng.bernoulli(0.2) {
            let forced = self.rng.below(4);
            let mut parts: Vec<Expr> = (0..4)
                .map(|k| {
                    let d = if k == forced { depth - 1 } else { self.rng.below(depth) };
                    self.expr(d, vars)
                })
                .collect();
            let op = CmpOp::ALL[self.rng.below(6)];
            let other = parts.pop().unwrap();
            let rhs = parts.pop().unwrap();
            let lhs = parts.pop().unwrap();
            let then = parts.pop().unwrap();
            Expr::Cond { then: Box::new(then), lhs: Box::new(lhs), op, rhs: Box::new(rhs), other: Box::new(other) }
        } else {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][self.rng.below(3)];
            let other_depth = self.rng.below(depth);
            let (da, db) = if self.rng.bernoulli(0.5) { (depth - 1, other_depth) } else { (other_depth, depth - 1) };
            let a = self.expr(da, vars);
            let b = self.expr(db, vars);
            Expr::Bin(Box::new(a), op, Box::new(b))
        }
    }

    /// Optional assignments and accumulation loops, each at most `depth` deep.
    fn prelude(&mut self, depth: usize) -> (Vec<Stmt>, Vec<String>) {
        let mut stmts = Vec::new();
        let mut vars: Vec<String> = Vec::new();
        if depth < 2 {
            return (stmts, vars);
        }
        let n = self.rng.below(3);
        for _ in 0..n {
            let free: Vec<char> = self.vocab.assign_names.iter().copied().filter(|c| !vars.contains(&c.to_string())).collect();
            if !vars.is_empty() && self.rng.bernoulli(0.5) {
                let v = vars[self.rng.below(vars.len())].clone();
                let lv = self.vocab.loop_names[self.rng.below(self.vocab.loop_names.len())].to_string();
                let step = if self.rng.bernoulli(0.3) { Expr::Var(lv.clone()) } else { self.literal() };
                let op = if self.rng.bernoulli(0.5) { BinOp::Add } else { BinOp::Sub };
                let count = Expr::Num(BigInt::from(self.rng.range_inclusive(1, 9)));
                stmts.push(Stmt::For {
                    var: lv,
                    count,
                    body: Box::new(Stmt::Assign(v.clone(), Expr::Bin(Box::new(Expr::Var(v)), op, Box::new(step)))),
                });
            } else if !free.is_empty() {
                let v = free[self.rng.below(free.len())].to_string();
                let d = self.rng.below(depth);
                let e = self.expr(d, &vars);
                stmts.push(Stmt::Assign(v.clone(), e));
                vars.push(v);
            }
        }
        (stmts, vars)
    }
}

/// Draws a script whose nesting and printed digit count match the request.
pub fn generate_program(nesting: usize, target_length: usize, rng: &mut Rng) -> Result<ProgramSample> {
    generate_program_with(&TaskVocab::v1(), nesting, target_length, rng)
}

pub fn generate_program_with(vocab: &TaskVocab, nesting: usize, target_length: usize, rng: &mut Rng) -> Result<ProgramSample> {
    if nesting == 0 || target_length == 0 {
        return Err(Error::config("difficulty", "nesting and target length must be at least 1"));
    }
    let mut gen = Gen { rng, length: target_length, vocab };
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let (mut stmts, vars) = gen.prelude(nesting);
        stmts.push(Stmt::Print(gen.expr(nesting, &vars)));
        let program = Program { stmts };
        let Ok((target, _)) = program.run() else { continue };
        if digit_length(&target) != target_length || program.nesting() != nesting {
            continue;
        }
        return Ok(ProgramSample { script: program.to_string(), target, nesting, target_length });
    }
    Err(Error::Generation(format!(
        "no script with nesting {nesting} and {target_length}-digit output after {MAX_GENERATION_ATTEMPTS} attempts"
    )))
}

/// Difficulty ranges (inclusive) sampled uniformly per training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    pub nesting: (usize, usize),
    pub length: (usize, usize),
}

impl Curriculum {
    pub const DESK: Curriculum = Curriculum { nesting: (1, 3), length: (1, 5) };
    pub const PAPER: Curriculum = Curriculum { nesting: (1, 5), length: (1, 10) };
    pub const DESK_TRAIN_SAMPLES: usize = 50_000;
    pub const PAPER_TRAIN_SAMPLES: usize = 320_000;

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if ok(self.nesting) && ok(self.length) {
            Ok(())
        } else {
            Err(Error::config("curriculum", "ranges must satisfy 1 ≤ lo ≤ hi"))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<ProgramSample> {
        self.validate()?;
        let n = rng.range_inclusive(self.nesting.0, self.nesting.1);
        let l = rng.range_inclusive(self.length.0, self.length.1);
        generate_program(n, l, rng)
    }
}

/// `n` curriculum samples whose scripts avoid `exclude`.
pub fn generate_dataset(curriculum: &Curriculum, n: usize, rng: &mut Rng, exclude: &HashSet<String>) -> Result<Vec<ProgramSample>> {
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let s = curriculum.sample(rng)?;
        if exclude.contains(&s.script) {
            misses += 1;
            if misses > MAX_GENERATION_ATTEMPTS {
                return Err(Error::Generation("could not avoid the excluded scripts".into()));
            }
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<ProgramSample>,
    pub valid: Vec<ProgramSample>,
    pub test: Vec<ProgramSample>,
}

/// Train, valid and test sets; valid and test never repeat a training script.
pub fn build_splits(curriculum: &Curriculum, sizes: (usize, usize, usize), rng: &mut Rng) -> Result<DatasetSplits> {
    let train = generate_dataset(curriculum, sizes.0, rng, &HashSet::new())?;
    let seen: HashSet<String> = train.iter().map(|s| s.script.clone()).collect();
    let valid = generate_dataset(curriculum, sizes.1, rng, &seen)?;
    let test = generate_dataset(curriculum, sizes.2, rng, &seen)?;
    Ok(DatasetSplits { train, valid, test })
}

const DATASET_HEADER: &str = "# gfrnn-progeval v1\tscript\ttarget\tnesting\tlength";

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            other => return Err(Error::Parse { line, reason: format!("bad escape {other:?}") }),
        }
    }
    Ok(out)
}

pub fn dataset_to_string(samples: &[ProgramSample]) -> String {
    let mut s = String::from(DATASET_HEADER);
    s.push('\n');
    for p in samples {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", escape(&p.script), p.target, p.nesting, p.target_length));
    }
    s
}

pub fn dataset_from_str(text: &str) -> Result<Vec<ProgramSample>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DATASET_HEADER => {}
        _ => return Err(Error::Parse { line: 1, reason: "missing progeval v1 header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = |r: &str| Error::Parse { line: n + 1, reason: r.to_string() };
            if f.len() != 4 {
                return Err(bad("expected four tab-separated fields"));
            }
            Ok(ProgramSample {
                script: unescape(f[0], n + 1)?,
                target: f[1].to_string(),
                nesting: f[2].parse().map_err(|_| bad("bad nesting"))?,
                target_length: f[3].parse().map_err(|_| bad("bad length"))?,
            })
        })
        .collect()
}

pub fn write_dataset(path: &Path, samples: &[ProgramSample]) -> Result<()> {
    std::fs::write(path, dataset_to_string(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<ProgramSample>> {
    dataset_from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// A sample as symbol indices; `target` excludes the control tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub script: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_sample(vocab: &TaskVocab, s: &ProgramSample) -> Result<EncodedSample> {
    Ok(EncodedSample { script: vocab.encode_script(&s.script)?, target: vocab.encode_target(&s.target)? })
}

impl EncodedSample {
    fn decoder_io(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.target.len() + 1);
        input.push(SOS);
        input.extend_from_slice(&self.target);
        let mut output = self.target.clone();
        output.push(EOS);
        (input, output)
    }

    /// Predicted positions, end-of-sequence included.
    pub fn positions(&self) -> usize {
        self.target.len() + 1
    }
}

/// Layer sizes of the paper's program-evaluation models.
pub fn paper_layer_sizes(unit: UnitKind) -> Vec<usize> {
    match unit {
        UnitKind::Gru => vec![230; 3],
        UnitKind::Lstm => vec![200; 3],
        UnitKind::Tanh => vec![230; 3],
    }
}

/// Encoder reading the script and decoder emitting the answer, wired through
/// the encoder's final per-layer state.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: Model,
    pub decoder: Model,
    /// Encoder steps per gradient segment; `None` backpropagates through the whole script.
    pub truncation: Option<usize>,
}

impl EncoderDecoder {
    pub fn configs(arch: Arch, unit: UnitKind, layers: Vec<usize>) -> (ModelConfig, ModelConfig) {
        let enc = ModelConfig::new(arch, unit, layers.clone(), INPUT_VOCAB_SIZE, 0);
        let dec = ModelConfig::new(arch, unit, layers, OUTPUT_VOCAB_SIZE, OUTPUT_VOCAB_SIZE);
        (enc, dec)
    }

    pub fn new(arch: Arch, unit: UnitKind, layers: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let (enc, dec) = EncoderDecoder::configs(arch, unit, layers);
        let encoder = Model::new(enc, rng)?;
        let decoder = Model::new(dec, rng)?;
        EncoderDecoder::from_models(encoder, decoder, Some(ENCODER_TRUNCATION))
    }

    pub fn from_models(encoder: Model, decoder: Model, truncation: Option<usize>) -> Result<Self> {
        if encoder.cfg.units_per_layer != decoder.cfg.units_per_layer || encoder.cfg.unit != decoder.cfg.unit {
            return Err(Error::config("decoder", "encoder and decoder must share unit kind and layer sizes"));
        }
        if decoder.cfg.output_vocab != OUTPUT_VOCAB_SIZE || decoder.cfg.input_vocab != OUTPUT_VOCAB_SIZE {
            return Err(Error::config("decoder", "decoder reads and writes the 13-symbol output alphabet"));
        }
        if encoder.cfg.input_vocab != INPUT_VOCAB_SIZE {
            return Err(Error::config("encoder", "encoder reads the 41-symbol input alphabet"));
        }
        if truncation == Some(0) {
            return Err(Error::config("truncation", "must be positive"));
        }
        Ok(EncoderDecoder { encoder, decoder, truncation })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.params.len() + self.decoder.params.len()
    }

    pub fn to_flat(&self) -> Vec<Real> {
        let mut v = self.encoder.params.to_flat();
        v.extend(self.decoder.params.to_flat());
        v
    }

    pub fn set_flat(&mut self, values: &[Real]) -> Result<()> {
        let n = self.encoder.params.len();
        if values.len() != self.n_params() {
            return Err(Error::Shape { context: "EncoderDecoder::set_flat", expected: self.n_params(), actual: values.len() });
        }
        self.encoder.params.set_flat(&values[..n])?;
        self.decoder.params.set_flat(&values[n..])
    }

    /// Final encoder state after reading `script` from a zero state.
    pub fn encode(&self, script: &[usize]) -> Result<StackState> {
        let mut state = self.encoder.zero_state();
        for &s in script {
            if s >= INPUT_VOCAB_SIZE {
                return Err(Error::Data(format!("input symbol {s} out of range")));
            }
            state = step_with_cache(&self.encoder.cfg, &self.encoder.params, s, &state, GateMode::Learned).state();
        }
        Ok(state)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqOutput {
    /// Output distribution at each predicted position.
    pub probs: Vec<Vec<Real>>,
    pub nll: Real,
    pub encoder_state: StackState,
}

pub fn seq2seq_forward(ed: &EncoderDecoder, sample: &EncodedSample) -> Result<Seq2SeqOutput> {
    let encoder_state = ed.encode(&sample.script)?;
    let (input, output) = sample.decoder_io();
    let out = sequence_forward(&ed.decoder.cfg, &ed.decoder.params, &input, &output, &encoder_state)?;
    Ok(Seq2SeqOutput { probs: out.cache.probs, nll: out.nll, encoder_state })
}

/// Accumulates gradients of `scale · nll` into the encoder and decoder sets; returns the nll.
///
/// The encoder is split into segments of `truncation` steps aligned to the end of
/// the script. State flows through every segment; gradient reaches the last one.
pub fn seq2seq_backward_into(
    ed: &EncoderDecoder,
    sample: &EncodedSample,
    scale: Real,
    encoder_grads: &mut crate::gfstack::ParamSet,
    decoder_grads: &mut crate::gfstack::ParamSet,
) -> Result<Real> {
    let n = sample.script.len();
    let window = ed.truncation.unwrap_or(n).min(n);
    let split = n - window;
    let prefix_state = ed.encode(&sample.script[..split])?;
    let steps = run_steps(&ed.encoder.cfg, &ed.encoder.params, &sample.script[split..], &prefix_state)?;
    let encoder_state = steps.last().map_or(prefix_state, |s| s.state());
    let (input, output) = sample.decoder_io();
    let out = sequence_forward(&ed.decoder.cfg, &ed.decoder.params, &input, &output, &encoder_state)?;
    let d_state = sequence_backward_into(&ed.decoder.cfg, &ed.decoder.params, Some(&out.cache), scale, None, decoder_grads)?;
    backward_steps(&ed.encoder.cfg, &ed.encoder.params, &steps, None, Some(&d_state), encoder_grads);
    Ok(out.nll)
}

/// Fraction of predicted positions (end token included) where the argmax is
/// right, always conditioning on the true prefix.
pub fn teacher_forced_accuracy(ed: &EncoderDecoder, samples: &[EncodedSample]) -> Result<Real> {
    let (correct, total) = accuracy_counts(ed, samples)?;
    if total == 0 {
        return Err(Error::Data("accuracy needs a non-empty test set".into()));
    }
    Ok(correct as Real / total as Real)
}

pub fn accuracy_counts(ed: &EncoderDecoder, samples: &[EncodedSample]) -> Result<(usize, usize)> {
    let mut correct = 0;
    let mut total = 0;
    for s in samples {
        let out = seq2seq_forward(ed, s)?;
        let (_, expected) = s.decoder_io();
        correct += out.probs.iter().zip(&expected).filter(|(p, &e)| argmax(p) == e).count();
        total += expected.len();
    }
    Ok((correct, total))
}

/// Greedy decoding, stopping at the end token or after `max_len` symbols.
pub fn greedy_decode(ed: &EncoderDecoder, script: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut state = ed.encode(script)?;
    let mut sym = SOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (next, logits) = ed.decoder.step(sym, &state)?;
        state = next;
        sym = argmax(&logits);
        if sym == EOS {
            break;
        }
        out.push(sym);
    }
    Ok(out)
}

/// Minibatch Adam training over a fixed sample list, reshuffled every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqTrainer {
    pub trainer: Trainer,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub epoch: u64,
    /// Next batch index within the epoch.
    pub position: usize,
}

impl Seq2SeqTrainer {
    pub fn new(ed: &EncoderDecoder, optimizer: OptimizerConfig, rule: ExplosionRule, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(Seq2SeqTrainer { trainer: Trainer::new(optimizer, rule, ed.n_params())?, batch_size, shuffle_seed, epoch: 0, position: 0 })
    }

    /// Sample order of the current epoch.
    pub fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        Rng::new(self.shuffle_seed).fork(self.epoch).shuffle(&mut idx);
        idx
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn step(&mut self, ed: &mut EncoderDecoder, data: &[EncodedSample], log: &mut dyn FnMut(&UpdateRecord)) -> Result<UpdateRecord> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let started = Instant::now();
        let order = self.order(data.len());
        let lo = self.position * self.batch_size;
        let batch: Vec<&EncodedSample> = order[lo..(lo + self.batch_size).min(data.len())].iter().map(|&i| &data[i]).collect();
        let positions: usize = batch.iter().map(|s| s.positions()).sum();
        let scale = 1.0 / positions as Real;
        let mut ge = ed.encoder.params.zeros_like();
        let mut gd = ed.decoder.params.zeros_like();
        let mut nll = 0.0;
        for s in batch {
            nll += seq2seq_backward_into(ed, s, scale, &mut ge, &mut gd)?;
        }
        let mut grads = ge.to_flat();
        grads.extend(gd.to_flat());
        let mut theta = ed.to_flat();
        let outcome = self.trainer.apply_flat(&mut theta, &grads)?;
        if outcome.applied {
            ed.set_flat(&theta)?;
        }
        let record = UpdateRecord {
            update: self.trainer.updates,
            epoch: self.epoch,
            nll: nll * scale,
            grad_norm: outcome.grad_norm,
            lr: outcome.lr,
            wall_ms: started.elapsed().as_millis() as u64,
            applied: outcome.applied,
        };
        self.position += 1;
        if self.position == self.batches_per_epoch(data.len()) {
            self.position = 0;
            self.epoch += 1;
        }
        log(&record);
        Ok(record)
    }

    pub fn train_epoch(
        &mut self,
        ed: &mut EncoderDecoder,
        data: &[EncodedSample],
        log: &mut dyn FnMut(&UpdateRecord),
    ) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let (mut nll, mut lr_trace, mut grad_norm_trace, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), 0);
        while self.epoch == epoch {
            let r = self.step(ed, data, log)?;
            nll.push(r.nll);
            lr_trace.push(r.lr);
            grad_norm_trace.push(r.grad_norm);
            skipped += usize::from(!r.applied);
        }
        Ok(EpochMetrics { epoch, mean_nll: nll.iter().sum::<Real>() / nll.len() as Real, lr_trace, grad_norm_trace, skipped })
    }
}

/// Mean nll per predicted position over a sample set.
pub fn mean_nll(ed: &EncoderDecoder, samples: &[EncodedSample]) -> Result<Real> {
    let mut nll = 0.0;
    let mut n = 0;
    for s in samples {
        nll += seq2seq_forward(ed, s)?.nll;
        n += s.positions();
    }
    Ok(nll / n.max(1) as Real)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nestings: Vec<usize>,
    pub lengths: Vec<usize>,
    pub samples_per_cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapGrid {
    pub nestings: Vec<usize>,
    pub lengths: Vec<usize>,
    pub stacked: Vec<Vec<Real>>,
    pub gated_feedback: Vec<Vec<Real>>,
    /// `gated_feedback − stacked`, cell by cell.
    pub difference: Vec<Vec<Real>>,
}

/// Fixed-difficulty test set for one cell, avoiding training scripts.
pub fn cell_test_set(nesting: usize, length: usize, n: usize, rng: &mut Rng, exclude: &HashSet<String>) -> Result<Vec<ProgramSample>> {
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        let s = generate_program(nesting, length, rng)?;
        if exclude.contains(&s.script) {
            misses += 1;
            if misses > MAX_GENERATION_ATTEMPTS {
                return Err(Error::Generation(format!("cell ({nesting}, {length}) is exhausted by the training set")));
            }
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

/// Accuracy of both models on freshly generated sets per (nesting, length) cell.
///
/// Each cell draws from its own stream forked from `rng`, so cells are
/// independent of evaluation order.
pub fn build_heatmap(
    stacked: &EncoderDecoder,
    gf: &EncoderDecoder,
    grid: &GridSpec,
    exclude: &HashSet<String>,
    rng: &Rng,
) -> Result<HeatmapGrid> {
    let vocab = TaskVocab::v1();
    let mut rows_s = Vec::new();
    let mut rows_g = Vec::new();
    for (ni, &nesting) in grid.nestings.iter().enumerate() {
        let mut rs = Vec::new();
        let mut rg = Vec::new();
        for (li, &length) in grid.lengths.iter().enumerate() {
            let mut cell_rng = rng.fork((ni * grid.lengths.len() + li) as u64);
            let set = cell_test_set(nesting, length, grid.samples_per_cell, &mut cell_rng, exclude)?;
            let enc: Vec<EncodedSample> = set.iter().map(|s| encode_sample(&vocab, s)).collect::<Result<_>>()?;
            rs.push(teacher_forced_accuracy(stacked, &enc)?);
            rg.push(teacher_forced_accuracy(gf, &enc)?);
        }
        rows_s.push(rs);
        rows_g.push(rg);
    }
    let difference = rows_g.iter().zip(&rows_s).map(|(g, s)| g.iter().zip(s).map(|(a, b)| a - b).collect()).collect();
    Ok(HeatmapGrid { nestings: grid.nestings.clone(), lengths: grid.lengths.clone(), stacked: rows_s, gated_feedback: rows_g, difference })
}

impl HeatmapGrid {
    /// CSV with a header row of lengths and the nesting level in the first column.
    pub fn matrix_csv(&self, m: &[Vec<Real>]) -> String {
        let mut s = String::from("nesting");
        for l in &self.lengths {
            s.push_str(&format!(",{l}"));
        }
        s.push('\n');
        for (n, row) in self.nestings.iter().zip(m) {
            s.push_str(&n.to_string());
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `heatmap_stacked.csv`, `heatmap_gf.csv` and `heatmap_diff.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for (name, m) in
            [("heatmap_stacked.csv", &self.stacked), ("heatmap_gf.csv", &self.gated_feedback), ("heatmap_diff.csv", &self.difference)]
        {
            let path = dir.join(name);
            std::fs::write(&path, self.matrix_csv(m)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
