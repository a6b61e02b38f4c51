//! Population models: the model DSL, well-formedness checking, and exact
//! collective generators for instances small enough to enumerate.
//!
//! A model describes one agent class with a finite state space. Transitions
//! move agents between states via multiset update rules and fire at rates
//! written as functions of the normalized state densities. The same density
//! expressions drive the fluid ODE, the tagged-agent rate matrix, and (scaled
//! by population size) the exact simulator.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::expr::{BinOp, Func, RateExpr};
use crate::ode::NumericError;

/// Wobble below this magnitude is integrator noise: clamp to zero.
/// Anything more negative is a modeling error.
pub const NEG_RATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentStateSpace {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl AgentStateSpace {
    pub fn new(names: Vec<String>) -> Result<Self, ModelError> {
        if names.is_empty() {
            return Err(ModelError::Invalid { msg: "state space is empty".into() });
        }
        let mut index = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(ModelError::Invalid { msg: "empty state name".into() });
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(ModelError::DuplicateName { kind: "state", name: name.clone() });
            }
        }
        Ok(AgentStateSpace { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One agent movement `src -> dst`, repeated `mult` times per firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rule {
    pub src: usize,
    pub dst: usize,
    pub mult: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub name: String,
    pub rules: Vec<Rule>,
    /// Limit rate in density variables; the simulator scales it by N.
    pub rate: RateExpr,
    /// Optional per-capita form: rate seen by one agent in the rule's source
    /// state. When absent the share is rate/density with an epsilon guard.
    pub percap: Option<RateExpr>,
}

/// Reward declarations as parsed from the model file. State and transition
/// entries not listed default to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDecl {
    pub name: String,
    pub state_rewards: Vec<(usize, f64)>,
    pub trans_rewards: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    pub name: String,
    pub agent: AgentStateSpace,
    /// Declaration order preserved for printing.
    pub params: Vec<(String, f64)>,
    pub transitions: Vec<Transition>,
    pub init_density: Vec<f64>,
    pub labels: Vec<(String, Vec<usize>)>,
    pub rewards: Vec<RewardDecl>,
}

impl PopulationModel {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        Parser::new(text)?.parse()
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn param_fn(&self) -> impl Fn(&str) -> Option<f64> + '_ {
        move |name| self.param(name)
    }

    pub fn n_states(&self) -> usize {
        self.agent.len()
    }

    pub fn transition_index(&self, name: &str) -> Option<usize> {
        self.transitions.iter().position(|t| t.name == name)
    }

    pub fn label_states(&self, name: &str) -> Option<&[usize]> {
        self.labels.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }

    pub fn reward_decl(&self, name: &str) -> Option<&RewardDecl> {
        self.rewards.iter().find(|r| r.name == name)
    }

    /// Integer initial counts for a population of `n_pop`, by largest-remainder
    /// rounding of the initial densities. The result sums to `n_pop` exactly;
    /// remainder ties break toward the lower state index.
    pub fn initial_counts(&self, n_pop: u64) -> Vec<u64> {
        let n = self.n_states();
        let mut counts = vec![0u64; n];
        let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(n);
        let mut assigned = 0u64;
        for i in 0..n {
            let exact = self.init_density[i] * n_pop as f64;
            let floor = exact.floor().max(0.0) as u64;
            counts[i] = floor;
            assigned += floor;
            fracs.push((i, exact - floor as f64));
        }
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut left = n_pop.saturating_sub(assigned);
        for (i, _) in fracs {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }

    /// Renders the model in DSL syntax. Definitions were inlined at parse
    /// time, so expressions print fully expanded.
    pub fn print(&self) -> String {
        let names = self.agent.names();
        let mut out = String::new();
        let _ = writeln!(out, "model {}", self.name);
        let _ = writeln!(out, "states {}", names.join(", "));
        for (name, value) in &self.params {
            let _ = writeln!(out, "param {} = {:?}", name, value);
        }
        for t in &self.transitions {
            let mut body = String::new();
            for r in &t.rules {
                if r.mult == 1 {
                    let _ = write!(body, "rule {} -> {}; ", names[r.src], names[r.dst]);
                } else {
                    let _ = write!(body, "rule {} -> {} * {}; ", names[r.src], names[r.dst], r.mult);
                }
            }
            let _ = write!(body, "rate {}", t.rate.print(names));
            if let Some(p) = &t.percap {
                let _ = write!(body, "; percap {}", p.print(names));
            }
            let _ = writeln!(out, "transition {} {{ {} }}", t.name, body);
        }
        for (i, d) in self.init_density.iter().enumerate() {
            if *d != 0.0 {
                let _ = writeln!(out, "init x_{} = {:?}", names[i], d);
            }
        }
        for (name, states) in &self.labels {
            let listed: Vec<&str> = states.iter().map(|&i| names[i].as_str()).collect();
            let _ = writeln!(out, "label {} = {{ {} }}", name, listed.join(", "));
        }
        for rw in &self.rewards {
            let mut items: Vec<String> = Vec::new();
            for (s, v) in &rw.state_rewards {
                items.push(format!("state {} = {:?}", names[*s], v));
            }
            for (t, v) in &rw.trans_rewards {
                items.push(format!("trans {} = {:?}", self.transitions[*t].name, v));
            }
            let _ = writeln!(out, "reward {} {{ {} }}", rw.name, items.join("; "));
        }
        out
    }
}

/// Net per-state agent count change when the transition fires once.
/// Components always sum to zero: each rule moves, never creates.
pub fn update_vector(t: &Transition, n_states: usize) -> Vec<i64> {
    let mut v = vec![0i64; n_states];
    for r in &t.rules {
        v[r.src] -= r.mult as i64;
        v[r.dst] += r.mult as i64;
    }
    v
}

/// Range policy for rate values: finite nonnegative passes, tiny negative
/// integrator wobble clamps to zero, anything else is an error.
#[inline]
pub fn check_rate(v: f64, transition: &str) -> Result<f64, NumericError> {
    if v >= 0.0 {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericError::NonFiniteRate { transition: transition.to_string() })
        }
    } else if v >= -NEG_RATE_TOL {
        Ok(0.0)
    } else if v.is_nan() {
        Err(NumericError::NonFiniteRate { transition: transition.to_string() })
    } else {
        Err(NumericError::NegativeRate { transition: transition.to_string(), value: v })
    }
}

/// Range policy for rates evaluated at integer counting states. A count
/// vector can sit just past a capacity boundary whenever the capacity
/// fraction times N is not an integer, making guard expressions legitimately
/// negative there (or NaN through a fractional power of a negative guard);
/// the transition is disabled at such states rather than rejected. A positive
/// infinity still indicates a sick model (division by an empty density) and
/// stays fatal.
pub fn lattice_rate(v: f64, transition: &str) -> Result<f64, NumericError> {
    if v > 0.0 {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericError::NonFiniteRate { transition: transition.to_string() })
        }
    } else {
        Ok(0.0)
    }
}

/// Evaluates one transition's limit rate at densities `x` under the model's
/// parameters, applying the range policy.
pub fn eval_rate(m: &PopulationModel, t: &Transition, x: &[f64]) -> Result<f64, NumericError> {
    let v = t
        .rate
        .eval(x, &m.param_fn())
        .map_err(|e| NumericError::NonFiniteRate { transition: format!("{} ({e})", t.name) })?;
    check_rate(v, &t.name)
}

/// Exact CTMC of the whole counted population, for instances small enough to
/// enumerate. States are counting vectors in lexicographic order.
#[derive(Debug, Clone)]
pub struct CollectiveChain {
    pub states: Vec<Vec<u32>>,
    pub gen: SparseGenerator,
}

impl CollectiveChain {
    pub fn state_index(&self, counts: &[u32]) -> Option<usize> {
        self.states.binary_search_by(|s| s.as_slice().cmp(counts)).ok()
    }
}

pub const DEFAULT_STATE_CAP: u64 = 200_000;

/// Builds the generator of the collective chain at population `n_pop`.
/// Off-diagonal entries aggregate every transition leading to the same target
/// vector; rates are the scaled limit rates `N * f(X/N)`.
pub fn build_collective_generator(
    m: &PopulationModel,
    n_pop: u64,
    cap: Option<u64>,
) -> Result<CollectiveChain, ModelError> {
    let n = m.n_states();
    let cap = cap.unwrap_or(DEFAULT_STATE_CAP);
    let size = count_states(n_pop, n);
    if size > cap as u128 {
        return Err(ModelError::StateSpaceTooLarge { size, cap });
    }

    let mut states: Vec<Vec<u32>> = Vec::with_capacity(size as usize);
    enumerate_counts(n_pop as u32, n, &mut vec![0u32; n], 0, &mut states);
    states.sort();
    let index: HashMap<&[u32], usize> =
        states.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();

    let updates: Vec<Vec<i64>> = m.transitions.iter().map(|t| update_vector(t, n)).collect();
    // Total outflow per source state; a transition is enabled only when every
    // source holds enough agents.
    let outflow: Vec<Vec<(usize, u32)>> = m
        .transitions
        .iter()
        .map(|t| {
            let mut by_src: HashMap<usize, u32> = HashMap::new();
            for r in &t.rules {
                *by_src.entry(r.src).or_insert(0) += r.mult;
            }
            let mut v: Vec<(usize, u32)> = by_src.into_iter().collect();
            v.sort();
            v
        })
        .collect();

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); states.len()];
    let mut x = vec![0.0f64; n];
    let mut target = vec![0u32; n];
    for (si, counts) in states.iter().enumerate() {
        for i in 0..n {
            x[i] = counts[i] as f64 / n_pop as f64;
        }
        for (ti, t) in m.transitions.iter().enumerate() {
            if outflow[ti].iter().any(|&(s, need)| counts[s] < need) {
                continue;
            }
            let raw = t
                .rate
                .eval(&x, &m.param_fn())
                .map_err(|e| ModelError::Invalid { msg: e.to_string() })?;
            let rate = n_pop as f64
                * lattice_rate(raw, &t.name).map_err(|e| ModelError::Invalid { msg: e.to_string() })?;
            if rate <= 0.0 {
                continue;
            }
            for i in 0..n {
                target[i] = (counts[i] as i64 + updates[ti][i]) as u32;
            }
            let tj = index[target.as_slice()];
            if tj == si {
                continue;
            }
            match rows[si].iter_mut().find(|(j, _)| *j == tj) {
                Some((_, r)) => *r += rate,
                None => rows[si].push((tj, rate)),
            }
        }
        rows[si].sort_by_key(|&(j, _)| j);
    }
    let diag: Vec<f64> = rows.iter().map(|r| -r.iter().map(|&(_, v)| v).sum::<f64>()).collect();
    Ok(CollectiveChain { states, gen: SparseGenerator { dim: rows.len(), rows, diag } })
}

fn count_states(n_pop: u64, n_states: usize) -> u128 {
    // C(n_pop + n_states - 1, n_states - 1)
    let mut acc: u128 = 1;
    let k = (n_states - 1) as u128;
    for i in 1..=k {
        acc = acc.saturating_mul(n_pop as u128 + i) / i;
        if acc > u64::MAX as u128 {
            return acc;
        }
    }
    acc
}

fn enumerate_counts(left: u32, n: usize, cur: &mut Vec<u32>, pos: usize, out: &mut Vec<Vec<u32>>) {
    if pos == n - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for c in 0..=left {
        cur[pos] = c;
        enumerate_counts(left - c, n, cur, pos + 1, out);
    }
}

/// Sparse rate matrix with explicit diagonal. Rows sum to zero by
/// construction; off-diagonals are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGenerator {
    pub dim: usize,
    /// Off-diagonal entries per row, sorted by column.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub diag: Vec<f64>,
}

impl SparseGenerator {
    /// Validates and converts a dense rate matrix. Rejects negative
    /// off-diagonals and rows that do not sum to zero within tolerance.
    pub fn from_dense(q: &[Vec<f64>]) -> Result<Self, GeneratorError> {
        let dim = q.len();
        let mut rows = Vec::with_capacity(dim);
        let mut diag = Vec::with_capacity(dim);
        for (i, row) in q.iter().enumerate() {
            if row.len() != dim {
                return Err(GeneratorError::NotSquare);
            }
            let mut entries = Vec::new();
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                sum += v;
                if j == i {
                    continue;
                }
                if v < -NEG_RATE_TOL {
                    return Err(GeneratorError::NegativeOffDiagonal { row: i, col: j, value: v });
                }
                if v > 0.0 {
                    entries.push((j, v));
                }
            }
            if sum.abs() > 1e-9 * row.iter().map(|v| v.abs()).sum::<f64>().max(1.0) {
                return Err(GeneratorError::RowSum { row: i, sum });
            }
            diag.push(q[i][i]);
            rows.push(entries);
        }
        Ok(SparseGenerator { dim, rows, diag })
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, &d| m.max(-d))
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GeneratorError {
    #[error("matrix is not square")]
    NotSquare,
    #[error("negative off-diagonal at ({row},{col}): {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSum { row: usize, sum: f64 },
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("{line}:{col}: unknown identifier `{name}`")]
    UnknownIdentifier { name: String, line: u32, col: u32 },
    #[error("duplicate {kind} name `{name}`")]
    DuplicateName { kind: &'static str, name: String },
    #[error("initial densities sum to {sum:?}, expected 1 within 1e-12")]
    InitDensitySum { sum: f64 },
    #[error("collective state space has {size} states, cap is {cap}")]
    StateSpaceTooLarge { size: u128, cap: u64 },
    #[error("transition `{transition}` moves more than one agent per rule; tagged-agent analyses need unit multiplicities")]
    MultiplicityUnsupported { transition: String },
    #[error("{msg}")]
    Invalid { msg: String },
}

// ---------------------------------------------------------------------------
// DSL lexer and parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Arrow,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Semi,
    Eq,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: u32,
    col: u32,
}

const RESERVED: &[&str] = &[
    "model", "states", "param", "def", "transition", "rule", "rate", "percap", "init", "label",
    "reward", "state", "trans", "pow", "min", "max", "true", "false",
];

fn lex(text: &str) -> Result<Vec<Token>, ModelError> {
    let mut toks = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = text.chars().peekable();
    macro_rules! bump {
        () => {{
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        }};
    }
    while let Some(&c) = chars.peek() {
        let (tl, tc) = (line, col);
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '{' => {
                bump!();
                toks.push(Token { tok: Tok::LBrace, line: tl, col: tc });
            }
            '}' => {
                bump!();
                toks.push(Token { tok: Tok::RBrace, line: tl, col: tc });
            }
            '(' => {
                bump!();
                toks.push(Token { tok: Tok::LParen, line: tl, col: tc });
            }
            ')' => {
                bump!();
                toks.push(Token { tok: Tok::RParen, line: tl, col: tc });
            }
            ',' => {
                bump!();
                toks.push(Token { tok: Tok::Comma, line: tl, col: tc });
            }
            ';' => {
                bump!();
                toks.push(Token { tok: Tok::Semi, line: tl, col: tc });
            }
            '=' => {
                bump!();
                toks.push(Token { tok: Tok::Eq, line: tl, col: tc });
            }
            '+' => {
                bump!();
                toks.push(Token { tok: Tok::Plus, line: tl, col: tc });
            }
            '*' => {
                bump!();
                toks.push(Token { tok: Tok::Star, line: tl, col: tc });
            }
            '/' => {
                bump!();
                toks.push(Token { tok: Tok::Slash, line: tl, col: tc });
            }
            '-' => {
                bump!();
                if chars.peek() == Some(&'>') {
                    bump!();
                    toks.push(Token { tok: Tok::Arrow, line: tl, col: tc });
                } else {
                    toks.push(Token { tok: Tok::Minus, line: tl, col: tc });
                }
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() || c == '.' {
                        s.push(bump!());
                    } else {
                        break;
                    }
                }
                if matches!(chars.peek(), Some('e') | Some('E')) {
                    s.push(bump!());
                    if matches!(chars.peek(), Some('+') | Some('-')) {
                        s.push(bump!());
                    }
                    while let Some(&c) = chars.peek() {
                        if c.is_ascii_digit() {
                            s.push(bump!());
                        } else {
                            break;
                        }
                    }
                }
                let v: f64 = s.parse().map_err(|_| ModelError::Syntax {
                    line: tl,
                    col: tc,
                    msg: format!("malformed number `{s}`"),
                })?;
                toks.push(Token { tok: Tok::Num(v), line: tl, col: tc });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        s.push(bump!());
                    } else {
                        break;
                    }
                }
                toks.push(Token { tok: Tok::Ident(s), line: tl, col: tc });
            }
            other => {
                return Err(ModelError::Syntax {
                    line: tl,
                    col: tc,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    toks.push(Token { tok: Tok::Eof, line, col });
    Ok(toks)
}

struct RawReward {
    name: String,
    state_rewards: Vec<(usize, f64)>,
    trans_rewards: Vec<(String, f64, u32, u32)>,
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
    name: Option<String>,
    agent: Option<AgentStateSpace>,
    params: Vec<(String, f64)>,
    defs: HashMap<String, RateExpr>,
    transitions: Vec<Transition>,
    init: Vec<f64>,
    labels: Vec<(String, Vec<usize>)>,
    rewards: Vec<RawReward>,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ModelError> {
        Ok(Parser {
            toks: lex(text)?,
            i: 0,
            name: None,
            agent: None,
            params: Vec::new(),
            defs: HashMap::new(),
            transitions: Vec::new(),
            init: Vec::new(),
            labels: Vec::new(),
            rewards: Vec::new(),
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.i]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, tok: &Token, msg: impl Into<String>) -> Result<T, ModelError> {
        Err(ModelError::Syntax { line: tok.line, col: tok.col, msg: msg.into() })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ModelError> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else {
            self.err(&t, format!("expected {what}, found {:?}", t.tok))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Token), ModelError> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            _ => self.err(&t, format!("expected {what}, found {:?}", t.tok)),
        }
    }

    fn fresh_name(&mut self, what: &str) -> Result<(String, Token), ModelError> {
        let (s, t) = self.ident(what)?;
        if RESERVED.contains(&s.as_str()) {
            return self.err(&t, format!("`{s}` is a reserved word"));
        }
        Ok((s, t))
    }

    fn number(&mut self, what: &str) -> Result<f64, ModelError> {
        let neg = if self.peek().tok == Tok::Minus {
            self.next();
            true
        } else {
            false
        };
        let t = self.next();
        match t.tok {
            Tok::Num(v) => Ok(if neg { -v } else { v }),
            _ => self.err(&t, format!("expected {what}, found {:?}", t.tok)),
        }
    }

    fn agent(&self) -> Result<&AgentStateSpace, ModelError> {
        self.agent.as_ref().ok_or_else(|| ModelError::Invalid {
            msg: "`states` must be declared before this item".into(),
        })
    }

    fn parse(mut self) -> Result<PopulationModel, ModelError> {
        loop {
            let t = self.next();
            match &t.tok {
                Tok::Eof => break,
                Tok::Ident(kw) => match kw.as_str() {
                    "model" => {
                        if self.name.is_some() {
                            return self.err(&t, "duplicate `model` declaration");
                        }
                        let (name, _) = self.fresh_name("model name")?;
                        self.name = Some(name);
                    }
                    "states" => {
                        if self.agent.is_some() {
                            return self.err(&t, "duplicate `states` declaration");
                        }
                        let mut names = vec![self.fresh_name("state name")?.0];
                        while self.peek().tok == Tok::Comma {
                            self.next();
                            names.push(self.fresh_name("state name")?.0);
                        }
                        let space = AgentStateSpace::new(names)?;
                        self.init = vec![0.0; space.len()];
                        self.agent = Some(space);
                    }
                    "param" => {
                        let (name, _) = self.fresh_name("parameter name")?;
                        self.expect(Tok::Eq, "`=`")?;
                        let v = self.number("parameter value")?;
                        if self.params.iter().any(|(n, _)| *n == name) || self.defs.contains_key(&name) {
                            return Err(ModelError::DuplicateName { kind: "parameter", name });
                        }
                        self.params.push((name, v));
                    }
                    "def" => {
                        let (name, _) = self.fresh_name("definition name")?;
                        self.expect(Tok::Eq, "`=`")?;
                        let e = self.parse_expr()?;
                        if self.defs.contains_key(&name) || self.params.iter().any(|(n, _)| *n == name) {
                            return Err(ModelError::DuplicateName { kind: "definition", name });
                        }
                        self.defs.insert(name, e);
                    }
                    "transition" => self.parse_transition()?,
                    "init" => {
                        let (name, tok) = self.ident("density variable")?;
                        let state = match name.strip_prefix("x_") {
                            Some(s) => self.agent()?.index_of(s),
                            None => None,
                        };
                        let Some(state) = state else {
                            return Err(ModelError::UnknownIdentifier {
                                name,
                                line: tok.line,
                                col: tok.col,
                            });
                        };
                        self.expect(Tok::Eq, "`=`")?;
                        let v = self.number("initial density")?;
                        if v < 0.0 {
                            return Err(ModelError::Invalid {
                                msg: format!("negative initial density for `{name}`"),
                            });
                        }
                        self.init[state] = v;
                    }
                    "label" => {
                        let (name, _) = self.fresh_name("label name")?;
                        self.expect(Tok::Eq, "`=`")?;
                        self.expect(Tok::LBrace, "`{`")?;
                        let mut states = Vec::new();
                        if self.peek().tok != Tok::RBrace {
                            loop {
                                let (s, tok) = self.ident("state name")?;
                                let idx = self.agent()?.index_of(&s).ok_or(
                                    ModelError::UnknownIdentifier {
                                        name: s,
                                        line: tok.line,
                                        col: tok.col,
                                    },
                                )?;
                                if !states.contains(&idx) {
                                    states.push(idx);
                                }
                                if self.peek().tok == Tok::Comma {
                                    self.next();
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect(Tok::RBrace, "`}`")?;
                        if self.labels.iter().any(|(n, _)| *n == name) {
                            return Err(ModelError::DuplicateName { kind: "label", name });
                        }
                        states.sort();
                        self.labels.push((name, states));
                    }
                    "reward" => self.parse_reward()?,
                    other => {
                        return self.err(&t, format!("unknown declaration `{other}`"));
                    }
                },
                _ => return self.err(&t, format!("expected a declaration, found {:?}", t.tok)),
            }
        }
        self.finish()
    }

    fn parse_transition(&mut self) -> Result<(), ModelError> {
        let (name, _) = self.fresh_name("transition name")?;
        self.expect(Tok::LBrace, "`{`")?;
        let mut rules = Vec::new();
        let mut rate: Option<RateExpr> = None;
        let mut percap: Option<RateExpr> = None;
        loop {
            let t = self.next();
            match &t.tok {
                Tok::RBrace => break,
                Tok::Semi => continue,
                Tok::Ident(kw) => match kw.as_str() {
                    "rule" => {
                        let (src, stok) = self.ident("source state")?;
                        let src_idx = self.agent()?.index_of(&src).ok_or(
                            ModelError::UnknownIdentifier { name: src, line: stok.line, col: stok.col },
                        )?;
                        self.expect(Tok::Arrow, "`->`")?;
                        let (dst, dtok) = self.ident("target state")?;
                        let dst_idx = self.agent()?.index_of(&dst).ok_or(
                            ModelError::UnknownIdentifier { name: dst, line: dtok.line, col: dtok.col },
                        )?;
                        let mult = if self.peek().tok == Tok::Star {
                            self.next();
                            let v = self.number("multiplicity")?;
                            if v < 1.0 || v.fract() != 0.0 {
                                return self.err(&t, format!("multiplicity must be a positive integer, got {v}"));
                            }
                            v as u32
                        } else {
                            1
                        };
                        if src_idx == dst_idx {
                            return Err(ModelError::Invalid {
                                msg: format!("transition `{name}`: rule source equals target"),
                            });
                        }
                        rules.push(Rule { src: src_idx, dst: dst_idx, mult });
                    }
                    "rate" => {
                        if rate.is_some() {
                            return self.err(&t, format!("transition `{name}` has multiple rates"));
                        }
                        rate = Some(self.parse_expr()?);
                    }
                    "percap" => {
                        if percap.is_some() {
                            return self.err(&t, format!("transition `{name}` has multiple percap forms"));
                        }
                        percap = Some(self.parse_expr()?);
                    }
                    other => return self.err(&t, format!("unknown transition item `{other}`")),
                },
                _ => return self.err(&t, format!("expected `rule`, `rate` or `percap`, found {:?}", t.tok)),
            }
        }
        if rules.is_empty() {
            return Err(ModelError::Invalid { msg: format!("transition `{name}` has no rules") });
        }
        let Some(rate) = rate else {
            return Err(ModelError::Invalid { msg: format!("transition `{name}` has no rate") });
        };
        if self.transitions.iter().any(|t| t.name == name) {
            return Err(ModelError::DuplicateName { kind: "transition", name });
        }
        self.transitions.push(Transition { name, rules, rate, percap });
        Ok(())
    }

    fn parse_reward(&mut self) -> Result<(), ModelError> {
        let (name, _) = self.fresh_name("reward name")?;
        self.expect(Tok::LBrace, "`{`")?;
        let mut state_rewards: Vec<(usize, f64)> = Vec::new();
        let mut trans_rewards: Vec<(String, f64, u32, u32)> = Vec::new();
        loop {
            let t = self.next();
            match &t.tok {
                Tok::RBrace => break,
                Tok::Semi => continue,
                Tok::Ident(kw) => match kw.as_str() {
                    "state" => {
                        let (s, stok) = self.ident("state name")?;
                        let idx = self.agent()?.index_of(&s).ok_or(ModelError::UnknownIdentifier {
                            name: s.clone(),
                            line: stok.line,
                            col: stok.col,
                        })?;
                        self.expect(Tok::Eq, "`=`")?;
                        let v = self.number("reward value")?;
                        if v < 0.0 {
                            return Err(ModelError::Invalid {
                                msg: format!("reward `{name}`: negative state reward for `{s}`"),
                            });
                        }
                        if state_rewards.iter().any(|(i, _)| *i == idx) {
                            return Err(ModelError::DuplicateName { kind: "state reward entry", name: s });
                        }
                        state_rewards.push((idx, v));
                    }
                    "trans" => {
                        let (tr, ttok) = self.ident("transition name")?;
                        self.expect(Tok::Eq, "`=`")?;
                        let v = self.number("reward value")?;
                        if v < 0.0 {
                            return Err(ModelError::Invalid {
                                msg: format!("reward `{name}`: negative transition reward for `{tr}`"),
                            });
                        }
                        if trans_rewards.iter().any(|(n, ..)| *n == tr) {
                            return Err(ModelError::DuplicateName { kind: "transition reward entry", name: tr });
                        }
                        trans_rewards.push((tr, v, ttok.line, ttok.col));
                    }
                    other => return self.err(&t, format!("unknown reward item `{other}`")),
                },
                _ => return self.err(&t, format!("expected `state` or `trans`, found {:?}", t.tok)),
            }
        }
        if self.rewards.iter().any(|r| r.name == name) {
            return Err(ModelError::DuplicateName { kind: "reward", name });
        }
        self.rewards.push(RawReward { name, state_rewards, trans_rewards });
        Ok(())
    }

    // Precedence climbing: sums over products over unary minus over atoms.
    fn parse_expr(&mut self) -> Result<RateExpr, ModelError> {
        let mut lhs = self.parse_term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.parse_term()?;
            lhs = RateExpr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<RateExpr, ModelError> {
        let mut lhs = self.parse_factor()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.parse_factor()?;
            lhs = RateExpr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> Result<RateExpr, ModelError> {
        if self.peek().tok == Tok::Minus {
            self.next();
            let inner = self.parse_factor()?;
            return Ok(match inner {
                RateExpr::Lit(v) => RateExpr::Lit(-v),
                e => RateExpr::Neg(Box::new(e)),
            });
        }
        let t = self.next();
        match &t.tok {
            Tok::Num(v) => Ok(RateExpr::Lit(*v)),
            Tok::LParen => {
                let e = self.parse_expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(f) = match name.as_str() {
                    "pow" => Some(Func::Pow),
                    "min" => Some(Func::Min),
                    "max" => Some(Func::Max),
                    _ => None,
                } {
                    self.expect(Tok::LParen, "`(`")?;
                    let a = self.parse_expr()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let b = self.parse_expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(RateExpr::Call(f, Box::new(a), Box::new(b)));
                }
                if let Some(state) = name.strip_prefix("x_") {
                    if let Some(idx) = self.agent()?.index_of(state) {
                        return Ok(RateExpr::Density(idx));
                    }
                }
                if self.params.iter().any(|(n, _)| n == name) {
                    return Ok(RateExpr::Param(name.clone()));
                }
                if let Some(def) = self.defs.get(name) {
                    return Ok(def.clone());
                }
                Err(ModelError::UnknownIdentifier { name: name.clone(), line: t.line, col: t.col })
            }
            _ => self.err(&t, format!("expected an expression, found {:?}", t.tok)),
        }
    }

    fn finish(self) -> Result<PopulationModel, ModelError> {
        let agent = self.agent.ok_or(ModelError::Invalid { msg: "missing `states` declaration".into() })?;
        let name = self.name.unwrap_or_else(|| "unnamed".into());
        let sum: f64 = self.init.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(ModelError::InitDensitySum { sum });
        }
        let mut rewards = Vec::with_capacity(self.rewards.len());
        for raw in self.rewards {
            let mut trans_rewards = Vec::with_capacity(raw.trans_rewards.len());
            for (tname, v, line, col) in raw.trans_rewards {
                let idx = self
                    .transitions
                    .iter()
                    .position(|t| t.name == tname)
                    .ok_or(ModelError::UnknownIdentifier { name: tname, line, col })?;
                trans_rewards.push((idx, v));
            }
            rewards.push(RewardDecl { name: raw.name, state_rewards: raw.state_rewards, trans_rewards });
        }
        Ok(PopulationModel {
            name,
            agent,
            params: self.params,
            transitions: self.transitions,
            init_density: self.init,
            labels: self.labels,
            rewards,
        })
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagCode {
    NegativeRate,
    NonFiniteRate,
    MissingPerCapitaForm,
    MultiplicityUnsupportedForAgent,
    PercapIgnoredMultiRule,
    FluidSolveFailed,
}

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagCode,
    pub message: String,
}

pub struct ValidateOpts {
    /// Horizon of the fluid trajectory along which rates are sampled.
    pub horizon: f64,
    /// Number of quasi-random sample times.
    pub samples: usize,
}

impl Default for ValidateOpts {
    fn default() -> Self {
        ValidateOpts { horizon: 1000.0, samples: 1000 }
    }
}

/// Structural and numerical diagnostics.
///
/// Rate signs are checked along the model's own fluid trajectory rather than
/// over the whole simplex: capacity-style models (guard probabilities going
/// negative once a density bound is exceeded) are perfectly well-formed on
/// their reachable region while violating positivity on most of the simplex.
pub fn validate(m: &PopulationModel, opts: &ValidateOpts) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let names = m.agent.names();

    for t in &m.transitions {
        for r in &t.rules {
            if r.mult > 1 {
                out.push(Diagnostic {
                    severity: Severity::Warning,
                    code: DiagCode::MultiplicityUnsupportedForAgent,
                    message: format!(
                        "transition `{}`: rule {} -> {} has multiplicity {}; tagged-agent analyses are unsupported for this model",
                        t.name, names[r.src], names[r.dst], r.mult
                    ),
                });
            }
        }
        if t.percap.is_some() && t.rules.len() > 1 {
            out.push(Diagnostic {
                severity: Severity::Warning,
                code: DiagCode::PercapIgnoredMultiRule,
                message: format!(
                    "transition `{}`: percap form is ignored because the transition has several rules",
                    t.name
                ),
            });
        }
        if t.percap.is_none() {
            for r in &t.rules {
                if !t.rate.has_density_factor(r.src) {
                    out.push(Diagnostic {
                        severity: Severity::Warning,
                        code: DiagCode::MissingPerCapitaForm,
                        message: format!(
                            "transition `{}`: rate has no `x_{}` factor and no percap form; per-agent shares fall back to rate/density with an epsilon guard",
                            t.name, names[r.src]
                        ),
                    });
                }
            }
        }
    }

    let traj = match crate::fluid::solve_fluid(m, opts.horizon, None) {
        Ok(t) => t,
        Err(e) => {
            out.push(Diagnostic {
                severity: Severity::Error,
                code: DiagCode::FluidSolveFailed,
                message: format!("fluid trajectory for rate sampling failed: {e}"),
            });
            return out;
        }
    };
    let alpha = 2f64.sqrt() - 1.0;
    let mut x = vec![0.0; m.n_states()];
    let mut flagged: Vec<bool> = vec![false; m.transitions.len()];
    for k in 0..opts.samples {
        let t = ((k as f64 + 1.0) * alpha).fract() * opts.horizon;
        traj.eval(t, &mut x);
        for (ti, tr) in m.transitions.iter().enumerate() {
            if flagged[ti] {
                continue;
            }
            match tr.rate.eval(&x, &m.param_fn()) {
                Ok(v) if v < -NEG_RATE_TOL => {
                    flagged[ti] = true;
                    out.push(Diagnostic {
                        severity: Severity::Error,
                        code: DiagCode::NegativeRate,
                        message: format!(
                            "transition `{}`: rate is {v:.6e} at t={t:.6} on the fluid trajectory",
                            tr.name
                        ),
                    });
                }
                Ok(v) if !v.is_finite() => {
                    flagged[ti] = true;
                    out.push(Diagnostic {
                        severity: Severity::Error,
                        code: DiagCode::NonFiniteRate,
                        message: format!(
                            "transition `{}`: rate is non-finite at t={t:.6} on the fluid trajectory",
                            tr.name
                        ),
                    });
                }
                Ok(_) => {}
                Err(e) => {
                    flagged[ti] = true;
                    out.push(Diagnostic {
                        severity: Severity::Error,
                        code: DiagCode::NonFiniteRate,
                        message: format!("transition `{}`: {e}", tr.name),
                    });
                }
            }
        }
    }
    out
}

/// Deterministic quasi-random points on the unit simplex: a Weyl sequence
/// mapped through exponential spacings.
pub fn quasi_random_simplex(n: usize, count: usize) -> Vec<Vec<f64>> {
    let mut alphas = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while alphas.len() < n {
        if (2..candidate).all(|d| d * d > candidate || !candidate.is_multiple_of(d)) {
            alphas.push((candidate as f64).sqrt().fract());
        }
        candidate += 1;
    }
    (0..count)
        .map(|k| {
            let mut e: Vec<f64> = (0..n)
                .map(|i| {
                    let u = ((k as f64 + 1.0) * alphas[i]).fract();
                    -(1.0 - u).ln()
                })
                .collect();
            let s: f64 = e.iter().sum();
            for v in &mut e {
                *v /= s;
            }
            e
        })
        .collect()
}
