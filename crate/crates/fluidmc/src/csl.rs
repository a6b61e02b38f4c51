//! Time-bounded CSL checking for the tagged agent.
//!
//! Formulae are checked against the time-inhomogeneous agent chain whose
//! generator is driven by the fluid trajectory of the surrounding population.
//! Two deliberately independent code paths exist: [`transient`] co-integrates
//! the population densities with the probability rows, while the reachability
//! machinery ([`reach_signal`], [`check_path_probability`]) integrates
//! probabilities against a previously solved [`FluidTrajectory`]. Their
//! agreement is a regression invariant, not an implementation accident.

use std::fmt;

use crate::fluid::{
    agent_generator, project_simplex, solve_fluid, AgentGenerator, Drift, FluidTrajectory,
};
use crate::model::{ModelError, PopulationModel};
use crate::ode::{integrate, DenseSolution, NumericError, OdeOptions, OdeSystem};

/// Time resolution of threshold-crossing bisection.
pub const CROSSING_RESOLUTION: f64 = 1e-9;
/// Probabilities closer than this to a threshold are flagged indeterminate
/// rather than silently resolved to a truth value.
pub const TANGENT_MARGIN: f64 = 1e-7;

#[derive(Debug, Clone, thiserror::Error)]
pub enum CheckError {
    #[error("formula syntax: {0}")]
    Syntax(String),
    #[error("nested probability or reward operators are not supported")]
    NestedFormulaUnsupported,
    #[error("unknown label or state `{0}`")]
    UnknownAtom(String),
    #[error("unknown reward structure `{0}`")]
    UnknownReward(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

// ---------------------------------------------------------------------------
// Formula AST

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Cmp::Lt => value < threshold,
            Cmp::Le => value <= threshold,
            Cmp::Gt => value > threshold,
            Cmp::Ge => value >= threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        }
    }
}

/// Query mode of an operator: a threshold decision or a bare value (`=?`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Query {
    Value,
    Threshold(Cmp, f64),
}

/// Outcome of checking one formula at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckOutcome {
    True,
    False,
    /// `=?` queries return the computed quantity itself.
    Value(f64),
    /// Threshold queries whose value sits within [`TANGENT_MARGIN`] of the
    /// threshold; carries the value so callers can report it.
    Indeterminate(f64),
}

impl Query {
    /// Resolves a computed value under this query, applying the shared
    /// indeterminacy margin for threshold comparisons.
    pub fn decide(self, value: f64) -> CheckOutcome {
        match self {
            Query::Value => CheckOutcome::Value(value),
            Query::Threshold(cmp, r) => {
                if (value - r).abs() < TANGENT_MARGIN {
                    CheckOutcome::Indeterminate(value)
                } else if cmp.holds(value, r) {
                    CheckOutcome::True
                } else {
                    CheckOutcome::False
                }
            }
        }
    }
}

/// Boolean state formula over atomic propositions. Atoms resolve against
/// label names first, then against agent state names.
#[derive(Debug, Clone, PartialEq)]
pub enum StateExpr {
    True,
    Atom(String),
    Not(Box<StateExpr>),
    And(Box<StateExpr>, Box<StateExpr>),
}

impl StateExpr {
    /// Satisfaction mask over the agent state space.
    pub fn sat(&self, m: &PopulationModel) -> Result<Vec<bool>, CheckError> {
        let n = m.n_states();
        Ok(match self {
            StateExpr::True => vec![true; n],
            StateExpr::Atom(name) => {
                let mut v = vec![false; n];
                if let Some(states) = m.label_states(name) {
                    for &s in states {
                        v[s] = true;
                    }
                } else if let Some(i) = m.agent.index_of(name) {
                    v[i] = true;
                } else {
                    return Err(CheckError::UnknownAtom(name.clone()));
                }
                v
            }
            StateExpr::Not(e) => {
                let mut v = e.sat(m)?;
                for b in &mut v {
                    *b = !*b;
                }
                v
            }
            StateExpr::And(a, b) => {
                let mut va = a.sat(m)?;
                let vb = b.sat(m)?;
                for (x, y) in va.iter_mut().zip(&vb) {
                    *x = *x && *y;
                }
                va
            }
        })
    }
}

/// Time-bounded path formula. State subformulae are boolean combinations of
/// atoms by construction, so temporal operators cannot nest.
#[derive(Debug, Clone, PartialEq)]
pub enum PathFormula {
    /// First jump lands in `goal` during `[t1, t2]` (relative to evaluation
    /// time).
    Next { t1: f64, t2: f64, goal: StateExpr },
    /// `lhs` holds until `rhs` is reached at some time in `[t1, t2]`.
    Until { t1: f64, t2: f64, lhs: StateExpr, rhs: StateExpr },
}

/// Reward query kinds supported by the reward operator.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `C<=T`: reward accumulated over `[0, T]`.
    Cumulative { t: f64 },
    /// `I=T`: state-reward rate at the time instant `T`.
    Instantaneous { t: f64 },
    /// `S`: long-run average reward rate.
    Steady,
    /// `F<=T goal`: reward accumulated until `goal` is hit, capped at `T`.
    Reach { t: f64, goal: StateExpr },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Prob { query: Query, path: PathFormula },
    Reward { structure: String, query: Query, kind: RewardKind },
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Value => write!(f, "=?"),
            Query::Threshold(c, v) => write!(f, "{}{}", c.symbol(), v),
        }
    }
}

impl fmt::Display for StateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateExpr::True => write!(f, "true"),
            StateExpr::Atom(a) => write!(f, "{a}"),
            StateExpr::Not(e) => match **e {
                StateExpr::And(..) => write!(f, "!({e})"),
                _ => write!(f, "!{e}"),
            },
            StateExpr::And(a, b) => write!(f, "{a} & {b}"),
        }
    }
}

impl fmt::Display for PathFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathFormula::Next { t1, t2, goal } => write!(f, "X[{t1},{t2}] {goal}"),
            PathFormula::Until { t1, t2, lhs, rhs } => write!(f, "{lhs} U[{t1},{t2}] {rhs}"),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardKind::Cumulative { t } => write!(f, "C<={t}"),
            RewardKind::Instantaneous { t } => write!(f, "I={t}"),
            RewardKind::Steady => write!(f, "S"),
            RewardKind::Reach { t, goal } => write!(f, "F<={t} {goal}"),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Prob { query, path } => write!(f, "P{query} [ {path} ]"),
            Formula::Reward { structure, query, kind } => {
                write!(f, "R{{{structure}}}{query} [ {kind} ]")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Formula parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Amp,
    Bang,
    /// `=?`
    Query,
    Le,
    Lt,
    Ge,
    Gt,
    Eq,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Num(v) => write!(f, "`{v}`"),
            Tok::LBracket => write!(f, "`[`"),
            Tok::RBracket => write!(f, "`]`"),
            Tok::LBrace => write!(f, "`{{`"),
            Tok::RBrace => write!(f, "`}}`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Amp => write!(f, "`&`"),
            Tok::Bang => write!(f, "`!`"),
            Tok::Query => write!(f, "`=?`"),
            Tok::Le => write!(f, "`<=`"),
            Tok::Lt => write!(f, "`<`"),
            Tok::Ge => write!(f, "`>=`"),
            Tok::Gt => write!(f, "`>`"),
            Tok::Eq => write!(f, "`=`"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<Tok>, CheckError> {
    let b = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'[' => {
                toks.push(Tok::LBracket);
                i += 1;
            }
            b']' => {
                toks.push(Tok::RBracket);
                i += 1;
            }
            b'{' => {
                toks.push(Tok::LBrace);
                i += 1;
            }
            b'}' => {
                toks.push(Tok::RBrace);
                i += 1;
            }
            b'(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            b')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            b',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            b'&' => {
                toks.push(Tok::Amp);
                i += 1;
            }
            b'!' => {
                toks.push(Tok::Bang);
                i += 1;
            }
            b'=' => {
                if b.get(i + 1) == Some(&b'?') {
                    toks.push(Tok::Query);
                    i += 2;
                } else {
                    toks.push(Tok::Eq);
                    i += 1;
                }
            }
            b'<' => {
                if b.get(i + 1) == Some(&b'=') {
                    toks.push(Tok::Le);
                    i += 2;
                } else {
                    toks.push(Tok::Lt);
                    i += 1;
                }
            }
            b'>' => {
                if b.get(i + 1) == Some(&b'=') {
                    toks.push(Tok::Ge);
                    i += 2;
                } else {
                    toks.push(Tok::Gt);
                    i += 1;
                }
            }
            b'-' | b'0'..=b'9' | b'.' => {
                let start = i;
                if b[i] == b'-' {
                    i += 1;
                    if i >= b.len() || !(b[i].is_ascii_digit() || b[i] == b'.') {
                        return Err(CheckError::Syntax("stray `-`; expected a number".into()));
                    }
                }
                while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
                    i += 1;
                }
                if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                    i += 1;
                    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
                        i += 1;
                    }
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let s = &text[start..i];
                let v: f64 = s
                    .parse()
                    .map_err(|_| CheckError::Syntax(format!("malformed number `{s}`")))?;
                toks.push(Tok::Num(v));
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                let start = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                toks.push(Tok::Ident(text[start..i].to_string()));
            }
            _ => {
                return Err(CheckError::Syntax(format!(
                    "unexpected character `{}`",
                    text[i..].chars().next().unwrap()
                )))
            }
        }
    }
    Ok(toks)
}

struct FormulaParser {
    toks: Vec<Tok>,
    pos: usize,
}

impl FormulaParser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1)
    }

    fn next(&mut self) -> Result<Tok, CheckError> {
        let t = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| CheckError::Syntax("unexpected end of formula".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Tok) -> Result<(), CheckError> {
        let got = self.next()?;
        if got == want {
            Ok(())
        } else {
            Err(CheckError::Syntax(format!("expected {want}, found {got}")))
        }
    }

    fn number(&mut self) -> Result<f64, CheckError> {
        match self.next()? {
            Tok::Num(v) => Ok(v),
            t => Err(CheckError::Syntax(format!("expected a number, found {t}"))),
        }
    }

    fn formula(&mut self) -> Result<Formula, CheckError> {
        match self.next()? {
            Tok::Ident(id) if id == "P" => {
                let query = self.query()?;
                if let Query::Threshold(_, p) = query {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(CheckError::Syntax(format!(
                            "probability threshold {p} outside [0, 1]"
                        )));
                    }
                }
                self.expect(Tok::LBracket)?;
                let path = self.path()?;
                self.expect(Tok::RBracket)?;
                Ok(Formula::Prob { query, path })
            }
            Tok::Ident(id) if id == "R" => {
                self.expect(Tok::LBrace)?;
                let structure = match self.next()? {
                    Tok::Ident(name) => name,
                    t => {
                        return Err(CheckError::Syntax(format!(
                            "expected a reward structure name, found {t}"
                        )))
                    }
                };
                self.expect(Tok::RBrace)?;
                let query = self.query()?;
                if let Query::Threshold(_, r) = query {
                    if !(r >= 0.0 && r.is_finite()) {
                        return Err(CheckError::Syntax(format!(
                            "reward threshold {r} must be finite and nonnegative"
                        )));
                    }
                }
                self.expect(Tok::LBracket)?;
                let kind = self.reward_kind()?;
                self.expect(Tok::RBracket)?;
                Ok(Formula::Reward { structure, query, kind })
            }
            t => Err(CheckError::Syntax(format!(
                "formula must start with `P` or `R`, found {t}"
            ))),
        }
    }

    fn query(&mut self) -> Result<Query, CheckError> {
        let cmp = match self.next()? {
            Tok::Query => return Ok(Query::Value),
            Tok::Lt => Cmp::Lt,
            Tok::Le => Cmp::Le,
            Tok::Gt => Cmp::Gt,
            Tok::Ge => Cmp::Ge,
            t => {
                return Err(CheckError::Syntax(format!(
                    "expected `=?` or a comparison, found {t}"
                )))
            }
        };
        let v = self.number()?;
        if !v.is_finite() {
            return Err(CheckError::Syntax("threshold must be finite".into()));
        }
        Ok(Query::Threshold(cmp, v))
    }

    fn time_bounds(&mut self) -> Result<(f64, f64), CheckError> {
        self.expect(Tok::LBracket)?;
        let t1 = self.number()?;
        self.expect(Tok::Comma)?;
        let t2 = self.number()?;
        self.expect(Tok::RBracket)?;
        if !(t1.is_finite() && t2.is_finite() && 0.0 <= t1 && t1 <= t2) {
            return Err(CheckError::Syntax(format!(
                "time bounds [{t1},{t2}] must satisfy 0 <= t1 <= t2"
            )));
        }
        Ok((t1, t2))
    }

    fn path(&mut self) -> Result<PathFormula, CheckError> {
        // `X` opens a next operator only when followed by time bounds;
        // otherwise it is an ordinary atom inside an until.
        if matches!(self.peek(), Some(Tok::Ident(id)) if id == "X")
            && self.peek2() == Some(&Tok::LBracket)
        {
            self.pos += 1;
            let (t1, t2) = self.time_bounds()?;
            let goal = self.state_expr()?;
            return Ok(PathFormula::Next { t1, t2, goal });
        }
        let lhs = self.state_expr()?;
        match self.next()? {
            Tok::Ident(id) if id == "U" => {}
            t => {
                return Err(CheckError::Syntax(format!(
                    "expected the until operator `U[t1,t2]`, found {t}"
                )))
            }
        }
        let (t1, t2) = self.time_bounds()?;
        let rhs = self.state_expr()?;
        Ok(PathFormula::Until { t1, t2, lhs, rhs })
    }

    fn reward_kind(&mut self) -> Result<RewardKind, CheckError> {
        let horizon = |p: &mut Self| -> Result<f64, CheckError> {
            let t = p.number()?;
            if !(t.is_finite() && t >= 0.0) {
                return Err(CheckError::Syntax(format!(
                    "reward horizon {t} must be finite and nonnegative"
                )));
            }
            Ok(t)
        };
        match self.next()? {
            Tok::Ident(id) if id == "C" => {
                self.expect(Tok::Le)?;
                Ok(RewardKind::Cumulative { t: horizon(self)? })
            }
            Tok::Ident(id) if id == "I" => {
                self.expect(Tok::Eq)?;
                Ok(RewardKind::Instantaneous { t: horizon(self)? })
            }
            Tok::Ident(id) if id == "S" => Ok(RewardKind::Steady),
            Tok::Ident(id) if id == "F" => {
                self.expect(Tok::Le)?;
                let t = horizon(self)?;
                let goal = self.state_expr()?;
                Ok(RewardKind::Reach { t, goal })
            }
            t => Err(CheckError::Syntax(format!(
                "expected a reward query (`C<=T`, `I=T`, `S`, `F<=T goal`), found {t}"
            ))),
        }
    }

    fn state_expr(&mut self) -> Result<StateExpr, CheckError> {
        let mut e = self.state_unary()?;
        while self.peek() == Some(&Tok::Amp) {
            self.pos += 1;
            let rhs = self.state_unary()?;
            e = StateExpr::And(Box::new(e), Box::new(rhs));
        }
        Ok(e)
    }

    fn state_unary(&mut self) -> Result<StateExpr, CheckError> {
        match self.next()? {
            Tok::Bang => Ok(StateExpr::Not(Box::new(self.state_unary()?))),
            Tok::LParen => {
                let e = self.state_expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(id) => {
                // An operator opening inside a state position is a nesting
                // attempt, which the checker does not support.
                let opens_operator = matches!(
                    self.peek(),
                    Some(Tok::Query | Tok::Le | Tok::Lt | Tok::Ge | Tok::Gt | Tok::LBrace)
                );
                if (id == "P" || id == "R") && opens_operator {
                    return Err(CheckError::NestedFormulaUnsupported);
                }
                if id == "true" {
                    Ok(StateExpr::True)
                } else {
                    Ok(StateExpr::Atom(id))
                }
            }
            t => Err(CheckError::Syntax(format!(
                "expected a state formula, found {t}"
            ))),
        }
    }
}

/// Parses a formula and validates it against `m`: atoms must resolve, reward
/// structures must exist, and thresholds must lie in their admissible range.
pub fn parse_formula(text: &str, m: &PopulationModel) -> Result<Formula, CheckError> {
    let toks = lex(text)?;
    let mut p = FormulaParser { toks, pos: 0 };
    let f = p.formula()?;
    if p.pos != p.toks.len() {
        return Err(CheckError::Syntax(format!(
            "unexpected trailing input after formula: {}",
            p.toks[p.pos]
        )));
    }
    match &f {
        Formula::Prob { path, .. } => match path {
            PathFormula::Next { goal, .. } => {
                goal.sat(m)?;
            }
            PathFormula::Until { lhs, rhs, .. } => {
                lhs.sat(m)?;
                rhs.sat(m)?;
            }
        },
        Formula::Reward { structure, kind, .. } => {
            if m.reward_decl(structure).is_none() {
                return Err(CheckError::UnknownReward(structure.clone()));
            }
            if let RewardKind::Reach { goal, .. } = kind {
                goal.sat(m)?;
            }
        }
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Transient distributions (joint population + probability integration)

/// Probability rows of the tagged agent over `[0, T]`, co-integrated with the
/// population densities that drive its generator.
#[derive(Debug, Clone)]
pub struct TransientDistribution {
    names: Vec<String>,
    n: usize,
    rows: usize,
    sol: DenseSolution,
}

impl TransientDistribution {
    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn t_end(&self) -> f64 {
        self.sol.t_end()
    }

    /// Population densities at `t`.
    pub fn densities_at(&self, t: f64) -> Vec<f64> {
        let mut y = vec![0.0; self.sol.dim()];
        self.sol.eval(t, &mut y);
        y[..self.n].to_vec()
    }

    /// One probability row at `t`.
    pub fn row_at(&self, r: usize, t: f64) -> Vec<f64> {
        assert!(r < self.rows, "row index out of range");
        let mut y = vec![0.0; self.sol.dim()];
        self.sol.eval(t, &mut y);
        y[self.n * (1 + r)..self.n * (2 + r)].to_vec()
    }

    /// All probability rows at `t`.
    pub fn rows_at(&self, t: f64) -> Vec<Vec<f64>> {
        let mut y = vec![0.0; self.sol.dim()];
        self.sol.eval(t, &mut y);
        (0..self.rows)
            .map(|r| y[self.n * (1 + r)..self.n * (2 + r)].to_vec())
            .collect()
    }

    /// Final probability row, without interpolation.
    pub fn end_row(&self, r: usize) -> &[f64] {
        assert!(r < self.rows, "row index out of range");
        &self.sol.y_end()[self.n * (1 + r)..self.n * (2 + r)]
    }

    /// Accepted integrator step boundaries.
    pub fn mesh(&self) -> Vec<f64> {
        self.sol.mesh()
    }

    /// (accepted, rejected, rhs evaluations) of the joint integration.
    pub fn stats(&self) -> (usize, usize, usize) {
        (self.sol.n_accepted, self.sol.n_rejected, self.sol.n_rhs)
    }
}

struct JointSystem<'a> {
    drift: Drift,
    gen: &'a AgentGenerator,
    n: usize,
    rows: usize,
    row_mass: Vec<f64>,
    q: Vec<f64>,
    scratch: Vec<f64>,
}

impl OdeSystem for JointSystem<'_> {
    fn dim(&self) -> usize {
        self.n * (1 + self.rows)
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError> {
        let n = self.n;
        let (x, prows) = y.split_at(n);
        let (dx, dprows) = dydt.split_at_mut(n);
        self.drift.eval(x, dx)?;
        self.gen.eval_into(x, &mut self.q, &mut self.scratch)?;
        row_times_generator(prows, &self.q, n, self.rows, dprows);
        Ok(())
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> Result<bool, NumericError> {
        let n = self.n;
        let (x, prows) = y.split_at_mut(n);
        let mut changed = project_simplex(x)?;
        for r in 0..self.rows {
            changed |= normalize_row(&mut prows[r * n..(r + 1) * n], self.row_mass[r]);
        }
        Ok(changed)
    }
}

/// `dP_r = P_r Q` for each row, row-major `q`.
pub(crate) fn row_times_generator(rows: &[f64], q: &[f64], n: usize, n_rows: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..n_rows {
        let p = &rows[r * n..(r + 1) * n];
        let d = &mut out[r * n..(r + 1) * n];
        for (k, &pk) in p.iter().enumerate() {
            if pk != 0.0 {
                let qrow = &q[k * n..(k + 1) * n];
                for (dj, qj) in d.iter_mut().zip(qrow) {
                    *dj += pk * qj;
                }
            }
        }
    }
}

/// Clamps negative entries and rescales the row back to its initial mass.
/// Keeps probability rows stochastic against accumulated integration drift.
pub(crate) fn normalize_row(row: &mut [f64], target: f64) -> bool {
    let mut changed = false;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            changed = true;
        }
        sum += *v;
    }
    if target > 0.0 && sum > 0.0 && (sum - target).abs() > 1e-12 {
        let s = target / sum;
        for v in row.iter_mut() {
            *v *= s;
        }
        changed = true;
    }
    changed
}

/// Transient rows under an explicit generator (possibly absorbing-modified),
/// co-integrated with the fluid densities. Population starts from the model's
/// initial densities; probability rows start from `rows0`.
pub fn transient_rows(
    m: &PopulationModel,
    gen: &AgentGenerator,
    rows0: &[Vec<f64>],
    t: f64,
) -> Result<TransientDistribution, CheckError> {
    let n = m.n_states();
    assert_eq!(gen.dim(), n, "generator dimension mismatch");
    if !(t.is_finite() && t >= 0.0) {
        return Err(CheckError::Syntax(format!("horizon {t} must be finite and nonnegative")));
    }
    for row in rows0 {
        assert_eq!(row.len(), n, "probability row dimension mismatch");
        if row.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(CheckError::Syntax(
                "initial distribution entries must be finite and nonnegative".into(),
            ));
        }
    }
    let rows = rows0.len();
    let mut y0 = m.init_density.clone();
    for row in rows0 {
        y0.extend_from_slice(row);
    }
    let mut sys = JointSystem {
        drift: Drift::new(m),
        gen,
        n,
        rows,
        row_mass: rows0.iter().map(|r| r.iter().sum()).collect(),
        q: vec![0.0; n * n],
        scratch: gen.new_scratch(),
    };
    let sol = integrate(&mut sys, 0.0, t, &y0, &OdeOptions::default())?;
    Ok(TransientDistribution { names: m.agent.names().to_vec(), n, rows, sol })
}

/// Transient distribution of the tagged agent from the initial distribution
/// `p0` over `[0, t]`.
pub fn transient(
    m: &PopulationModel,
    p0: &[f64],
    t: f64,
) -> Result<TransientDistribution, CheckError> {
    let gen = agent_generator(m)?;
    let total: f64 = p0.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CheckError::Syntax(format!(
            "initial distribution sums to {total}, expected 1"
        )));
    }
    transient_rows(m, &gen, std::slice::from_ref(&p0.to_vec()), t)
}

/// Transient distribution started deterministically from state `s`.
pub fn transient_from_state(
    m: &PopulationModel,
    s: usize,
    t: f64,
) -> Result<TransientDistribution, CheckError> {
    assert!(s < m.n_states(), "state index out of range");
    transient(m, &delta_row(m.n_states(), s), t)
}

pub(crate) fn delta_row(n: usize, s: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

/// Generator with the rows of all masked states zeroed, so probability mass
/// entering them stays put.
pub fn absorbing_modification(gen: &AgentGenerator, absorb: &[bool]) -> AgentGenerator {
    let idx: Vec<usize> =
        absorb.iter().enumerate().filter_map(|(i, &a)| if a { Some(i) } else { None }).collect();
    gen.with_absorbing(&idx)
}

// ---------------------------------------------------------------------------
// Probability rows against a precomputed fluid trajectory

struct RowsOnTrajectory<'a> {
    gen: &'a AgentGenerator,
    traj: &'a FluidTrajectory,
    n: usize,
    rows: usize,
    row_mass: Vec<f64>,
    x: Vec<f64>,
    q: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> RowsOnTrajectory<'a> {
    fn new(gen: &'a AgentGenerator, traj: &'a FluidTrajectory, rows0: &[Vec<f64>]) -> Self {
        let n = gen.dim();
        RowsOnTrajectory {
            gen,
            traj,
            n,
            rows: rows0.len(),
            row_mass: rows0.iter().map(|r| r.iter().sum()).collect(),
            x: vec![0.0; n],
            q: vec![0.0; n * n],
            scratch: gen.new_scratch(),
        }
    }
}

impl OdeSystem for RowsOnTrajectory<'_> {
    fn dim(&self) -> usize {
        self.n * self.rows
    }

    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError> {
        self.traj.eval(t, &mut self.x);
        self.gen.eval_into(&self.x, &mut self.q, &mut self.scratch)?;
        row_times_generator(y, &self.q, self.n, self.rows, dydt);
        Ok(())
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> Result<bool, NumericError> {
        let mut changed = false;
        for r in 0..self.rows {
            changed |= normalize_row(&mut y[r * self.n..(r + 1) * self.n], self.row_mass[r]);
        }
        Ok(changed)
    }
}

/// Integrates probability rows from `ta` to `tb` against the trajectory and
/// returns the rows at `tb`.
fn rows_end_on_traj(
    gen: &AgentGenerator,
    traj: &FluidTrajectory,
    rows0: &[Vec<f64>],
    ta: f64,
    tb: f64,
) -> Result<Vec<Vec<f64>>, CheckError> {
    let n = gen.dim();
    let mut y0 = Vec::with_capacity(n * rows0.len());
    for row in rows0 {
        y0.extend_from_slice(row);
    }
    let mut sys = RowsOnTrajectory::new(gen, traj, rows0);
    let sol = integrate(&mut sys, ta, tb, &y0, &OdeOptions::default())?;
    let y = sol.y_end();
    Ok((0..rows0.len()).map(|r| y[r * n..(r + 1) * n].to_vec()).collect())
}

// ---------------------------------------------------------------------------
// Reachability window signals

/// Evolves the window matrix W(t) = Pi(t, t+T) of an absorbing-modified
/// chain: dW/dt = W Q(t+T) - Q(t) W, both generator evaluations taken along
/// the fluid trajectory.
struct WindowShiftSystem<'a> {
    gen: &'a AgentGenerator,
    traj: &'a FluidTrajectory,
    horizon: f64,
    n: usize,
    x: Vec<f64>,
    qa: Vec<f64>,
    qb: Vec<f64>,
    scratch: Vec<f64>,
}

impl OdeSystem for WindowShiftSystem<'_> {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError> {
        let n = self.n;
        self.traj.eval(t, &mut self.x);
        self.gen.eval_into(&self.x, &mut self.qa, &mut self.scratch)?;
        self.traj.eval(t + self.horizon, &mut self.x);
        self.gen.eval_into(&self.x, &mut self.qb, &mut self.scratch)?;
        row_times_generator(y, &self.qb, n, n, dydt);
        for r in 0..n {
            let arow = &self.qa[r * n..(r + 1) * n];
            let d = &mut dydt[r * n..(r + 1) * n];
            for (k, &ark) in arow.iter().enumerate() {
                if ark != 0.0 {
                    let wrow = &y[k * n..(k + 1) * n];
                    for (dj, wj) in d.iter_mut().zip(wrow) {
                        *dj -= ark * wj;
                    }
                }
            }
        }
        Ok(())
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> Result<bool, NumericError> {
        let mut changed = false;
        for r in 0..self.n {
            changed |= normalize_row(&mut y[r * self.n..(r + 1) * self.n], 1.0);
        }
        Ok(changed)
    }
}

/// Shift-integrated window matrices, stored chunk by chunk. Each part covers
/// one reseeded span; consecutive parts share their boundary instant.
#[derive(Debug, Clone)]
struct StitchedSolution {
    parts: Vec<DenseSolution>,
}

impl StitchedSolution {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let idx = self.parts.partition_point(|p| p.t_end() < t);
        self.parts[idx.min(self.parts.len() - 1)].eval(t, out);
    }

    fn mesh(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = Vec::new();
        for p in &self.parts {
            for t in p.mesh() {
                if ts.last().is_none_or(|&last| t > last) {
                    ts.push(t);
                }
            }
        }
        ts
    }
}

/// Time-varying reachability matrix Pi(t, t+T) for t in `[0, t_win]`:
/// entry (s, j) is the probability that the agent, in s at time t, sits in j
/// at time t+T after goal and avoid states have been made absorbing.
#[derive(Debug, Clone)]
pub struct ReachSignal {
    names: Vec<String>,
    n: usize,
    horizon: f64,
    t_win: f64,
    goal: Vec<bool>,
    sol: StitchedSolution,
}

impl ReachSignal {
    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn t_win(&self) -> f64 {
        self.t_win
    }

    pub fn goal(&self) -> &[bool] {
        &self.goal
    }

    /// Full window matrix at `t`, row-major.
    pub fn matrix_at(&self, t: f64) -> Vec<Vec<f64>> {
        let mut y = vec![0.0; self.n * self.n];
        self.sol.eval(t, &mut y);
        (0..self.n).map(|r| y[r * self.n..(r + 1) * self.n].to_vec()).collect()
    }

    /// Goal mass of row `s` at `t`: the reachability probability from `s`
    /// over the window `[t, t+T]`.
    pub fn prob(&self, t: f64, s: usize) -> f64 {
        assert!(s < self.n, "state index out of range");
        let mut y = vec![0.0; self.n * self.n];
        self.sol.eval(t, &mut y);
        (0..self.n).map(|j| if self.goal[j] { y[s * self.n + j] } else { 0.0 }).sum()
    }

    /// Reachability probability from every start state at `t`.
    pub fn prob_row(&self, t: f64) -> Vec<f64> {
        let mut y = vec![0.0; self.n * self.n];
        self.sol.eval(t, &mut y);
        (0..self.n)
            .map(|s| (0..self.n).map(|j| if self.goal[j] { y[s * self.n + j] } else { 0.0 }).sum())
            .collect()
    }

    /// Accepted step boundaries of the window-shift integration.
    pub fn mesh(&self) -> Vec<f64> {
        self.sol.mesh()
    }
}

/// Builds the reachability window signal: `goal` and `avoid` states become
/// absorbing (goal wins on overlap since its mass is what is counted), the
/// window matrix Pi(0, T) is integrated forward, then shifted across
/// `[0, t_win]`. The fluid trajectory is solved out to `t_win + horizon`.
pub fn reach_signal(
    m: &PopulationModel,
    goal: &[bool],
    avoid: &[bool],
    horizon: f64,
    t_win: f64,
) -> Result<ReachSignal, CheckError> {
    let n = m.n_states();
    assert_eq!(goal.len(), n, "goal mask dimension mismatch");
    assert_eq!(avoid.len(), n, "avoid mask dimension mismatch");
    if !(horizon.is_finite() && horizon >= 0.0 && t_win.is_finite() && t_win >= 0.0) {
        return Err(CheckError::Syntax(
            "window horizon and length must be finite and nonnegative".into(),
        ));
    }
    let gen = agent_generator(m)?;
    let absorb: Vec<bool> = goal.iter().zip(avoid).map(|(&g, &a)| g || a).collect();
    let gen_abs = absorbing_modification(&gen, &absorb);
    let traj = solve_fluid(m, t_win + horizon, None)?;

    // The shift equation is exact but dynamically unstable: a seed error E
    // evolves as Pi(0,t)^{-1} E Pi(T,t+T), and the inverse propagator grows
    // like exp(|Q| t). Integrate it only over spans whose amplification stays
    // around 1e2, reseeding each span by direct forward integration.
    let chunk_len = {
        let mut lam = 0.0f64;
        let t_end = t_win + horizon;
        let mut x = vec![0.0; n];
        for k in 0..=64 {
            traj.eval(t_end * k as f64 / 64.0, &mut x);
            let q = gen_abs.eval_dense(&x)?;
            for (i, row) in q.iter().enumerate() {
                lam = lam.max(2.0 * row[i].abs());
            }
        }
        if lam * t_win <= 100.0f64.ln() {
            t_win
        } else {
            (100.0f64.ln() / lam).max(t_win / 4096.0)
        }
    };

    let identity: Vec<Vec<f64>> = (0..n).map(|s| delta_row(n, s)).collect();
    let mut sys = WindowShiftSystem {
        gen: &gen_abs,
        traj: &traj,
        horizon,
        n,
        x: vec![0.0; n],
        qa: vec![0.0; n * n],
        qb: vec![0.0; n * n],
        scratch: gen_abs.new_scratch(),
    };
    let mut parts = Vec::new();
    let mut ta = 0.0;
    loop {
        let w0: Vec<f64> = rows_end_on_traj(&gen_abs, &traj, &identity, ta, ta + horizon)?
            .into_iter()
            .flatten()
            .collect();
        let tb = (ta + chunk_len).min(t_win);
        parts.push(integrate(&mut sys, ta, tb, &w0, &OdeOptions::default())?);
        ta = tb;
        if ta >= t_win {
            break;
        }
    }
    Ok(ReachSignal {
        names: m.agent.names().to_vec(),
        n,
        horizon,
        t_win,
        goal: goal.to_vec(),
        sol: StitchedSolution { parts },
    })
}

// ---------------------------------------------------------------------------
// Path probabilities

fn until_masks(
    m: &PopulationModel,
    lhs: &StateExpr,
    rhs: &StateExpr,
) -> Result<(Vec<bool>, Vec<bool>), CheckError> {
    let phi1 = lhs.sat(m)?;
    let goal = rhs.sat(m)?;
    // Goal states absorb with priority; non-phi1 states trap failing paths.
    let avoid: Vec<bool> = phi1.iter().zip(&goal).map(|(&a, &g)| !a && !g).collect();
    Ok((goal, avoid))
}

fn mask_absorb(goal: &[bool], avoid: &[bool]) -> Vec<bool> {
    goal.iter().zip(avoid).map(|(&g, &a)| g || a).collect()
}

fn goal_mass(row: &[f64], goal: &[bool]) -> f64 {
    row.iter().zip(goal).map(|(&v, &g)| if g { v } else { 0.0 }).sum()
}

/// Until probability with zero lower bound, one start row, evaluated against
/// a trajectory that must already cover `[t0, t0 + t]`.
fn until_zero_from_row(
    gen: &AgentGenerator,
    traj: &FluidTrajectory,
    goal: &[bool],
    avoid: &[bool],
    row0: Vec<f64>,
    t0: f64,
    t: f64,
) -> Result<f64, CheckError> {
    let gen_abs = absorbing_modification(gen, &mask_absorb(goal, avoid));
    let end = rows_end_on_traj(&gen_abs, traj, &[row0], t0, t0 + t)?;
    Ok(goal_mass(&end[0], goal))
}

fn next_probability(
    gen: &AgentGenerator,
    traj: &FluidTrajectory,
    mask: &[bool],
    s: usize,
    t0: f64,
    t1: f64,
    t2: f64,
) -> Result<f64, CheckError> {
    struct NextSystem<'a> {
        gen: &'a AgentGenerator,
        traj: &'a FluidTrajectory,
        s: usize,
        mask: &'a [bool],
        accumulate: bool,
        x: Vec<f64>,
        scratch: Vec<f64>,
    }
    impl OdeSystem for NextSystem<'_> {
        fn dim(&self) -> usize {
            2
        }

        // y = [survival without a jump, accumulated landing probability].
        fn rhs(&mut self, t: f64, y: &[f64], d: &mut [f64]) -> Result<(), NumericError> {
            self.traj.eval(t, &mut self.x);
            let mut exit = 0.0;
            let mut win = 0.0;
            for e in self.gen.entries() {
                if e.src == self.s && e.dst != self.s {
                    let g = self.gen.share_at(e, &self.x, &mut self.scratch)?;
                    exit += g;
                    if self.mask[e.dst] {
                        win += g;
                    }
                }
            }
            d[0] = -exit * y[0];
            d[1] = if self.accumulate { win * y[0] } else { 0.0 };
            Ok(())
        }
    }

    let mut sys = NextSystem {
        gen,
        traj,
        s,
        mask,
        accumulate: false,
        x: vec![0.0; gen.dim()],
        scratch: gen.new_scratch(),
    };
    // Two legs so the window indicator never sits inside one integration.
    let leg1 = integrate(&mut sys, t0, t0 + t1, &[1.0, 0.0], &OdeOptions::default())?;
    sys.accumulate = true;
    let y1 = leg1.y_end().to_vec();
    let leg2 = integrate(&mut sys, t0 + t1, t0 + t2, &y1, &OdeOptions::default())?;
    Ok(leg2.y_end()[1].clamp(0.0, 1.0))
}

/// Probability that the path formula holds for the agent started in state `s`
/// at time `t0`, with time bounds read relative to `t0`.
pub fn check_path_probability(
    m: &PopulationModel,
    path: &PathFormula,
    s: usize,
    t0: f64,
) -> Result<f64, CheckError> {
    let n = m.n_states();
    assert!(s < n, "state index out of range");
    if !(t0.is_finite() && t0 >= 0.0) {
        return Err(CheckError::Syntax(format!(
            "evaluation time {t0} must be finite and nonnegative"
        )));
    }
    let gen = agent_generator(m)?;
    match path {
        PathFormula::Until { t1, t2, lhs, rhs } => {
            let (goal, avoid) = until_masks(m, lhs, rhs)?;
            let traj = solve_fluid(m, t0 + t2, None)?;
            if *t1 == 0.0 {
                let p = until_zero_from_row(&gen, &traj, &goal, &avoid, delta_row(n, s), t0, *t2)?;
                return Ok(p.clamp(0.0, 1.0));
            }
            // Phase 1 over [t0, t0+t1]: any departure from phi1 kills the
            // path, goal or not, because the witness time cannot come
            // before t1.
            let phi1 = lhs.sat(m)?;
            let absorb1: Vec<bool> = phi1.iter().map(|&a| !a).collect();
            let gen1 = absorbing_modification(&gen, &absorb1);
            let at_t1 = rows_end_on_traj(&gen1, &traj, &[delta_row(n, s)], t0, t0 + t1)?;

            // Phase 2 from every phi1 state at once: until [0, t2-t1].
            let rows0: Vec<Vec<f64>> =
                (0..n).filter(|&i| phi1[i]).map(|i| delta_row(n, i)).collect();
            let phi1_states: Vec<usize> = (0..n).filter(|&i| phi1[i]).collect();
            if phi1_states.is_empty() {
                return Ok(0.0);
            }
            let gen_abs = absorbing_modification(&gen, &mask_absorb(&goal, &avoid));
            let ends = rows_end_on_traj(&gen_abs, &traj, &rows0, t0 + t1, t0 + t2)?;
            let p: f64 = phi1_states
                .iter()
                .zip(&ends)
                .map(|(&i, end)| at_t1[0][i] * goal_mass(end, &goal))
                .sum();
            Ok(p.clamp(0.0, 1.0))
        }
        PathFormula::Next { t1, t2, goal } => {
            let mask = goal.sat(m)?;
            let traj = solve_fluid(m, t0 + t2, None)?;
            next_probability(&gen, &traj, &mask, s, t0, *t1, *t2)
        }
    }
}

// ---------------------------------------------------------------------------
// Boolean signals

/// Truth of a threshold formula as a function of the evaluation time over
/// `[0, t_win]`. `values` holds the truth on each maximal interval between
/// consecutive crossings; `indeterminate` marks stretches where the
/// probability sits within [`TANGENT_MARGIN`] of the threshold.
#[derive(Debug, Clone)]
pub struct BooleanSignal {
    pub t_win: f64,
    pub crossings: Vec<f64>,
    pub values: Vec<bool>,
    pub indeterminate: Vec<(f64, f64)>,
}

impl BooleanSignal {
    pub fn value_at(&self, t: f64) -> bool {
        let idx = self.crossings.partition_point(|&c| c <= t);
        self.values[idx]
    }

    pub fn is_indeterminate_at(&self, t: f64) -> bool {
        self.indeterminate.iter().any(|&(lo, hi)| lo <= t && t <= hi)
    }

    pub fn has_indeterminate(&self) -> bool {
        !self.indeterminate.is_empty()
    }
}

/// Owned evaluator for the probability of one path formula as a function of
/// the evaluation time.
enum Evaluator {
    /// Until with zero lower bound: one window signal.
    UntilZero { sig: ReachSignal, s: usize },
    /// Until with positive lower bound: survival window composed with a
    /// shifted reachability window.
    UntilShift {
        phase1: ReachSignal,
        phase2: ReachSignal,
        phi1: Vec<bool>,
        s: usize,
        t1: f64,
    },
    /// Next: pointwise two-leg integration against a shared trajectory.
    Next {
        gen: AgentGenerator,
        traj: FluidTrajectory,
        mask: Vec<bool>,
        s: usize,
        t1: f64,
        t2: f64,
    },
}

impl Evaluator {
    fn value(&self, t: f64) -> Result<f64, CheckError> {
        match self {
            Evaluator::UntilZero { sig, s } => Ok(sig.prob(t, *s)),
            Evaluator::UntilShift { phase1, phase2, phi1, s, t1 } => {
                let w1 = phase1.matrix_at(t);
                let p2 = phase2.prob_row(t + t1);
                let p: f64 = (0..phi1.len())
                    .filter(|&i| phi1[i])
                    .map(|i| w1[*s][i] * p2[i])
                    .sum();
                Ok(p.clamp(0.0, 1.0))
            }
            Evaluator::Next { gen, traj, mask, s, t1, t2 } => {
                next_probability(gen, traj, mask, *s, t, *t1, *t2)
            }
        }
    }

    /// Sampling mesh over `[0, t_win]`, built from the integrator meshes
    /// where available and refined so short features are not skipped.
    fn mesh(&self, t_win: f64) -> Vec<f64> {
        let base = match self {
            Evaluator::UntilZero { sig, .. } => sig.mesh(),
            Evaluator::UntilShift { phase1, phase2, t1, .. } => {
                let mut ts = phase1.mesh();
                ts.extend(phase2.mesh().iter().map(|&u| u - t1));
                ts
            }
            Evaluator::Next { .. } => {
                let steps = 512;
                return (0..=steps).map(|k| t_win * k as f64 / steps as f64).collect();
            }
        };
        let mut ts: Vec<f64> = base.into_iter().filter(|&u| (0.0..=t_win).contains(&u)).collect();
        ts.push(0.0);
        ts.push(t_win);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        // Subdivide each integrator step: dense output is quartic, so a level
        // line can be crossed and recrossed strictly inside one step.
        let mut fine = Vec::with_capacity(ts.len() * 4);
        for w in ts.windows(2) {
            for k in 0..4 {
                fine.push(w[0] + (w[1] - w[0]) * k as f64 / 4.0);
            }
        }
        fine.push(t_win);
        fine
    }
}

fn build_evaluator(
    m: &PopulationModel,
    path: &PathFormula,
    s: usize,
    t_win: f64,
) -> Result<Evaluator, CheckError> {
    match path {
        PathFormula::Until { t1, t2, lhs, rhs } => {
            let (goal, avoid) = until_masks(m, lhs, rhs)?;
            if *t1 == 0.0 {
                let sig = reach_signal(m, &goal, &avoid, *t2, t_win)?;
                Ok(Evaluator::UntilZero { sig, s })
            } else {
                let phi1 = lhs.sat(m)?;
                let not_phi1: Vec<bool> = phi1.iter().map(|&a| !a).collect();
                let none = vec![false; m.n_states()];
                let phase1 = reach_signal(m, &none, &not_phi1, *t1, t_win)?;
                let phase2 = reach_signal(m, &goal, &avoid, t2 - t1, t_win + t1)?;
                Ok(Evaluator::UntilShift { phase1, phase2, phi1, s, t1: *t1 })
            }
        }
        PathFormula::Next { t1, t2, goal } => {
            let mask = goal.sat(m)?;
            let gen = agent_generator(m)?;
            let traj = solve_fluid(m, t_win + t2, None)?;
            Ok(Evaluator::Next { gen, traj, mask, s, t1: *t1, t2: *t2 })
        }
    }
}

/// Samples the path probability over the evaluation window `[0, t_win]`.
/// Returns `(t, probability)` pairs on the signal's sampling mesh.
pub fn probability_samples(
    m: &PopulationModel,
    path: &PathFormula,
    s: usize,
    t_win: f64,
) -> Result<Vec<(f64, f64)>, CheckError> {
    assert!(s < m.n_states(), "state index out of range");
    if !(t_win.is_finite() && t_win >= 0.0) {
        return Err(CheckError::Syntax("signal window must be finite and nonnegative".into()));
    }
    let eval = build_evaluator(m, path, s, t_win)?;
    let mesh = eval.mesh(t_win);
    mesh.into_iter().map(|t| Ok((t, eval.value(t)?))).collect()
}

fn bisect_crossing(
    eval: &Evaluator,
    p: f64,
    mut lo: f64,
    mut hi: f64,
    lo_positive: bool,
) -> Result<f64, CheckError> {
    while hi - lo > CROSSING_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        let g = eval.value(mid)? - p;
        if g == 0.0 {
            return Ok(mid);
        }
        if (g > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Truth signal of `P cmp p [ path ]` for the agent started in `s`, over
/// evaluation times in `[0, t_win]`. Crossings are located by bisection to
/// [`CROSSING_RESOLUTION`]; stretches where the probability stays within
/// [`TANGENT_MARGIN`] of `p` are reported as indeterminate instead of being
/// silently resolved.
pub fn boolean_signal(
    m: &PopulationModel,
    path: &PathFormula,
    cmp: Cmp,
    p: f64,
    s: usize,
    t_win: f64,
) -> Result<BooleanSignal, CheckError> {
    assert!(s < m.n_states(), "state index out of range");
    if !(t_win.is_finite() && t_win >= 0.0) {
        return Err(CheckError::Syntax("signal window must be finite and nonnegative".into()));
    }
    if !p.is_finite() {
        return Err(CheckError::Syntax("threshold must be finite".into()));
    }
    let eval = build_evaluator(m, path, s, t_win)?;
    let mesh = eval.mesh(t_win);
    let g: Vec<f64> = mesh
        .iter()
        .map(|&t| eval.value(t).map(|v| v - p))
        .collect::<Result<_, _>>()?;

    let mut crossings = Vec::new();
    for k in 0..mesh.len().saturating_sub(1) {
        if g[k] != 0.0 && g[k + 1] != 0.0 && (g[k] > 0.0) != (g[k + 1] > 0.0) {
            crossings.push(bisect_crossing(&eval, p, mesh[k], mesh[k + 1], g[k] > 0.0)?);
        }
    }

    let mut values = Vec::with_capacity(crossings.len() + 1);
    let first = cmp.holds(g[0] + p, p);
    values.push(first);
    for k in 0..crossings.len() {
        values.push(!values[k]);
    }

    // Mesh points hugging the threshold are flagged with their neighboring
    // mesh cells, merged into maximal intervals.
    let mut indeterminate: Vec<(f64, f64)> = Vec::new();
    for (k, &gk) in g.iter().enumerate() {
        if gk.abs() < TANGENT_MARGIN {
            let lo = if k == 0 { mesh[0] } else { mesh[k - 1] };
            let hi = if k + 1 == mesh.len() { mesh[k] } else { mesh[k + 1] };
            match indeterminate.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => indeterminate.push((lo, hi)),
            }
        }
    }

    Ok(BooleanSignal { t_win, crossings, values, indeterminate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SparseGenerator;
    use crate::sim::uniformization_transient;

    const BIKE_SRC: &str = include_str!("../../../assets/bike.model");
    const TWOSTATE_SRC: &str = include_str!("../../../assets/twostate.model");

    fn bike() -> PopulationModel {
        PopulationModel::parse(BIKE_SRC).unwrap()
    }

    fn two_state(k1: f64, k2: f64, p_on: f64) -> PopulationModel {
        let src = TWOSTATE_SRC
            .replace("param k1 = 1.0", &format!("param k1 = {k1}"))
            .replace("param k2 = 1.0", &format!("param k2 = {k2}"))
            .replace(
                "init x_on = 1.0",
                &format!("init x_on = {p_on}\ninit x_off = {}", 1.0 - p_on),
            );
        PopulationModel::parse(&src).unwrap()
    }

    fn mask_of(m: &PopulationModel, names: &[&str]) -> Vec<bool> {
        let mut v = vec![false; m.n_states()];
        for name in names {
            v[m.agent.index_of(name).unwrap()] = true;
        }
        v
    }

    /// Reference row propagation: freeze Q at midpoints of dt-sized slices
    /// and advance with uniformization. Second-order in dt.
    fn piecewise_constant_row(
        gen: &AgentGenerator,
        traj: &FluidTrajectory,
        mut p: Vec<f64>,
        t0: f64,
        t1: f64,
        dt: f64,
    ) -> Vec<f64> {
        let steps = ((t1 - t0) / dt).round() as usize;
        let mut x = vec![0.0; traj.n_states()];
        for k in 0..steps {
            traj.eval(t0 + (k as f64 + 0.5) * dt, &mut x);
            let q = gen.eval_dense(&x).unwrap();
            let sg = SparseGenerator::from_dense(&q).unwrap();
            p = uniformization_transient(&sg, &p, dt).unwrap();
        }
        p
    }

    // -- parsing ------------------------------------------------------------

    #[test]
    fn parses_threshold_until_formula() {
        let m = bike();
        let f = parse_formula("P>=0.3 [ at_a U[0,10] at_d ]", &m).unwrap();
        match f {
            Formula::Prob { query: Query::Threshold(Cmp::Ge, p), path } => {
                assert_eq!(p, 0.3);
                match path {
                    PathFormula::Until { t1, t2, lhs, rhs } => {
                        assert_eq!((t1, t2), (0.0, 10.0));
                        assert_eq!(lhs, StateExpr::Atom("at_a".into()));
                        assert_eq!(rhs, StateExpr::Atom("at_d".into()));
                    }
                    other => panic!("expected until, got {other:?}"),
                }
            }
            other => panic!("unexpected parse {other:?}"),
        }
    }

    #[test]
    fn parses_value_query_next_formula() {
        let m = two_state(1.0, 1.0, 1.0);
        let f = parse_formula("P=? [ X[1,2] at_on ]", &m).unwrap();
        assert_eq!(
            f,
            Formula::Prob {
                query: Query::Value,
                path: PathFormula::Next { t1: 1.0, t2: 2.0, goal: StateExpr::Atom("at_on".into()) },
            }
        );
    }

    #[test]
    fn parses_all_reward_query_kinds() {
        let m = bike();
        let cases = [
            ("R{cost}<=5 [ C<=100 ]", RewardKind::Cumulative { t: 100.0 }),
            ("R{diss}=? [ I=50 ]", RewardKind::Instantaneous { t: 50.0 }),
            ("R{cost}=? [ S ]", RewardKind::Steady),
            ("R{cost}=? [ F<=1000 at_d ]", RewardKind::Reach {
                t: 1000.0,
                goal: StateExpr::Atom("at_d".into()),
            }),
        ];
        for (text, want) in cases {
            match parse_formula(text, &m).unwrap() {
                Formula::Reward { kind, .. } => assert_eq!(kind, want, "{text}"),
                other => panic!("expected reward formula for {text}, got {other:?}"),
            }
        }
    }

    #[test]
    fn boolean_connectives_parse_with_precedence() {
        let m = bike();
        let f = parse_formula("P=? [ (!at_d & true) U[0,5] at_d & at_a ]", &m).unwrap();
        let Formula::Prob { path: PathFormula::Until { lhs, rhs, .. }, .. } = f else {
            panic!("expected until");
        };
        assert_eq!(
            lhs,
            StateExpr::And(
                Box::new(StateExpr::Not(Box::new(StateExpr::Atom("at_d".into())))),
                Box::new(StateExpr::True),
            )
        );
        assert_eq!(
            rhs,
            StateExpr::And(
                Box::new(StateExpr::Atom("at_d".into())),
                Box::new(StateExpr::Atom("at_a".into())),
            )
        );
    }

    #[test]
    fn atoms_resolve_labels_before_state_names() {
        // A label that shadows a state name must win; here label `b` names
        // the set {d}, not the state b.
        let src = BIKE_SRC.replace("label at_a = { a }", "label b = { d }");
        let m = PopulationModel::parse(&src).unwrap();
        let mask = StateExpr::Atom("b".into()).sat(&m).unwrap();
        assert_eq!(mask, mask_of(&m, &["d"]));
        // Plain state names still resolve when no label shadows them.
        let mask = StateExpr::Atom("ss".into()).sat(&m).unwrap();
        assert_eq!(mask, mask_of(&m, &["ss"]));
    }

    #[test]
    fn rejects_malformed_formulae() {
        let m = bike();
        let nested = [
            "P>=0.1 [ P>=0.2 [ at_a U[0,1] at_d ] U[0,1] at_d ]",
            "P=? [ X[0,1] R{cost}<=1 [ C<=1 ] ]",
        ];
        for text in nested {
            assert!(
                matches!(parse_formula(text, &m), Err(CheckError::NestedFormulaUnsupported)),
                "{text}"
            );
        }
        assert!(matches!(
            parse_formula("P>=1.5 [ at_a U[0,1] at_d ]", &m),
            Err(CheckError::Syntax(_))
        ));
        assert!(matches!(
            parse_formula("R{cost}<=-1 [ C<=10 ]", &m),
            Err(CheckError::Syntax(_))
        ));
        assert!(matches!(
            parse_formula("P>=0.1 [ at_a U[5,2] at_d ]", &m),
            Err(CheckError::Syntax(_))
        ));
        assert!(matches!(
            parse_formula("P>=0.1 [ at_a U[0,1] nowhere ]", &m),
            Err(CheckError::UnknownAtom(name)) if name == "nowhere"
        ));
        assert!(matches!(
            parse_formula("R{fees}=? [ S ]", &m),
            Err(CheckError::UnknownReward(name)) if name == "fees"
        ));
        assert!(matches!(
            parse_formula("P=? [ at_a U[0,1] at_d ] extra", &m),
            Err(CheckError::Syntax(_))
        ));
    }

    #[test]
    fn formulae_round_trip_through_display() {
        let m = bike();
        let texts = [
            "P>=0.3 [ at_a U[0,10] at_d ]",
            "P=? [ X[1,2] at_a ]",
            "P<0.5 [ !at_d U[2,7] at_d & !at_a ]",
            "R{cost}<=5 [ C<=100 ]",
            "R{diss}=? [ I=50 ]",
            "R{cost}=? [ S ]",
            "R{cost}=? [ F<=1000 at_d ]",
        ];
        for text in texts {
            let f = parse_formula(text, &m).unwrap();
            let round = parse_formula(&f.to_string(), &m).unwrap();
            assert_eq!(f, round, "{text} vs {f}");
        }
    }

    // -- transient ----------------------------------------------------------

    #[test]
    fn zero_horizon_transient_returns_initial_row() {
        let m = bike();
        let p0 = [0.2, 0.2, 0.2, 0.2, 0.2];
        let td = transient(&m, &p0, 0.0).unwrap();
        assert_eq!(td.end_row(0), &p0);
    }

    #[test]
    fn two_state_transient_matches_closed_form() {
        // Homogeneous on/off chain from delta at on: p_on(t) = (1+e^{-2t})/2.
        let m = two_state(1.0, 1.0, 0.5);
        let td = transient_from_state(&m, 0, 2.0).unwrap();
        for &t in &[0.0, 0.3, 1.0, 2.0] {
            let row = td.row_at(0, t);
            let want = 0.5 * (1.0 + (-2.0 * t).exp());
            assert!((row[0] - want).abs() < 1e-7, "t={t}: {} vs {want}", row[0]);
        }
    }

    #[test]
    fn transient_rows_stay_stochastic_along_the_mesh() {
        let m = bike();
        let td = transient(&m, &[0.5, 0.5, 0.0, 0.0, 0.0], 60.0).unwrap();
        for &t in &td.mesh() {
            let row = td.row_at(0, t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8, "row sum {sum} at t={t}");
            assert!(row.iter().all(|&v| v >= -1e-9), "negative entry at t={t}: {row:?}");
        }
    }

    #[test]
    fn transient_rejects_unnormalized_initial_distribution() {
        let m = bike();
        assert!(matches!(
            transient(&m, &[0.5, 0.0, 0.0, 0.0, 0.0], 1.0),
            Err(CheckError::Syntax(_))
        ));
    }

    // -- reachability windows -----------------------------------------------

    #[test]
    fn homogeneous_window_signal_is_time_invariant() {
        // Constant generator: Pi(t, t+T) must not depend on t, and must match
        // uniformization of the absorbing chain.
        let m = two_state(1.0, 1.0, 0.5);
        let goal = mask_of(&m, &["off"]);
        let avoid = vec![false; 2];
        let sig = reach_signal(&m, &goal, &avoid, 1.0, 5.0).unwrap();

        let gen = agent_generator(&m).unwrap();
        let gen_abs = absorbing_modification(&gen, &goal);
        let q = gen_abs.eval_dense(&[0.5, 0.5]).unwrap();
        let sg = SparseGenerator::from_dense(&q).unwrap();
        let reference = uniformization_transient(&sg, &[1.0, 0.0], 1.0).unwrap()[1];
        assert!((reference - (1.0 - (-1.0f64).exp())).abs() < 1e-10);

        for &t in &[0.0, 1.7, 3.3, 5.0] {
            assert!(
                (sig.prob(t, 0) - reference).abs() < 1e-7,
                "t={t}: {} vs {reference}",
                sig.prob(t, 0)
            );
        }
    }

    #[test]
    fn window_matrices_stay_row_stochastic() {
        let m = bike();
        let goal = mask_of(&m, &["d"]);
        let avoid = vec![false; 5];
        let sig = reach_signal(&m, &goal, &avoid, 10.0, 30.0).unwrap();
        for &t in &sig.mesh() {
            for (i, row) in sig.matrix_at(t).iter().enumerate() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-8, "row {i} sums to {sum} at t={t}");
            }
        }
    }

    #[test]
    fn goal_covering_every_state_pins_the_signal_at_one() {
        let m = bike();
        let goal = vec![true; 5];
        let avoid = vec![false; 5];
        let sig = reach_signal(&m, &goal, &avoid, 4.0, 8.0).unwrap();
        for &t in &[0.0, 3.0, 8.0] {
            assert!((sig.prob(t, 2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bike_window_signal_matches_piecewise_constant_reference() {
        let m = bike();
        let goal = mask_of(&m, &["d"]);
        let avoid = vec![false; 5];
        let horizon = 10.0;
        let sig = reach_signal(&m, &goal, &avoid, horizon, 50.0).unwrap();

        let gen = agent_generator(&m).unwrap();
        let gen_abs = absorbing_modification(&gen, &goal);
        let traj = solve_fluid(&m, 60.0, None).unwrap();
        let d = m.agent.index_of("d").unwrap();
        for &t in &[0.0, 17.3, 50.0] {
            let row =
                piecewise_constant_row(&gen_abs, &traj, delta_row(5, 0), t, t + horizon, 1e-3);
            assert!(
                (sig.prob(t, 0) - row[d]).abs() < 1e-4,
                "t={t}: {} vs {}",
                sig.prob(t, 0),
                row[d]
            );
        }
    }

    // -- path probabilities ---------------------------------------------------

    #[test]
    fn until_probability_matches_two_state_closed_form() {
        // P(on U[0,1] off) from on with unit rates: 1 - e^{-1}.
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 1.0,
            lhs: StateExpr::Atom("on".into()),
            rhs: StateExpr::Atom("off".into()),
        };
        let p = check_path_probability(&m, &path, 0, 0.0).unwrap();
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-7, "{p}");
    }

    #[test]
    fn until_from_a_goal_state_is_immediate() {
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 0.5,
            lhs: StateExpr::True,
            rhs: StateExpr::Atom("on".into()),
        };
        assert_eq!(check_path_probability(&m, &path, 0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn interval_until_matches_first_jump_window_law() {
        // From on with phi1 = on, phi2 = off, the until holds iff the first
        // jump lands in [1, 2]: e^{-1} - e^{-2}.
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until {
            t1: 1.0,
            t2: 2.0,
            lhs: StateExpr::Atom("on".into()),
            rhs: StateExpr::Atom("off".into()),
        };
        let p = check_path_probability(&m, &path, 0, 0.0).unwrap();
        let want = (-1.0f64).exp() - (-2.0f64).exp();
        assert!((p - want).abs() < 1e-7, "{p} vs {want}");
    }

    #[test]
    fn until_probability_is_nondecreasing_in_the_horizon() {
        let m = bike();
        let mut last = -1.0;
        for &t2 in &[2.0, 5.0, 10.0, 20.0, 40.0] {
            let path = PathFormula::Until {
                t1: 0.0,
                t2,
                lhs: StateExpr::True,
                rhs: StateExpr::Atom("at_d".into()),
            };
            let p = check_path_probability(&m, &path, 0, 0.0).unwrap();
            assert!(p >= last - 1e-9, "p({t2}) = {p} dropped below {last}");
            last = p;
        }
    }

    #[test]
    fn until_check_agrees_with_joint_transient_on_modified_generator() {
        // Independent code paths: row integration against the interpolated
        // trajectory vs joint co-integration of densities and probabilities.
        let m = bike();
        let goal = mask_of(&m, &["d"]);
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 10.0,
            lhs: StateExpr::True,
            rhs: StateExpr::Atom("at_d".into()),
        };
        let p_rows = check_path_probability(&m, &path, 0, 0.0).unwrap();

        let gen = agent_generator(&m).unwrap();
        let gen_abs = absorbing_modification(&gen, &goal);
        let td = transient_rows(&m, &gen_abs, &[delta_row(5, 0)], 10.0).unwrap();
        let p_joint = goal_mass(td.end_row(0), &goal);
        assert!((p_rows - p_joint).abs() < 1e-7, "{p_rows} vs {p_joint}");
    }

    #[test]
    fn until_check_at_positive_start_agrees_with_window_signal() {
        let m = bike();
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 10.0,
            lhs: StateExpr::True,
            rhs: StateExpr::Atom("at_d".into()),
        };
        let p_direct = check_path_probability(&m, &path, 0, 3.0).unwrap();
        let goal = mask_of(&m, &["d"]);
        let avoid = vec![false; 5];
        let sig = reach_signal(&m, &goal, &avoid, 10.0, 5.0).unwrap();
        assert!((p_direct - sig.prob(3.0, 0)).abs() < 1e-7);
    }

    #[test]
    fn next_probability_matches_first_jump_distribution() {
        let m = two_state(1.0, 1.0, 0.5);
        let goal_off = StateExpr::Atom("off".into());
        let cases = [
            (0.0, 1.0, 1.0 - (-1.0f64).exp()),
            (0.5, 1.0, (-0.5f64).exp() - (-1.0f64).exp()),
            (1.0, 1.0, 0.0),
        ];
        for (t1, t2, want) in cases {
            let path = PathFormula::Next { t1, t2, goal: goal_off.clone() };
            let p = check_path_probability(&m, &path, 0, 0.0).unwrap();
            assert!((p - want).abs() < 1e-7, "X[{t1},{t2}]: {p} vs {want}");
        }
        // The first jump from on can only land in off.
        let path = PathFormula::Next { t1: 0.0, t2: 1.0, goal: StateExpr::Atom("on".into()) };
        assert_eq!(check_path_probability(&m, &path, 0, 0.0).unwrap(), 0.0);
    }

    // -- boolean signals ------------------------------------------------------

    #[test]
    fn trivial_threshold_yields_constant_true_signal() {
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until { t1: 0.0, t2: 1.0, lhs: StateExpr::True, rhs: StateExpr::True };
        let sig = boolean_signal(&m, &path, Cmp::Ge, 0.0, 0, 4.0).unwrap();
        assert!(sig.crossings.is_empty());
        assert_eq!(sig.values, vec![true]);
        assert!(!sig.has_indeterminate());
    }

    #[test]
    fn homogeneous_signal_never_crosses() {
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 1.0,
            lhs: StateExpr::Atom("on".into()),
            rhs: StateExpr::Atom("off".into()),
        };
        let sig = boolean_signal(&m, &path, Cmp::Ge, 0.5, 0, 5.0).unwrap();
        assert!(sig.crossings.is_empty());
        assert_eq!(sig.values, vec![true]); // 1 - e^{-1} > 0.5 everywhere
        assert!(!sig.has_indeterminate());
    }

    #[test]
    fn crossing_times_agree_with_a_dense_grid_scan() {
        let m = bike();
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 10.0,
            lhs: StateExpr::True,
            rhs: StateExpr::Atom("at_d".into()),
        };
        let t_win = 50.0;
        let goal = mask_of(&m, &["d"]);
        let avoid = vec![false; 5];
        let ref_sig = reach_signal(&m, &goal, &avoid, 10.0, t_win).unwrap();
        let v0 = ref_sig.prob(0.0, 0);
        let v1 = ref_sig.prob(t_win, 0);
        assert!((v0 - v1).abs() > 0.005, "signal too flat to place a threshold");
        let p = 0.5 * (v0 + v1);

        let sig = boolean_signal(&m, &path, Cmp::Ge, p, 0, t_win).unwrap();
        assert!(!sig.crossings.is_empty());

        // Scan a 0.01 grid for sign changes and match them to crossings.
        let mut grid_brackets = Vec::new();
        let steps = (t_win / 0.01) as usize;
        let mut prev = ref_sig.prob(0.0, 0) - p;
        for k in 1..=steps {
            let t = t_win * k as f64 / steps as f64;
            let cur = ref_sig.prob(t, 0) - p;
            if prev != 0.0 && cur != 0.0 && (prev > 0.0) != (cur > 0.0) {
                grid_brackets.push(t - 0.005);
            }
            prev = cur;
        }
        assert_eq!(grid_brackets.len(), sig.crossings.len());
        for (got, want) in sig.crossings.iter().zip(&grid_brackets) {
            assert!((got - want).abs() <= 0.01, "crossing {got} vs grid {want}");
        }
    }

    #[test]
    fn interval_truth_matches_pointwise_checks_at_quasi_random_times() {
        let m = bike();
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 10.0,
            lhs: StateExpr::True,
            rhs: StateExpr::Atom("at_d".into()),
        };
        let t_win = 50.0;
        let goal = mask_of(&m, &["d"]);
        let avoid = vec![false; 5];
        let ref_sig = reach_signal(&m, &goal, &avoid, 10.0, t_win).unwrap();
        let p = 0.5 * (ref_sig.prob(0.0, 0) + ref_sig.prob(t_win, 0));
        let sig = boolean_signal(&m, &path, Cmp::Ge, p, 0, t_win).unwrap();

        let golden = 0.618_033_988_749_894_9_f64;
        let mut skipped = 0;
        for k in 1..=1000u64 {
            let t = (k as f64 * golden).fract() * t_win;
            let near_crossing = sig.crossings.iter().any(|c| (c - t).abs() < 1e-6);
            if near_crossing || sig.is_indeterminate_at(t) {
                skipped += 1;
                continue;
            }
            let truth = ref_sig.prob(t, 0) >= p;
            assert_eq!(sig.value_at(t), truth, "t={t}");
        }
        assert!(skipped < 100, "too many skipped samples: {skipped}");
    }

    #[test]
    fn grazing_threshold_is_flagged_indeterminate() {
        let m = two_state(1.0, 1.0, 0.5);
        let path = PathFormula::Until {
            t1: 0.0,
            t2: 1.0,
            lhs: StateExpr::Atom("on".into()),
            rhs: StateExpr::Atom("off".into()),
        };
        // The signal is constant; probe it, then set the threshold within
        // half the tangency margin.
        let v = check_path_probability(&m, &path, 0, 0.0).unwrap();
        let sig = boolean_signal(&m, &path, Cmp::Ge, v + 5e-8, 0, 3.0).unwrap();
        assert!(sig.has_indeterminate());
        let (lo, hi) = sig.indeterminate[0];
        assert!(lo <= 1e-12 && hi >= 3.0 - 1e-12, "flag covers the window: {lo}..{hi}");
    }

    #[test]
    fn next_value_signal_is_flat_for_a_homogeneous_chain() {
        let m = two_state(1.0, 1.0, 0.5);
        let path =
            PathFormula::Next { t1: 0.0, t2: 1.0, goal: StateExpr::Atom("off".into()) };
        let samples = probability_samples(&m, &path, 0, 2.0).unwrap();
        let want = 1.0 - (-1.0f64).exp();
        assert!(samples.len() > 100);
        for (t, v) in samples {
            assert!((v - want).abs() < 1e-6, "t={t}: {v} vs {want}");
        }
    }
}
