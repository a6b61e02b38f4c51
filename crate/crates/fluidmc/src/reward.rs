//! Reward structures and the fluid reward computations over the tagged agent:
//! cumulative, instantaneous, steady-state, and bounded-reachability rewards,
//! plus reward-operator satisfaction.
//!
//! Cumulative rewards ride as an uncontrolled quadrature component on the
//! joint population/probability integration, which keeps every reward value
//! exactly linear in the reward structure: relative comparisons against
//! statistical estimates are then invariant to the structure's scale.

use std::fmt;

use crate::csl::{
    absorbing_modification, delta_row, normalize_row, row_times_generator, transient,
    CheckError, CheckOutcome, Formula, RewardKind,
};
use crate::fluid::{
    agent_generator, project_simplex, solve_dense, steady_state, AgentGenerator, Drift,
    SteadyOpts,
};
use crate::model::PopulationModel;
use crate::ode::{integrate, DenseSolution, NumericError, OdeOptions, OdeSystem};

/// State reward rates and transition impulse rewards, densely indexed by
/// agent state and transition. Entries not declared in the model default to
/// zero; all entries are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardStructure {
    pub name: String,
    pub state: Vec<f64>,
    pub trans: Vec<f64>,
}

impl RewardStructure {
    /// Looks up a declared reward structure and densifies it.
    pub fn from_model(m: &PopulationModel, name: &str) -> Result<Self, CheckError> {
        let decl = m
            .reward_decl(name)
            .ok_or_else(|| CheckError::UnknownReward(name.to_string()))?;
        let mut state = vec![0.0; m.n_states()];
        for &(s, v) in &decl.state_rewards {
            state[s] = v;
        }
        let mut trans = vec![0.0; m.transitions.len()];
        for &(t, v) in &decl.trans_rewards {
            trans[t] = v;
        }
        let rw = RewardStructure { name: name.to_string(), state, trans };
        rw.validate()?;
        Ok(rw)
    }

    fn validate(&self) -> Result<(), CheckError> {
        if self.state.iter().chain(&self.trans).any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(CheckError::Syntax(format!(
                "reward structure `{}` has a negative or non-finite entry",
                self.name
            )));
        }
        Ok(())
    }

    fn check_dims(&self, m: &PopulationModel) {
        assert_eq!(self.state.len(), m.n_states(), "state reward dimension mismatch");
        assert_eq!(self.trans.len(), m.transitions.len(), "transition reward dimension mismatch");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardResultKind {
    Cumulative,
    Instantaneous,
    Steady,
    Reachability,
}

impl fmt::Display for RewardResultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RewardResultKind::Cumulative => "cumulative",
            RewardResultKind::Instantaneous => "instantaneous",
            RewardResultKind::Steady => "steady",
            RewardResultKind::Reachability => "reachability",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RewardDiagnostics {
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_rhs: usize,
    /// Drift residual of the fluid equilibrium backing a steady-state query.
    pub steady_residual: Option<f64>,
    /// Time the equilibrium integration ran before convergence; a usable
    /// relaxation-time scale for the driving densities.
    pub relaxation_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RewardResult {
    pub kind: RewardResultKind,
    /// Nonnegative by construction from nonnegative structures.
    pub value: f64,
    pub horizon: Option<f64>,
    /// Absent for steady-state queries and distribution-started queries.
    pub initial_state: Option<usize>,
    pub diagnostics: RewardDiagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Cumulative rewards (joint integration)

/// Joint system [densities, probability row, accumulated reward]. The reward
/// rate is the state-reward expectation plus, per transition rule, the
/// impulse reward weighted by the agent's perceived jump rate; both reuse the
/// generator's share entries so absorbing modifications silence accrual
/// automatically.
struct CumulativeSystem<'a> {
    drift: Drift,
    gen: &'a AgentGenerator,
    rw: &'a RewardStructure,
    n: usize,
    q: Vec<f64>,
    scratch: Vec<f64>,
}

impl OdeSystem for CumulativeSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.n + 1
    }

    // The reward scalar is slaved quadrature: excluded from step control so
    // scaling a structure cannot perturb the step sequence.
    fn controlled_dim(&self) -> usize {
        2 * self.n
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError> {
        let n = self.n;
        let (x, rest) = y.split_at(n);
        let p = &rest[..n];
        let (dx, drest) = dydt.split_at_mut(n);
        self.drift.eval(x, dx)?;
        self.gen.eval_into(x, &mut self.q, &mut self.scratch)?;
        row_times_generator(p, &self.q, n, 1, &mut drest[..n]);

        let mut rate = 0.0;
        for (s, &rs) in self.rw.state.iter().enumerate() {
            if rs != 0.0 {
                rate += rs * p[s];
            }
        }
        let gen = self.gen;
        for e in gen.entries() {
            let rt = self.rw.trans[e.trans];
            if rt != 0.0 {
                let g = gen.share_at(e, x, &mut self.scratch)?;
                if g != 0.0 {
                    rate += rt * g * p[e.src];
                }
            }
        }
        drest[n] = rate;
        Ok(())
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> Result<bool, NumericError> {
        let n = self.n;
        let (x, rest) = y.split_at_mut(n);
        let changed_x = project_simplex(x)?;
        let changed_p = normalize_row(&mut rest[..n], 1.0);
        Ok(changed_x | changed_p)
    }
}

struct CumulativeRun {
    n: usize,
    sol: DenseSolution,
}

impl CumulativeRun {
    fn value(&self) -> f64 {
        self.sol.y_end()[2 * self.n]
    }

    fn reward_at(&self, t: f64) -> f64 {
        let mut y = vec![0.0; self.sol.dim()];
        self.sol.eval(t, &mut y);
        y[2 * self.n]
    }

    fn diagnostics(&self) -> RewardDiagnostics {
        RewardDiagnostics {
            n_accepted: self.sol.n_accepted,
            n_rejected: self.sol.n_rejected,
            n_rhs: self.sol.n_rhs,
            ..Default::default()
        }
    }
}

fn cumulative_solution(
    m: &PopulationModel,
    gen: &AgentGenerator,
    rw: &RewardStructure,
    p0: &[f64],
    t: f64,
) -> Result<CumulativeRun, CheckError> {
    let n = m.n_states();
    assert_eq!(p0.len(), n, "initial distribution dimension mismatch");
    if !(t.is_finite() && t >= 0.0) {
        return Err(CheckError::Syntax(format!("horizon {t} must be finite and nonnegative")));
    }
    let total: f64 = p0.iter().sum();
    if p0.iter().any(|&v| !(v.is_finite() && v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(CheckError::Syntax(
            "initial distribution must be nonnegative and sum to 1".into(),
        ));
    }
    let mut y0 = m.init_density.clone();
    y0.extend_from_slice(p0);
    y0.push(0.0);
    let mut sys = CumulativeSystem {
        drift: Drift::new(m),
        gen,
        rw,
        n,
        q: vec![0.0; n * n],
        scratch: gen.new_scratch(),
    };
    let sol = integrate(&mut sys, 0.0, t, &y0, &OdeOptions::default())?;
    Ok(CumulativeRun { n, sol })
}

/// Expected reward accumulated over `[0, T]` from the initial distribution
/// `p0`: state rewards integrate against the occupancy probabilities, and
/// each transition impulse accrues at the agent's perceived jump rate.
pub fn cumulative_reward_dist(
    m: &PopulationModel,
    rw: &RewardStructure,
    p0: &[f64],
    t: f64,
) -> Result<RewardResult, CheckError> {
    rw.check_dims(m);
    rw.validate()?;
    let gen = agent_generator(m)?;
    let run = cumulative_solution(m, &gen, rw, p0, t)?;
    Ok(RewardResult {
        kind: RewardResultKind::Cumulative,
        value: run.value().max(0.0),
        horizon: Some(t),
        initial_state: None,
        diagnostics: run.diagnostics(),
    })
}

/// Cumulative reward started deterministically from state `s`.
pub fn cumulative_reward(
    m: &PopulationModel,
    rw: &RewardStructure,
    s: usize,
    t: f64,
) -> Result<RewardResult, CheckError> {
    assert!(s < m.n_states(), "state index out of range");
    let mut r = cumulative_reward_dist(m, rw, &delta_row(m.n_states(), s), t)?;
    r.initial_state = Some(s);
    Ok(r)
}

fn checked_grid(grid: &[f64]) -> Result<f64, CheckError> {
    if grid.is_empty() {
        return Err(CheckError::Syntax("evaluation grid is empty".into()));
    }
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[1] < w[0])
    {
        return Err(CheckError::Syntax(
            "evaluation grid must be nonnegative, finite, and nondecreasing".into(),
        ));
    }
    Ok(*grid.last().unwrap())
}

/// Cumulative reward from state `s` read off at every grid time, one joint
/// integration to the final horizon.
pub fn cumulative_reward_curve(
    m: &PopulationModel,
    rw: &RewardStructure,
    s: usize,
    grid: &[f64],
) -> Result<Vec<f64>, CheckError> {
    rw.check_dims(m);
    rw.validate()?;
    assert!(s < m.n_states(), "state index out of range");
    let t_max = checked_grid(grid)?;
    let gen = agent_generator(m)?;
    let run = cumulative_solution(m, &gen, rw, &delta_row(m.n_states(), s), t_max)?;
    Ok(grid.iter().map(|&t| run.reward_at(t).max(0.0)).collect())
}

/// Reach-bounded reward curve on a grid, as `reachability_reward` per point.
pub fn reachability_reward_curve(
    m: &PopulationModel,
    rw: &RewardStructure,
    goal: &[bool],
    s: usize,
    grid: &[f64],
) -> Result<Vec<f64>, CheckError> {
    let n = m.n_states();
    rw.check_dims(m);
    rw.validate()?;
    assert_eq!(goal.len(), n, "goal mask dimension mismatch");
    assert!(s < n, "state index out of range");
    let t_max = checked_grid(grid)?;
    let gen_abs = absorbing_modification(&agent_generator(m)?, goal);
    let mut rw_mod = rw.clone();
    for (v, &g) in rw_mod.state.iter_mut().zip(goal) {
        if g {
            *v = 0.0;
        }
    }
    let run = cumulative_solution(m, &gen_abs, &rw_mod, &delta_row(n, s), t_max)?;
    Ok(grid.iter().map(|&t| run.reward_at(t).max(0.0)).collect())
}

// ---------------------------------------------------------------------------
// Instantaneous rewards

/// Expected state-reward rate at the time instant `T`, from distribution `p0`.
pub fn instantaneous_reward_dist(
    m: &PopulationModel,
    rw: &RewardStructure,
    p0: &[f64],
    t: f64,
) -> Result<RewardResult, CheckError> {
    rw.check_dims(m);
    rw.validate()?;
    let td = transient(m, p0, t)?;
    let value = dot(&rw.state, td.end_row(0)).max(0.0);
    let (n_accepted, n_rejected, n_rhs) = td.stats();
    Ok(RewardResult {
        kind: RewardResultKind::Instantaneous,
        value,
        horizon: Some(t),
        initial_state: None,
        diagnostics: RewardDiagnostics { n_accepted, n_rejected, n_rhs, ..Default::default() },
    })
}

/// Instantaneous reward started deterministically from state `s`.
pub fn instantaneous_reward(
    m: &PopulationModel,
    rw: &RewardStructure,
    s: usize,
    t: f64,
) -> Result<RewardResult, CheckError> {
    assert!(s < m.n_states(), "state index out of range");
    let mut r = instantaneous_reward_dist(m, rw, &delta_row(m.n_states(), s), t)?;
    r.initial_state = Some(s);
    Ok(r)
}

/// Instantaneous reward from state `s` at every grid time, one transient
/// integration to the final horizon.
pub fn instantaneous_reward_curve(
    m: &PopulationModel,
    rw: &RewardStructure,
    s: usize,
    grid: &[f64],
) -> Result<Vec<f64>, CheckError> {
    rw.check_dims(m);
    rw.validate()?;
    assert!(s < m.n_states(), "state index out of range");
    let t_max = checked_grid(grid)?;
    let td = transient(m, &delta_row(m.n_states(), s), t_max)?;
    Ok(grid.iter().map(|&t| dot(&rw.state, &td.row_at(0, t)).max(0.0)).collect())
}

// ---------------------------------------------------------------------------
// Steady-state rewards

/// Invariant measure of Q(x) restricted to the closed communicating classes
/// of its jump graph that are reachable from `support`. Exactly one such
/// class must exist; otherwise the measure is not unique and the query is
/// refused rather than averaged.
pub fn invariant_measure(
    gen: &AgentGenerator,
    x: &[f64],
    support: &[bool],
) -> Result<Vec<f64>, CheckError> {
    let n = gen.dim();
    assert_eq!(support.len(), n, "support mask dimension mismatch");
    let q = gen.eval_dense(x)?;

    // Reachability closure over the jump graph.
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
        for j in 0..n {
            if i != j && q[i][j] > 0.0 {
                reach[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }

    // Communicating classes; a class is closed when no edge leaves it.
    let mut class_of = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if class_of[i] != usize::MAX {
            continue;
        }
        let id = classes.len();
        let members: Vec<usize> = (i..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &members {
            class_of[j] = id;
        }
        classes.push(members);
    }
    let reachable_closed: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(id, members)| {
            let closed = members
                .iter()
                .all(|&i| (0..n).all(|j| q[i][j] <= 0.0 || class_of[j] == *id));
            let reachable = support
                .iter()
                .enumerate()
                .any(|(i, &live)| live && members.iter().any(|&j| reach[i][j]));
            closed && reachable
        })
        .map(|(id, _)| id)
        .collect();
    if reachable_closed.len() != 1 {
        return Err(NumericError::NonUniqueInvariantMeasure { classes: reachable_closed.len() }
            .into());
    }

    // pi Q = 0 on the class, with the last balance equation replaced by the
    // normalization sum(pi) = 1.
    let class = &classes[reachable_closed[0]];
    let k = class.len();
    let mut a = vec![vec![0.0; k]; k];
    for (col, &i) in class.iter().enumerate() {
        for (row, &j) in class.iter().enumerate() {
            a[row][col] = q[i][j];
        }
    }
    a[k - 1] = vec![1.0; k];
    let mut b = vec![0.0; k];
    b[k - 1] = 1.0;
    solve_dense(&mut a, &mut b)?;

    let mut pi = vec![0.0; n];
    let mut sum = 0.0;
    for (idx, &i) in class.iter().enumerate() {
        if b[idx] < -1e-9 {
            return Err(NumericError::LinearSolve(format!(
                "invariant measure has negative mass {:.3e}",
                b[idx]
            ))
            .into());
        }
        pi[i] = b[idx].max(0.0);
        sum += pi[i];
    }
    if sum <= 0.0 {
        return Err(NumericError::LinearSolve("invariant measure is degenerate".into()).into());
    }
    for v in &mut pi {
        *v /= sum;
    }
    Ok(pi)
}

/// Long-run average state-reward rate: the invariant measure of the agent
/// generator frozen at the fluid equilibrium, dotted with the state rewards.
pub fn steady_state_reward(
    m: &PopulationModel,
    rw: &RewardStructure,
) -> Result<RewardResult, CheckError> {
    rw.check_dims(m);
    rw.validate()?;
    let ss = steady_state(m, &SteadyOpts::default())?;
    let gen = agent_generator(m)?;
    let support: Vec<bool> = m.init_density.iter().map(|&v| v > 0.0).collect();
    let pi = invariant_measure(&gen, &ss.x, &support)?;
    Ok(RewardResult {
        kind: RewardResultKind::Steady,
        value: dot(&rw.state, &pi).max(0.0),
        horizon: None,
        initial_state: None,
        diagnostics: RewardDiagnostics {
            steady_residual: Some(ss.residual),
            relaxation_time: Some(ss.t_reached),
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------------------------
// Reachability rewards

/// Reward accumulated until the goal set is entered, capped at horizon `T`:
/// goal states become absorbing and their state rewards are zeroed, then the
/// cumulative computation runs on the modified process. Transition rewards on
/// edges out of the goal set never accrue because absorbing rows have zero
/// perceived rates.
pub fn reachability_reward(
    m: &PopulationModel,
    rw: &RewardStructure,
    goal: &[bool],
    s: usize,
    t: f64,
) -> Result<RewardResult, CheckError> {
    let n = m.n_states();
    rw.check_dims(m);
    rw.validate()?;
    assert_eq!(goal.len(), n, "goal mask dimension mismatch");
    assert!(s < n, "state index out of range");
    let gen = agent_generator(m)?;
    let gen_abs = absorbing_modification(&gen, goal);
    let mut rw_mod = rw.clone();
    for (v, &g) in rw_mod.state.iter_mut().zip(goal) {
        if g {
            *v = 0.0;
        }
    }
    let run = cumulative_solution(m, &gen_abs, &rw_mod, &delta_row(n, s), t)?;
    Ok(RewardResult {
        kind: RewardResultKind::Reachability,
        value: run.value().max(0.0),
        horizon: Some(t),
        initial_state: Some(s),
        diagnostics: run.diagnostics(),
    })
}

// ---------------------------------------------------------------------------
// Reward-operator satisfaction

/// Evaluates a reward formula from state `s` (ignored by steady-state
/// queries) and resolves its query mode. Returns the full result next to the
/// outcome so callers can report the value and diagnostics.
pub fn evaluate_reward_formula(
    m: &PopulationModel,
    f: &Formula,
    s: usize,
) -> Result<(RewardResult, CheckOutcome), CheckError> {
    let Formula::Reward { structure, query, kind } = f else {
        return Err(CheckError::Syntax("expected a reward formula".into()));
    };
    let rw = RewardStructure::from_model(m, structure)?;
    let result = match kind {
        RewardKind::Cumulative { t } => cumulative_reward(m, &rw, s, *t)?,
        RewardKind::Instantaneous { t } => instantaneous_reward(m, &rw, s, *t)?,
        RewardKind::Steady => steady_state_reward(m, &rw)?,
        RewardKind::Reach { t, goal } => {
            let mask = goal.sat(m)?;
            reachability_reward(m, &rw, &mask, s, *t)?
        }
    };
    let outcome = query.decide(result.value);
    Ok((result, outcome))
}

/// Truth (or value) of a reward formula from state `s`, with the shared
/// indeterminacy margin on threshold comparisons.
pub fn check_reward_formula(
    m: &PopulationModel,
    f: &Formula,
    s: usize,
) -> Result<CheckOutcome, CheckError> {
    Ok(evaluate_reward_formula(m, f, s)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csl::parse_formula;
    use crate::csl::transient_from_state;

    const BIKE_SRC: &str = include_str!("../../../assets/bike.model");
    const TWOSTATE_SRC: &str = include_str!("../../../assets/twostate.model");

    fn bike() -> PopulationModel {
        PopulationModel::parse(BIKE_SRC).unwrap()
    }

    fn two_state(k1: f64, k2: f64) -> PopulationModel {
        let src = TWOSTATE_SRC
            .replace("param k1 = 1.0", &format!("param k1 = {k1}"))
            .replace("param k2 = 1.0", &format!("param k2 = {k2}"));
        PopulationModel::parse(&src).unwrap()
    }

    fn constant_state_reward(m: &PopulationModel, c: f64) -> RewardStructure {
        RewardStructure {
            name: "const".into(),
            state: vec![c; m.n_states()],
            trans: vec![0.0; m.transitions.len()],
        }
    }

    #[test]
    fn densifies_declared_structures_with_zero_defaults() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let b = m.agent.index_of("b").unwrap();
        let ss = m.agent.index_of("ss").unwrap();
        for (i, &v) in cost.state.iter().enumerate() {
            let want = if i == b || i == ss { 1.0 } else { 0.0 };
            assert_eq!(v, want, "state {i}");
        }
        assert!(cost.trans.iter().all(|&v| v == 0.0));

        let diss = RewardStructure::from_model(&m, "diss").unwrap();
        assert!(diss.state.iter().all(|&v| v == 0.0));
        assert_eq!(diss.trans[m.transition_index("fail_acq2").unwrap()], 10.0);
        assert_eq!(diss.trans[m.transition_index("rejoin").unwrap()], 0.0);

        assert!(matches!(
            RewardStructure::from_model(&m, "fees"),
            Err(CheckError::UnknownReward(_))
        ));
    }

    #[test]
    fn constant_state_reward_is_flat_across_time_and_state() {
        let m = bike();
        let rw = constant_state_reward(&m, 0.7);
        for &t in &[0.0, 5.0, 50.0] {
            for &s in &[0usize, 3] {
                let r = instantaneous_reward(&m, &rw, s, t).unwrap();
                assert!((r.value - 0.7).abs() < 1e-9, "t={t} s={s}: {}", r.value);
            }
        }
    }

    #[test]
    fn two_state_instantaneous_matches_closed_form_transient() {
        // rho_s = (1, 0), unit rates, from on: value = (1 + e^{-2T}) / 2.
        let m = two_state(1.0, 1.0);
        let mut rw = constant_state_reward(&m, 0.0);
        rw.state[0] = 1.0;
        let r = instantaneous_reward(&m, &rw, 0, 1.0).unwrap();
        let want = 0.5 * (1.0 + (-2.0f64).exp());
        assert!((r.value - want).abs() < 1e-7, "{} vs {want}", r.value);
    }

    #[test]
    fn zero_state_rewards_give_zero_instantaneous_value() {
        // The diss structure is purely transition-based, so its state-reward
        // rate is identically zero at every instant.
        let m = bike();
        let diss = RewardStructure::from_model(&m, "diss").unwrap();
        let r = instantaneous_reward(&m, &diss, 0, 1000.0).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn constant_reward_rate_accumulates_linearly() {
        let m = bike();
        let rw = constant_state_reward(&m, 0.7);
        let t = 13.0;
        let r = cumulative_reward(&m, &rw, 2, t).unwrap();
        let want = 0.7 * t;
        assert!((r.value - want).abs() < 1e-9 * want, "{} vs {want}", r.value);
    }

    #[test]
    fn jump_count_expectation_matches_closed_form() {
        // Counting on->off jumps with unit rates from on:
        // E = int_0^T p_on(t) dt = T/2 + (1 - e^{-2T})/4.
        let m = two_state(1.0, 1.0);
        let mut rw = constant_state_reward(&m, 0.0);
        rw.trans[m.transition_index("go_off").unwrap()] = 1.0;
        for &t in &[1.0, 5.0] {
            let r = cumulative_reward(&m, &rw, 0, t).unwrap();
            let want = 0.5 * t + 0.25 * (1.0 - (-2.0 * t).exp());
            assert!((r.value - want).abs() < 1e-7, "T={t}: {} vs {want}", r.value);
        }
    }

    #[test]
    fn cumulative_reward_is_nondecreasing_along_the_mesh() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let gen = agent_generator(&m).unwrap();
        let run = cumulative_solution(&m, &gen, &cost, &delta_row(5, 0), 100.0).unwrap();
        let mut last = 0.0;
        for &t in &run.sol.mesh() {
            let v = run.reward_at(t);
            assert!(v >= last - 1e-10, "reward dropped at t={t}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn cumulative_equals_quadrature_of_instantaneous_without_impulses() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let t_max = 50.0;
        let v = cumulative_reward(&m, &cost, 0, t_max).unwrap().value;

        // Independent Simpson quadrature of the instantaneous rate on a
        // 10^4-interval grid.
        let td = transient_from_state(&m, 0, t_max).unwrap();
        let steps = 10_000usize;
        let h = t_max / steps as f64;
        let f = |t: f64| dot(&cost.state, &td.row_at(0, t));
        let mut integral = f(0.0) + f(t_max);
        for k in 1..steps {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * f(h * k as f64);
        }
        integral *= h / 3.0;
        let rel = (v - integral).abs() / integral.abs();
        assert!(rel < 1e-6, "{v} vs quadrature {integral} (rel {rel:.2e})");
    }

    #[test]
    fn scaling_a_structure_scales_every_reward_kind_exactly() {
        let m = bike();
        let mut rw = RewardStructure::from_model(&m, "cost").unwrap();
        rw.trans[m.transition_index("fail_acq").unwrap()] = 2.0;
        let c = 3.7;
        let scaled = RewardStructure {
            name: rw.name.clone(),
            state: rw.state.iter().map(|v| v * c).collect(),
            trans: rw.trans.iter().map(|v| v * c).collect(),
        };
        let goal = {
            let mut g = vec![false; 5];
            g[m.agent.index_of("d").unwrap()] = true;
            g
        };
        let pairs = [
            (
                cumulative_reward(&m, &rw, 0, 40.0).unwrap().value,
                cumulative_reward(&m, &scaled, 0, 40.0).unwrap().value,
            ),
            (
                instantaneous_reward(&m, &rw, 0, 40.0).unwrap().value,
                instantaneous_reward(&m, &scaled, 0, 40.0).unwrap().value,
            ),
            (
                steady_state_reward(&m, &rw).unwrap().value,
                steady_state_reward(&m, &scaled).unwrap().value,
            ),
            (
                reachability_reward(&m, &rw, &goal, 0, 40.0).unwrap().value,
                reachability_reward(&m, &scaled, &goal, 0, 40.0).unwrap().value,
            ),
        ];
        for (base, big) in pairs {
            assert!(base > 0.0);
            let rel = (big - c * base).abs() / (c * base);
            assert!(rel <= 1e-12, "scaling broke: {big} vs {} (rel {rel:.2e})", c * base);
        }
    }

    #[test]
    fn rewards_add_across_structures() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let diss = RewardStructure::from_model(&m, "diss").unwrap();
        let both = RewardStructure {
            name: "both".into(),
            state: cost.state.iter().zip(&diss.state).map(|(a, b)| a + b).collect(),
            trans: cost.trans.iter().zip(&diss.trans).map(|(a, b)| a + b).collect(),
        };
        let t = 40.0;
        let v1 = cumulative_reward(&m, &cost, 0, t).unwrap().value;
        let v2 = cumulative_reward(&m, &diss, 0, t).unwrap().value;
        let v12 = cumulative_reward(&m, &both, 0, t).unwrap().value;
        assert!((v12 - (v1 + v2)).abs() <= 1e-9 * v12, "{v12} vs {}", v1 + v2);
    }

    #[test]
    fn steady_reward_matches_balance_equations() {
        // Symmetric rates: pi = (1/2, 1/2); asymmetric k1=2, k2=1 drives
        // pi_on = k2/(k1+k2) = 1/3.
        let m = two_state(1.0, 1.0);
        let rw = RewardStructure::from_model(&m, "occ").unwrap();
        let r = steady_state_reward(&m, &rw).unwrap();
        assert!((r.value - 0.5).abs() < 1e-9, "{}", r.value);
        assert!(r.diagnostics.steady_residual.unwrap() < 1e-9);

        let m = two_state(2.0, 1.0);
        let rw = RewardStructure::from_model(&m, "occ").unwrap();
        let r = steady_state_reward(&m, &rw).unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn constant_reward_is_steady_regardless_of_the_measure() {
        let m = bike();
        let rw = constant_state_reward(&m, 2.2);
        let r = steady_state_reward(&m, &rw).unwrap();
        assert!((r.value - 2.2).abs() < 1e-12 * 2.2, "{}", r.value);
    }

    #[test]
    fn split_chain_refuses_a_single_invariant_measure() {
        let src = "model frozen\n\
                   states u, v\n\
                   param z = 0.0\n\
                   transition idle { rule u -> v; rate z * x_u; percap z }\n\
                   init x_u = 0.5\n\
                   init x_v = 0.5\n\
                   reward unit { state u = 1.0 }\n";
        let m = PopulationModel::parse(src).unwrap();
        let rw = RewardStructure::from_model(&m, "unit").unwrap();
        match steady_state_reward(&m, &rw) {
            Err(CheckError::Numeric(NumericError::NonUniqueInvariantMeasure { classes })) => {
                assert_eq!(classes, 2)
            }
            other => panic!("expected non-unique measure, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_component_is_excluded_from_the_measure() {
        // Same frozen chain but started entirely in u: the measure
        // concentrates on the only reachable class.
        let src = "model frozen\n\
                   states u, v\n\
                   param z = 0.0\n\
                   transition idle { rule u -> v; rate z * x_u; percap z }\n\
                   init x_u = 1.0\n\
                   reward unit { state u = 1.0 }\n";
        let m = PopulationModel::parse(src).unwrap();
        let rw = RewardStructure::from_model(&m, "unit").unwrap();
        let r = steady_state_reward(&m, &rw).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn absorbing_chain_concentrates_the_invariant_measure() {
        let src = "model sink\n\
                   states u, v\n\
                   param k = 1.0\n\
                   transition fall { rule u -> v; rate k * x_u; percap k }\n\
                   init x_u = 1.0\n\
                   reward tail { state u = 5.0; state v = 2.0 }\n";
        let m = PopulationModel::parse(src).unwrap();
        let rw = RewardStructure::from_model(&m, "tail").unwrap();
        let r = steady_state_reward(&m, &rw).unwrap();
        assert!((r.value - 2.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn instantaneous_reward_relaxes_to_the_steady_value() {
        let m = two_state(2.0, 1.0);
        let rw = RewardStructure::from_model(&m, "occ").unwrap();
        let steady = steady_state_reward(&m, &rw).unwrap();
        let t_relax = steady.diagnostics.relaxation_time.unwrap();
        assert!(t_relax > 0.0);
        let r = instantaneous_reward(&m, &rw, 0, 10.0 * t_relax).unwrap();
        assert!(
            (r.value - steady.value).abs() < 1e-3 * steady.value,
            "{} vs {}",
            r.value,
            steady.value
        );
    }

    #[test]
    fn absorbing_everywhere_accrues_nothing() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let r = reachability_reward(&m, &cost, &[true; 5], 0, 50.0).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn empty_goal_set_reduces_to_plain_cumulative_reward() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let reach = reachability_reward(&m, &cost, &[false; 5], 0, 30.0).unwrap();
        let cum = cumulative_reward(&m, &cost, 0, 30.0).unwrap();
        assert_eq!(reach.value, cum.value);
    }

    #[test]
    fn absorbing_a_state_can_only_lower_accumulated_reward() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let mut goal = vec![false; 5];
        goal[m.agent.index_of("d").unwrap()] = true;
        let reach = reachability_reward(&m, &cost, &goal, 0, 200.0).unwrap();
        let cum = cumulative_reward(&m, &cost, 0, 200.0).unwrap();
        assert!(reach.value <= cum.value + 1e-12, "{} vs {}", reach.value, cum.value);
        assert!(reach.value > 0.0);
    }

    #[test]
    fn grid_curves_agree_with_pointwise_evaluation() {
        let m = bike();
        let cost = RewardStructure::from_model(&m, "cost").unwrap();
        let grid = [0.0, 5.0, 20.0, 60.0];
        let cum = cumulative_reward_curve(&m, &cost, 0, &grid).unwrap();
        let inst = instantaneous_reward_curve(&m, &cost, 0, &grid).unwrap();
        assert_eq!(cum[0], 0.0);
        for (k, &t) in grid.iter().enumerate() {
            let vc = cumulative_reward(&m, &cost, 0, t).unwrap().value;
            let vi = instantaneous_reward(&m, &cost, 0, t).unwrap().value;
            assert!((cum[k] - vc).abs() <= 1e-7 * vc.max(1.0), "t={t}: {} vs {vc}", cum[k]);
            assert!((inst[k] - vi).abs() <= 1e-7, "t={t}: {} vs {vi}", inst[k]);
        }
        let goal = {
            let mut g = vec![false; 5];
            g[m.agent.index_of("d").unwrap()] = true;
            g
        };
        let reach = reachability_reward_curve(&m, &cost, &goal, 0, &grid).unwrap();
        let v = reachability_reward(&m, &cost, &goal, 0, 60.0).unwrap().value;
        assert!((reach[3] - v).abs() <= 1e-7 * v.max(1.0));
        assert!(matches!(
            cumulative_reward_curve(&m, &cost, 0, &[]),
            Err(CheckError::Syntax(_))
        ));
        assert!(matches!(
            cumulative_reward_curve(&m, &cost, 0, &[5.0, 1.0]),
            Err(CheckError::Syntax(_))
        ));
    }

    #[test]
    fn threshold_formulae_resolve_with_margin() {
        let m = bike();
        assert_eq!(
            check_reward_formula(&m, &parse_formula("R{cost}<=1e6 [ C<=10 ]", &m).unwrap(), 0)
                .unwrap(),
            CheckOutcome::True
        );
        assert_eq!(
            check_reward_formula(&m, &parse_formula("R{diss}>=0.1 [ I=5 ]", &m).unwrap(), 0)
                .unwrap(),
            CheckOutcome::False
        );
        let v = match check_reward_formula(
            &m,
            &parse_formula("R{cost}=? [ C<=10 ]", &m).unwrap(),
            0,
        )
        .unwrap()
        {
            CheckOutcome::Value(v) => v,
            other => panic!("expected a value, got {other:?}"),
        };
        assert!(v > 0.0);
        // A threshold within the tangency margin of the computed value is
        // reported indeterminate, never silently resolved.
        let text = format!("R{{cost}}<={} [ C<=10 ]", v + 5e-8);
        match check_reward_formula(&m, &parse_formula(&text, &m).unwrap(), 0).unwrap() {
            CheckOutcome::Indeterminate(got) => assert!((got - v).abs() < 1e-9),
            other => panic!("expected indeterminate, got {other:?}"),
        }
    }

    #[test]
    fn steady_formula_evaluates_through_the_query_interface() {
        let m = two_state(2.0, 1.0);
        let f = parse_formula("R{occ}=? [ S ]", &m).unwrap();
        let (result, outcome) = evaluate_reward_formula(&m, &f, 0).unwrap();
        assert_eq!(result.kind, RewardResultKind::Steady);
        match outcome {
            CheckOutcome::Value(v) => assert!((v - 1.0 / 3.0).abs() < 1e-9),
            other => panic!("expected a value, got {other:?}"),
        }
    }

    #[test]
    fn probability_formulae_are_rejected_by_the_reward_checker() {
        let m = bike();
        let f = parse_formula("P=? [ at_a U[0,1] at_d ]", &m).unwrap();
        assert!(matches!(
            check_reward_formula(&m, &f, 0),
            Err(CheckError::Syntax(_))
        ));
    }
}
