//! Exact event-by-event simulation of the counted population carrying one
//! tagged individual, ensemble estimators with confidence intervals, path
//! rewards, and a uniformization oracle for chains small enough to enumerate.

use crate::expr::Program;
use crate::model::{lattice_rate, update_vector, ModelError, PopulationModel, SparseGenerator};
use crate::ode::NumericError;
use crate::reward::RewardStructure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Population size N.
    pub n: u64,
    pub t_max: f64,
    pub runs: usize,
    pub seed: u64,
    /// Estimator output times, strictly increasing within [0, t_max].
    pub grid: Vec<f64>,
    /// Agent state index the tagged individual starts in.
    pub tag_initial: usize,
}

impl SimConfig {
    // Negated comparisons here are load-bearing: they reject NaN horizons
    // and NaN grid points along with out-of-order ones.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self, m: &PopulationModel) -> Result<(), ModelError> {
        if self.n < 1 {
            return Err(ModelError::Invalid { msg: "population size must be at least 1".into() });
        }
        if self.runs < 1 {
            return Err(ModelError::Invalid { msg: "replication count must be at least 1".into() });
        }
        if !(self.t_max >= 0.0) {
            return Err(ModelError::Invalid { msg: "time horizon must be nonnegative".into() });
        }
        for w in self.grid.windows(2) {
            if !(w[1] > w[0]) {
                return Err(ModelError::Invalid { msg: "grid must be strictly increasing".into() });
            }
        }
        if let (Some(&first), Some(&last)) = (self.grid.first(), self.grid.last()) {
            if first < 0.0 || last > self.t_max {
                return Err(ModelError::Invalid {
                    msg: format!("grid must lie within [0, {}]", self.t_max),
                });
            }
        }
        if self.tag_initial >= m.n_states() {
            return Err(ModelError::Invalid { msg: "tagged state index out of range".into() });
        }
        let counts = m.initial_counts(self.n);
        if counts[self.tag_initial] == 0 {
            return Err(ModelError::Invalid {
                msg: format!(
                    "tagged initial state `{}` holds no agents at N={}",
                    m.agent.name(self.tag_initial),
                    self.n
                ),
            });
        }
        Ok(())
    }
}

/// One tagged agent's piecewise-constant path. Entry 0 of `times`/`states` is
/// the initial condition; `trans[k]` is the transition that carried the jump
/// at `times[k+1]`.
#[derive(Debug, Clone)]
pub struct TaggedPath {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub trans: Vec<usize>,
    /// Tagged jump count per transition.
    pub jump_counts: Vec<u64>,
    pub t_max: f64,
}

impl TaggedPath {
    /// State occupied at `t` (right-continuous at jumps).
    pub fn state_at(&self, t: f64) -> usize {
        match self.times.partition_point(|&tt| tt <= t) {
            0 => self.states[0],
            k => self.states[k - 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathOutput {
    /// Population counts at each grid time.
    pub pop_on_grid: Vec<Vec<u64>>,
    pub tagged: TaggedPath,
    pub n_events: u64,
}

/// Per-path simulation machinery shared across replications: compiled rates,
/// update vectors, and per-source consumption requirements.
struct CompiledSim {
    n_states: usize,
    n_pop: f64,
    progs: Vec<Program>,
    names: Vec<String>,
    updates: Vec<Vec<i64>>,
    /// Agents each transition consumes per source state.
    outflow: Vec<Vec<(usize, u64)>>,
    /// (src, dst, mult) per rule, in declaration order.
    rules: Vec<Vec<(usize, usize, u64)>>,
    stack_need: usize,
}

impl CompiledSim {
    fn new(m: &PopulationModel, n_pop: u64) -> Result<Self, ModelError> {
        let n = m.n_states();
        // The tagged coupling assigns the moving agent per rule; that needs
        // unit multiplicities (see the model-level validator warning).
        for t in &m.transitions {
            for r in &t.rules {
                if r.mult > 1 {
                    return Err(ModelError::MultiplicityUnsupported { transition: t.name.clone() });
                }
            }
        }
        let progs: Vec<Program> = m
            .transitions
            .iter()
            .map(|t| Program::compile(&t.rate, &m.param_fn()).expect("identifiers resolved at parse"))
            .collect();
        let updates = m.transitions.iter().map(|t| update_vector(t, n)).collect();
        let outflow = m
            .transitions
            .iter()
            .map(|t| {
                let mut by_src: Vec<(usize, u64)> = Vec::new();
                for r in &t.rules {
                    match by_src.iter_mut().find(|(s, _)| *s == r.src) {
                        Some((_, c)) => *c += r.mult as u64,
                        None => by_src.push((r.src, r.mult as u64)),
                    }
                }
                by_src
            })
            .collect();
        let rules = m
            .transitions
            .iter()
            .map(|t| t.rules.iter().map(|r| (r.src, r.dst, r.mult as u64)).collect())
            .collect();
        let stack_need = progs.iter().map(|p| p.stack_need()).max().unwrap_or(0);
        Ok(CompiledSim {
            n_states: n,
            n_pop: n_pop as f64,
            progs,
            names: m.transitions.iter().map(|t| t.name.clone()).collect(),
            updates,
            outflow,
            rules,
            stack_need,
        })
    }
}

fn run_path(
    c: &CompiledSim,
    cfg: &SimConfig,
    counts0: &[u64],
    rep: u64,
) -> Result<PathOutput, NumericError> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);

    let n = c.n_states;
    let nt = c.progs.len();
    let inv_n = 1.0 / c.n_pop;
    let mut counts = counts0.to_vec();
    let mut x = vec![0.0f64; n];
    let mut a = vec![0.0f64; nt];
    let mut stack = vec![0.0f64; c.stack_need];
    let mut consumed = vec![0u64; n];

    let mut pop_on_grid: Vec<Vec<u64>> = vec![Vec::new(); cfg.grid.len()];
    let mut gi = 0usize;
    let mut t = 0.0f64;
    let mut n_events = 0u64;

    let mut tagged_state = cfg.tag_initial;
    let mut times = vec![0.0f64];
    let mut states = vec![tagged_state];
    let mut trans_log: Vec<usize> = Vec::new();
    let mut jump_counts = vec![0u64; nt];

    loop {
        for i in 0..n {
            x[i] = counts[i] as f64 * inv_n;
        }
        let mut total = 0.0;
        for ti in 0..nt {
            let enabled = c.outflow[ti].iter().all(|&(s, need)| counts[s] >= need);
            a[ti] = if enabled {
                c.n_pop * lattice_rate(c.progs[ti].eval(&x, &mut stack), &c.names[ti])?
            } else {
                0.0
            };
            total += a[ti];
        }
        if total <= 0.0 {
            break; // absorbing population state: hold to the horizon
        }

        let dt = -(1.0 - rng.gen::<f64>()).ln() / total;
        let t_next = t + dt;
        while gi < cfg.grid.len() && cfg.grid[gi] < t_next {
            pop_on_grid[gi] = counts.clone();
            gi += 1;
        }
        if t_next > cfg.t_max {
            break;
        }
        t = t_next;

        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        let mut last_pos = 0usize;
        for (j, &aj) in a.iter().enumerate() {
            if aj > 0.0 {
                last_pos = j;
                if u < aj {
                    chosen = Some(j);
                    break;
                }
                u -= aj;
            }
        }
        let ti = chosen.unwrap_or(last_pos);

        // Tagged coupling: each rule draws its moving agent uniformly from
        // the source pool left over by earlier rules of the same event, so
        // the tagged agent participates with probability mult / available.
        let mut moved = false;
        for &(src, dst, mult) in &c.rules[ti] {
            let avail = counts[src] - consumed[src];
            if !moved
                && tagged_state == src
                && avail > 0
                && rng.gen::<f64>() * (avail as f64) < mult as f64
            {
                tagged_state = dst;
                moved = true;
                jump_counts[ti] += 1;
                times.push(t);
                states.push(dst);
                trans_log.push(ti);
            }
            consumed[src] += mult;
        }
        for &(src, _, _) in &c.rules[ti] {
            consumed[src] = 0;
        }

        for (i, &d) in c.updates[ti].iter().enumerate() {
            let next = counts[i] as i64 + d;
            debug_assert!(next >= 0, "negative count after feasibility gate");
            counts[i] = next as u64;
        }
        n_events += 1;
    }
    while gi < cfg.grid.len() {
        pop_on_grid[gi] = counts.clone();
        gi += 1;
    }

    Ok(PathOutput {
        pop_on_grid,
        tagged: TaggedPath { times, states, trans: trans_log, jump_counts, t_max: cfg.t_max },
        n_events,
    })
}

/// One exact replication. For ensembles prefer the estimators, which compile
/// the model once and parallelize.
pub fn simulate_path(m: &PopulationModel, cfg: &SimConfig, rep: u64) -> Result<PathOutput, SimError> {
    cfg.check(m)?;
    let c = CompiledSim::new(m, cfg.n)?;
    let counts0 = m.initial_counts(cfg.n);
    Ok(run_path(&c, cfg, &counts0, rep)?)
}

/// Runs all replications in parallel, mapping each path through `f`; results
/// come back in replication order regardless of scheduling.
fn ensemble<T, F>(m: &PopulationModel, cfg: &SimConfig, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(PathOutput) -> T + Sync,
{
    cfg.check(m)?;
    let c = CompiledSim::new(m, cfg.n)?;
    let counts0 = m.initial_counts(cfg.n);
    let out: Result<Vec<T>, NumericError> = (0..cfg.runs)
        .into_par_iter()
        .map(|rep| run_path(&c, cfg, &counts0, rep as u64).map(&f))
        .collect();
    Ok(out?)
}

/// Grid-indexed ensemble mean with sample standard deviation and 95%
/// normal-approximation half-width. A single run has no spread estimate; its
/// half-width is reported as infinity.
#[derive(Debug, Clone)]
pub struct EnsembleEstimate {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub half_width: Vec<f64>,
    pub runs: usize,
}

impl EnsembleEstimate {
    /// Normal-approximation intervals are shaky under 30 runs; outputs flag it.
    pub fn low_run_count(&self) -> bool {
        self.runs < 30
    }

    fn from_samples(grid: Vec<f64>, samples: &[Vec<f64>]) -> EnsembleEstimate {
        let runs = samples.len();
        let g = grid.len();
        let mut mean = vec![0.0; g];
        for s in samples {
            for k in 0..g {
                mean[k] += s[k];
            }
        }
        for v in mean.iter_mut() {
            *v /= runs as f64;
        }
        let (sd, half_width) = if runs < 2 {
            (vec![f64::INFINITY; g], vec![f64::INFINITY; g])
        } else {
            let mut var = vec![0.0; g];
            for s in samples {
                for k in 0..g {
                    let d = s[k] - mean[k];
                    var[k] += d * d;
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| (v / (runs - 1) as f64).sqrt()).collect();
            let hw = sd.iter().map(|s| 1.96 * s / (runs as f64).sqrt()).collect();
            (sd, hw)
        };
        EnsembleEstimate { grid, mean, sd, half_width, runs }
    }

    fn from_bernoulli_counts(grid: Vec<f64>, ones: &[u64], runs: usize) -> EnsembleEstimate {
        let g = grid.len();
        let mut mean = vec![0.0; g];
        let mut sd = vec![0.0; g];
        let mut half_width = vec![0.0; g];
        for k in 0..g {
            let p = ones[k] as f64 / runs as f64;
            mean[k] = p;
            if runs < 2 {
                sd[k] = f64::INFINITY;
                half_width[k] = f64::INFINITY;
            } else {
                sd[k] = (p * (1.0 - p) * runs as f64 / (runs - 1) as f64).sqrt();
                half_width[k] = 1.96 * sd[k] / (runs as f64).sqrt();
            }
        }
        EnsembleEstimate { grid, mean, sd, half_width, runs }
    }
}

/// Tagged-state occupancy probabilities on the grid, one estimate per agent
/// state, all from the same replications.
pub fn estimate_state_probs(
    m: &PopulationModel,
    cfg: &SimConfig,
) -> Result<Vec<EnsembleEstimate>, SimError> {
    let n = m.n_states();
    let g = cfg.grid.len();
    let per_rep: Vec<Vec<usize>> = ensemble(m, cfg, |path| {
        cfg.grid.iter().map(|&t| path.tagged.state_at(t)).collect()
    })?;
    let mut ones = vec![vec![0u64; g]; n];
    for rep in &per_rep {
        for (k, &s) in rep.iter().enumerate() {
            ones[s][k] += 1;
        }
    }
    Ok(ones
        .into_iter()
        .map(|o| EnsembleEstimate::from_bernoulli_counts(cfg.grid.clone(), &o, cfg.runs))
        .collect())
}

#[derive(Debug, Clone)]
pub enum PathRewardKind {
    Cumulative,
    Instantaneous,
    /// Accumulation stops at the first entry into the marked states; the
    /// entering jump's impulse still counts, time spent inside does not.
    Reach(Vec<bool>),
}

/// Reward along one tagged path, evaluated at every grid time.
fn path_reward_on_grid(
    path: &TaggedPath,
    state_r: &[f64],
    trans_r: &[f64],
    kind: &PathRewardKind,
    grid: &[f64],
) -> Vec<f64> {
    match kind {
        PathRewardKind::Instantaneous => {
            grid.iter().map(|&t| state_r[path.state_at(t)]).collect()
        }
        PathRewardKind::Cumulative => accumulate_on_grid(path, state_r, trans_r, None, grid),
        PathRewardKind::Reach(mask) => accumulate_on_grid(path, state_r, trans_r, Some(mask), grid),
    }
}

fn accumulate_on_grid(
    path: &TaggedPath,
    state_r: &[f64],
    trans_r: &[f64],
    freeze_in: Option<&[bool]>,
    grid: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let mut acc = 0.0;
    let mut gi = 0usize;
    let mut frozen = false;
    let nseg = path.times.len();
    for k in 0..nseg {
        let seg_start = path.times[k];
        let seg_end = if k + 1 < nseg { path.times[k + 1] } else { path.t_max };
        let s = path.states[k];
        if let Some(mask) = freeze_in {
            if mask[s] {
                frozen = true;
            }
        }
        let rate = if frozen { 0.0 } else { state_r[s] };
        while gi < grid.len() && grid[gi] < seg_end {
            out[gi] = acc + rate * (grid[gi] - seg_start);
            gi += 1;
        }
        acc += rate * (seg_end - seg_start);
        if k + 1 < nseg && !frozen {
            acc += trans_r[path.trans[k]];
        }
    }
    while gi < grid.len() {
        out[gi] = acc;
        gi += 1;
    }
    out
}

/// Ensemble reward estimate on the grid: cumulative reward up to each grid
/// time, the instantaneous state reward at it, or the reach-bounded variant.
pub fn estimate_reward(
    m: &PopulationModel,
    rw: &RewardStructure,
    kind: &PathRewardKind,
    cfg: &SimConfig,
) -> Result<EnsembleEstimate, SimError> {
    if let PathRewardKind::Reach(mask) = kind {
        if mask.len() != m.n_states() {
            return Err(SimError::Model(ModelError::Invalid {
                msg: "reach mask length does not match the state count".into(),
            }));
        }
    }
    let samples: Vec<Vec<f64>> = ensemble(m, cfg, |path| {
        path_reward_on_grid(&path.tagged, &rw.state, &rw.trans, kind, &cfg.grid)
    })?;
    Ok(EnsembleEstimate::from_samples(cfg.grid.clone(), &samples))
}

/// Transient distribution p0·exp(Qt) by uniformization, truncating the
/// Poisson sum once its tail drops below 1e-12 (per segment; long horizons
/// are split so the Poisson mean stays under 700).
pub fn uniformization_transient(
    gen: &SparseGenerator,
    p0: &[f64],
    t: f64,
) -> Result<Vec<f64>, NumericError> {
    assert_eq!(p0.len(), gen.dim, "distribution length must match the generator");
    if t < 0.0 {
        return Err(NumericError::BackwardTime { t0: 0.0, t1: t });
    }
    let lam = gen.max_exit_rate();
    if t == 0.0 || lam == 0.0 {
        return Ok(p0.to_vec());
    }
    let segs = ((lam * t) / 700.0).ceil().max(1.0) as usize;
    let dt = t / segs as f64;
    let q = lam * dt;
    let k_cap = (q + 60.0 * q.sqrt() + 60.0) as usize;

    let dim = gen.dim;
    let mut p = p0.to_vec();
    let mut v = vec![0.0; dim];
    let mut vq = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    for _ in 0..segs {
        v.copy_from_slice(&p);
        let mut pois = (-q).exp();
        let mut cum = pois;
        for j in 0..dim {
            w[j] = pois * v[j];
        }
        let mut k = 0usize;
        while 1.0 - cum > 1e-12 && k < k_cap {
            k += 1;
            // v <- v (I + Q/lam)
            vq.fill(0.0);
            for (i, row) in gen.rows.iter().enumerate() {
                let vi = v[i];
                if vi != 0.0 {
                    for &(j, r) in row {
                        vq[j] += vi * r;
                    }
                    vq[i] += vi * gen.diag[i];
                }
            }
            for j in 0..dim {
                v[j] += vq[j] / lam;
            }
            pois *= q / k as f64;
            cum += pois;
            for j in 0..dim {
                w[j] += pois * v[j];
            }
        }
        p.copy_from_slice(&w);
    }
    Ok(p)
}
