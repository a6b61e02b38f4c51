//! The fluid limit: drift assembly, ODE trajectories, equilibria, and the
//! time-varying rate matrix of one tagged agent riding the fluid environment.

use crate::expr::Program;
use crate::model::{check_rate, update_vector, ModelError, PopulationModel};
use crate::ode::{integrate, DenseSolution, NumericError, OdeOptions, OdeSystem};

/// Compiled drift: sum over transitions of update vector times limit rate.
pub struct Drift {
    n: usize,
    rates: Vec<(String, Program)>,
    updates: Vec<Vec<f64>>,
    stack: Vec<f64>,
}

impl Drift {
    pub fn new(m: &PopulationModel) -> Self {
        let n = m.n_states();
        let rates: Vec<(String, Program)> = m
            .transitions
            .iter()
            .map(|t| {
                let prog = Program::compile(&t.rate, &m.param_fn())
                    .expect("identifiers resolved at parse");
                (t.name.clone(), prog)
            })
            .collect();
        let updates = m
            .transitions
            .iter()
            .map(|t| update_vector(t, n).into_iter().map(|v| v as f64).collect())
            .collect();
        let stack_need = rates.iter().map(|(_, p)| p.stack_need()).max().unwrap_or(0);
        Drift { n, rates, updates, stack: vec![0.0; stack_need] }
    }

    pub fn eval(&mut self, x: &[f64], out: &mut [f64]) -> Result<(), NumericError> {
        out.fill(0.0);
        for ((name, prog), update) in self.rates.iter().zip(&self.updates) {
            let r = check_rate(prog.eval(x, &mut self.stack), name)?;
            if r == 0.0 {
                continue;
            }
            for i in 0..self.n {
                out[i] += update[i] * r;
            }
        }
        Ok(())
    }

    pub fn sup_norm(&mut self, x: &[f64]) -> Result<f64, NumericError> {
        let mut f = vec![0.0; self.n];
        self.eval(x, &mut f)?;
        Ok(f.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

/// Instantaneous density change at `x`. Components sum to zero because every
/// update vector does.
pub fn drift(m: &PopulationModel, x: &[f64]) -> Result<Vec<f64>, NumericError> {
    let mut d = Drift::new(m);
    let mut out = vec![0.0; m.n_states()];
    d.eval(x, &mut out)?;
    Ok(out)
}

struct FluidSystem {
    drift: Drift,
}

impl OdeSystem for FluidSystem {
    fn dim(&self) -> usize {
        self.drift.n
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError> {
        self.drift.eval(y, dydt)
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> Result<bool, NumericError> {
        project_simplex(y)
    }
}

/// Clamp-and-renormalize onto the unit simplex, applied only beyond 1e-12
/// violation so the integrator's own error control stays in charge.
pub(crate) fn project_simplex(y: &mut [f64]) -> Result<bool, NumericError> {
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for &v in y.iter() {
        min = min.min(v);
        sum += v;
    }
    if min >= -1e-12 && (sum - 1.0).abs() <= 1e-12 {
        return Ok(false);
    }
    let mut s = 0.0;
    for v in y.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        s += *v;
    }
    if s <= 0.0 {
        return Err(NumericError::NonFiniteRate { transition: "(degenerate simplex state)".into() });
    }
    for v in y.iter_mut() {
        *v /= s;
    }
    Ok(true)
}

/// Dense-output fluid trajectory on `[0, t_max]`, queryable anywhere inside.
pub struct FluidTrajectory {
    names: Vec<String>,
    sol: DenseSolution,
}

impl FluidTrajectory {
    pub fn n_states(&self) -> usize {
        self.sol.dim()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn t_end(&self) -> f64 {
        self.sol.t_end()
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        self.sol.eval(t, out);
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states()];
        self.eval(t, &mut out);
        out
    }

    pub fn end(&self) -> &[f64] {
        self.sol.y_end()
    }

    pub fn mesh(&self) -> Vec<f64> {
        self.sol.mesh()
    }

    pub fn stats(&self) -> (usize, usize, usize) {
        (self.sol.n_accepted, self.sol.n_rejected, self.sol.n_rhs)
    }
}

/// Integrates the fluid ODE from the declared initial densities.
pub fn solve_fluid(
    m: &PopulationModel,
    t_max: f64,
    tol: Option<(f64, f64)>,
) -> Result<FluidTrajectory, NumericError> {
    let mut opts = OdeOptions::default();
    if let Some((rtol, atol)) = tol {
        opts.rtol = rtol;
        opts.atol = atol;
    }
    let mut sys = FluidSystem { drift: Drift::new(m) };
    let sol = integrate(&mut sys, 0.0, t_max, &m.init_density, &opts)?;
    Ok(FluidTrajectory { names: m.agent.names().to_vec(), sol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteadyMethod {
    IntegrateToEquilibrium,
    DampedNewton,
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub x: Vec<f64>,
    /// Sup norm of the drift at `x`.
    pub residual: f64,
    pub method: SteadyMethod,
    /// Time the forward integration had covered when the drift stayed small.
    pub t_reached: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SteadyOpts {
    pub residual_tol: f64,
    /// Drift must stay below tolerance over a window this long.
    pub window: f64,
    pub t_limit: f64,
}

impl Default for SteadyOpts {
    fn default() -> Self {
        SteadyOpts { residual_tol: 1e-9, window: 10.0, t_limit: 1e6 }
    }
}

/// Forward-integrates to the attractor, then polishes with damped Newton on
/// the sum-eliminated system. Existence and global attraction of the
/// equilibrium are assumed, not verified; reports carry that assumption.
pub fn steady_state(m: &PopulationModel, opts: &SteadyOpts) -> Result<SteadyState, NumericError> {
    let n = m.n_states();
    let mut sys = FluidSystem { drift: Drift::new(m) };
    let mut x = m.init_density.clone();
    let mut t = 0.0;
    let mut chunk = opts.window.max(1.0);
    let ode_opts = OdeOptions::default();

    let mut residual = sys.drift.sup_norm(&x)?;
    let mut method = SteadyMethod::IntegrateToEquilibrium;
    let mut prev_residual = f64::INFINITY;
    loop {
        if residual < opts.residual_tol {
            // Hold the candidate for a sustained window before accepting.
            let sol = integrate(&mut sys, t, t + opts.window, &x, &ode_opts)?;
            let mut probe = vec![0.0; n];
            let mut still = true;
            for k in 0..=8 {
                let tk = t + opts.window * k as f64 / 8.0;
                sol.eval(tk, &mut probe);
                if sys.drift.sup_norm(&probe)? >= opts.residual_tol {
                    still = false;
                    break;
                }
            }
            t += opts.window;
            x.copy_from_slice(sol.y_end());
            residual = sys.drift.sup_norm(&x)?;
            if still {
                break;
            }
        }
        // The integrator can plateau at its own accuracy floor just above the
        // tolerance; once the residual stops shrinking near the attractor, a
        // damped Newton step closes the remaining gap.
        if n > 1 && residual < 1e-6 && residual > 0.25 * prev_residual {
            if let Some(polished) = newton_polish(&mut sys.drift, &x)? {
                let r = sys.drift.sup_norm(&polished)?;
                if r < opts.residual_tol {
                    x = polished;
                    residual = r;
                    method = SteadyMethod::DampedNewton;
                    break;
                }
            }
        }
        if t >= opts.t_limit {
            return Err(NumericError::NoConvergence { t_limit: opts.t_limit, residual });
        }
        let sol = integrate(&mut sys, t, t + chunk, &x, &ode_opts)?;
        t += chunk;
        prev_residual = residual;
        x.copy_from_slice(sol.y_end());
        residual = sys.drift.sup_norm(&x)?;
        chunk = (chunk * 2.0).min(1e5).min((opts.t_limit - t).max(opts.window));
    }

    let t_reached = t;
    if n > 1 && residual > 1e-15 {
        if let Some(polished) = newton_polish(&mut sys.drift, &x)? {
            let r = sys.drift.sup_norm(&polished)?;
            if r < residual {
                x = polished;
                residual = r;
                method = SteadyMethod::DampedNewton;
            }
        }
    }
    Ok(SteadyState { x, residual, method, t_reached })
}

/// Newton iteration on F(x)=0 with the last coordinate eliminated through the
/// simplex constraint. Returns None when the Jacobian is too ill-conditioned
/// to improve the point.
fn newton_polish(drift: &mut Drift, x0: &[f64]) -> Result<Option<Vec<f64>>, NumericError> {
    let n = x0.len();
    let m = n - 1;
    let expand = |u: &[f64]| -> Vec<f64> {
        let mut x: Vec<f64> = u.to_vec();
        let s: f64 = u.iter().sum();
        x.push(1.0 - s);
        x
    };
    let mut u: Vec<f64> = x0[..m].to_vec();
    let mut g = vec![0.0; n];
    let mut best_norm = {
        drift.eval(&expand(&u), &mut g)?;
        g[..m].iter().fold(0.0f64, |a, v| a.max(v.abs()))
    };

    for _ in 0..50 {
        if best_norm < 1e-14 {
            break;
        }
        drift.eval(&expand(&u), &mut g)?;
        let gm: Vec<f64> = g[..m].to_vec();
        // Central-difference Jacobian of the reduced drift.
        let mut jac = vec![vec![0.0; m]; m];
        let mut gp = vec![0.0; n];
        let mut gn = vec![0.0; n];
        for j in 0..m {
            let h = 1e-7 * u[j].abs().max(1e-3);
            let mut up = u.clone();
            up[j] += h;
            let mut un = u.clone();
            un[j] -= h;
            if drift.eval(&expand(&up), &mut gp).is_err() || drift.eval(&expand(&un), &mut gn).is_err() {
                return Ok(None);
            }
            for i in 0..m {
                jac[i][j] = (gp[i] - gn[i]) / (2.0 * h);
            }
        }
        let mut rhs: Vec<f64> = gm.iter().map(|v| -v).collect();
        if solve_dense(&mut jac, &mut rhs).is_err() {
            return Ok(None);
        }
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = u.iter().zip(&rhs).map(|(&ui, &di)| ui + lambda * di).collect();
            let xt = expand(&trial);
            if xt.iter().all(|&v| v >= -1e-9) && drift.eval(&xt, &mut g).is_ok() {
                let norm = g[..m].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if norm < best_norm {
                    u = trial;
                    best_norm = norm;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let mut x = expand(&u);
    project_simplex(&mut x)?;
    Ok(Some(x))
}

/// Dense LU solve with partial pivoting; `a` and `b` are consumed.
pub(crate) fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<(), NumericError> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        let mut max = a[col][col].abs();
        for row in col + 1..n {
            if a[row][col].abs() > max {
                max = a[row][col].abs();
                piv = row;
            }
        }
        if max < 1e-300 {
            return Err(NumericError::LinearSolve(format!("singular pivot in column {col}")));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * b[k];
        }
        b[col] = v / a[col][col];
    }
    Ok(())
}

/// The tagged agent's rate matrix Q(x): entry (i,j) sums, over transitions
/// with a rule i -> j, the per-agent share of the collective rate. Shares use
/// the declared per-capita form when available, otherwise rate/density with
/// an epsilon guard against empty states.
#[derive(Debug, Clone)]
pub struct AgentGenerator {
    n: usize,
    entries: Vec<ShareEntry>,
    absorbing: Vec<bool>,
    stack_need: usize,
}

#[derive(Debug, Clone)]
pub struct ShareEntry {
    pub trans: usize,
    pub trans_name: String,
    pub src: usize,
    pub dst: usize,
    share: ShareKind,
}

#[derive(Debug, Clone)]
enum ShareKind {
    Percap(Program),
    /// Collective rate divided by source density, guarded below by epsilon.
    Guarded(Program),
}

pub const SHARE_EPS: f64 = 1e-9;

pub fn agent_generator(m: &PopulationModel) -> Result<AgentGenerator, ModelError> {
    let n = m.n_states();
    let mut entries = Vec::new();
    for (ti, t) in m.transitions.iter().enumerate() {
        for r in &t.rules {
            if r.mult > 1 {
                return Err(ModelError::MultiplicityUnsupported { transition: t.name.clone() });
            }
        }
        let percap_ok = t.rules.len() == 1;
        for r in &t.rules {
            let share = match (&t.percap, percap_ok) {
                (Some(p), true) => ShareKind::Percap(
                    Program::compile(p, &m.param_fn()).expect("identifiers resolved at parse"),
                ),
                _ => ShareKind::Guarded(
                    Program::compile(&t.rate, &m.param_fn()).expect("identifiers resolved at parse"),
                ),
            };
            entries.push(ShareEntry {
                trans: ti,
                trans_name: t.name.clone(),
                src: r.src,
                dst: r.dst,
                share,
            });
        }
    }
    let stack_need = entries
        .iter()
        .map(|e| match &e.share {
            ShareKind::Percap(p) | ShareKind::Guarded(p) => p.stack_need(),
        })
        .max()
        .unwrap_or(0);
    Ok(AgentGenerator { n, entries, absorbing: vec![false; n], stack_need })
}

impl AgentGenerator {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[ShareEntry] {
        &self.entries
    }

    pub fn absorbing(&self) -> &[bool] {
        &self.absorbing
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        self.absorbing[state]
    }

    /// Copy of this generator with the given states' rows zeroed.
    pub fn with_absorbing(&self, absorb: &[usize]) -> AgentGenerator {
        let mut absorbing = self.absorbing.clone();
        for &s in absorb {
            absorbing[s] = true;
        }
        AgentGenerator {
            n: self.n,
            entries: self
                .entries
                .iter()
                .map(|e| ShareEntry {
                    trans: e.trans,
                    trans_name: e.trans_name.clone(),
                    src: e.src,
                    dst: e.dst,
                    share: match &e.share {
                        ShareKind::Percap(p) => ShareKind::Percap(p.clone()),
                        ShareKind::Guarded(p) => ShareKind::Guarded(p.clone()),
                    },
                })
                .collect(),
            absorbing,
            stack_need: self.stack_need,
        }
    }

    pub fn new_scratch(&self) -> Vec<f64> {
        vec![0.0; self.stack_need]
    }

    /// Per-entry share value at densities `x`.
    pub fn share_at(
        &self,
        entry: &ShareEntry,
        x: &[f64],
        scratch: &mut [f64],
    ) -> Result<f64, NumericError> {
        if self.absorbing[entry.src] {
            return Ok(0.0);
        }
        let v = match &entry.share {
            ShareKind::Percap(p) => p.eval(x, scratch),
            ShareKind::Guarded(p) => p.eval(x, scratch) / x[entry.src].max(SHARE_EPS),
        };
        check_rate(v, &entry.trans_name)
    }

    /// Fills `q` (row-major n*n) with Q(x); rows sum to zero.
    pub fn eval_into(&self, x: &[f64], q: &mut [f64], scratch: &mut [f64]) -> Result<(), NumericError> {
        let n = self.n;
        q.fill(0.0);
        for e in &self.entries {
            let g = self.share_at(e, x, scratch)?;
            if g != 0.0 {
                q[e.src * n + e.dst] += g;
            }
        }
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                if j != i {
                    sum += q[i * n + j];
                }
            }
            q[i * n + i] = -sum;
        }
        Ok(())
    }

    pub fn eval_dense(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, NumericError> {
        let mut q = vec![0.0; self.n * self.n];
        let mut scratch = self.new_scratch();
        self.eval_into(x, &mut q, &mut scratch)?;
        Ok((0..self.n).map(|i| q[i * self.n..(i + 1) * self.n].to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BIKE_SRC: &str = include_str!("../../../assets/bike.model");
    const TWOSTATE_SRC: &str = include_str!("../../../assets/twostate.model");

    fn bike() -> PopulationModel {
        PopulationModel::parse(BIKE_SRC).unwrap()
    }

    fn two_state(k1: f64, k2: f64) -> PopulationModel {
        let text = TWOSTATE_SRC
            .replace("param k1 = 1.0", &format!("param k1 = {k1:?}"))
            .replace("param k2 = 1.0", &format!("param k2 = {k2:?}"));
        PopulationModel::parse(&text).unwrap()
    }

    #[test]
    fn bike_drift_at_start() {
        let d = drift(&bike(), &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = [-0.25, 0.25, 0.0, 0.0, 0.0];
        for (a, b) in d.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn empty_model_has_zero_drift() {
        let m = PopulationModel::parse("model m\nstates a, b\ninit x_a = 1.0\n").unwrap();
        assert_eq!(drift(&m, &[0.3, 0.7]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn balanced_two_state_drift_vanishes() {
        let d = drift(&two_state(1.0, 1.0), &[0.5, 0.5]).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn drift_components_sum_to_zero() {
        let m = bike();
        for x in crate::model::quasi_random_simplex(5, 50) {
            // Clamp capacity guards into validity before evaluating: bikes in
            // circulation (b + ss) may not exceed the bike fraction 1/3.
            let mut y = x.clone();
            let busy = y[1] + y[3];
            let cap = 0.3;
            if busy > cap {
                let scale = cap / busy;
                y[0] += busy - cap;
                y[1] *= scale;
                y[3] *= scale;
            }
            let d = drift(&m, &y).unwrap();
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn two_state_transient_closed_form() {
        let traj = solve_fluid(&two_state(1.0, 1.0), 1.0, None).unwrap();
        let x = traj.at(1.0);
        let expect = 0.5 * (1.0 + (-2.0f64).exp());
        assert!((x[0] - expect).abs() < 1e-7, "{}", x[0]);
    }

    #[test]
    fn zero_drift_model_stays_put() {
        let m = PopulationModel::parse("model m\nstates a, b\ninit x_a = 0.25\ninit x_b = 0.75\n")
            .unwrap();
        let traj = solve_fluid(&m, 100.0, None).unwrap();
        assert_eq!(traj.at(50.0), vec![0.25, 0.75]);
    }

    #[test]
    fn bike_trajectory_stays_on_simplex() {
        let traj = solve_fluid(&bike(), 100.0, None).unwrap();
        let mut x = vec![0.0; 5];
        for k in 0..=1000 {
            traj.eval(0.1 * k as f64, &mut x);
            let sum: f64 = x.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8, "sum {sum} at t={}", 0.1 * k as f64);
            assert!(x.iter().all(|&v| v >= -1e-9), "{x:?}");
        }
    }

    #[test]
    fn halving_tolerance_moves_answer_less_than_coarse_tolerance() {
        let m = bike();
        let coarse = solve_fluid(&m, 200.0, Some((1e-6, 1e-8))).unwrap();
        let fine = solve_fluid(&m, 200.0, Some((5e-7, 5e-9))).unwrap();
        let (a, b) = (coarse.end(), fine.end());
        let dev = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(dev < 10.0 * 1e-6, "deviation {dev}");
    }

    #[test]
    fn symmetric_two_state_equilibrium() {
        let ss = steady_state(&two_state(1.0, 1.0), &SteadyOpts::default()).unwrap();
        assert!((ss.x[0] - 0.5).abs() < 1e-9 && (ss.x[1] - 0.5).abs() < 1e-9);
        assert!(ss.residual < 1e-12);
    }

    #[test]
    fn asymmetric_two_state_equilibrium() {
        let ss = steady_state(&two_state(2.0, 1.0), &SteadyOpts::default()).unwrap();
        assert!((ss.x[0] - 1.0 / 3.0).abs() < 1e-10, "{:?}", ss.x);
        assert!((ss.x[1] - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn bike_reaches_equilibrium() {
        let ss = steady_state(&bike(), &SteadyOpts::default()).unwrap();
        assert!(ss.residual < 1e-9, "residual {}", ss.residual);
        let sum: f64 = ss.x.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // The disaffected state drains slowly but is not absorbing; everything
        // stays strictly positive at equilibrium.
        assert!(ss.x.iter().all(|&v| v > 0.0), "{:?}", ss.x);
    }

    #[test]
    fn agent_generator_two_state_is_constant() {
        let m = two_state(1.5, 0.5);
        let gen = agent_generator(&m).unwrap();
        for x in [[0.9, 0.1], [0.2, 0.8]] {
            let q = gen.eval_dense(&x).unwrap();
            assert!((q[0][1] - 1.5).abs() < 1e-12);
            assert!((q[0][0] + 1.5).abs() < 1e-12);
            assert!((q[1][0] - 0.5).abs() < 1e-12);
            assert!((q[1][1] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn agent_generator_bike_share_matches_hand_value() {
        let m = bike();
        let gen = agent_generator(&m).unwrap();
        let x = [0.6, 0.2, 0.05, 0.05, 0.1];
        let q = gen.eval_dense(&x).unwrap();
        // Entry (a, b) is the per-agent acquisition rate k_acq * pbike.
        let b_frac = 1.0 / 3.0;
        let pbike = (b_frac - (x[1] + x[3])) / b_frac;
        assert!((q[0][1] - 0.25 * pbike).abs() < 1e-12);
        // Rows sum to zero.
        for row in &q {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rows_nonneg_offdiag_on_valid_points() {
        let m = bike();
        let gen = agent_generator(&m).unwrap();
        let traj = solve_fluid(&m, 200.0, None).unwrap();
        for k in 0..100 {
            let x = traj.at(2.0 * k as f64);
            let q = gen.eval_dense(&x).unwrap();
            for (i, row) in q.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if i != j {
                        assert!(v >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn absorbing_rows_are_zeroed() {
        let m = bike();
        let gen = agent_generator(&m).unwrap().with_absorbing(&[4]);
        let q = gen.eval_dense(&[0.6, 0.2, 0.05, 0.05, 0.1]).unwrap();
        assert!(q[4].iter().all(|&v| v == 0.0));
        // Other rows untouched.
        assert!(q[0][1] > 0.0);
    }

    #[test]
    fn state_with_no_exits_has_zero_row() {
        let m = PopulationModel::parse(
            "model m\nstates a, b\nparam k = 1.0\n\
             transition t { rule a -> b; rate k * x_a; percap k }\ninit x_a = 1.0\n",
        )
        .unwrap();
        let gen = agent_generator(&m).unwrap();
        let q = gen.eval_dense(&[0.5, 0.5]).unwrap();
        assert_eq!(q[1], vec![0.0, 0.0]);
    }

    #[test]
    fn multiplicity_rejects_tagged_generator() {
        let m = PopulationModel::parse(
            "model m\nstates a, b\nparam k = 1.0\n\
             transition t { rule a -> b * 2; rate k * x_a }\ninit x_a = 1.0\n",
        )
        .unwrap();
        match agent_generator(&m) {
            Err(ModelError::MultiplicityUnsupported { transition }) => assert_eq!(transition, "t"),
            other => panic!("expected MultiplicityUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn guarded_share_falls_back_to_rate_over_density() {
        // No percap declared: share = k*x_a / x_a = k on the interior.
        let m = PopulationModel::parse(
            "model m\nstates a, b\nparam k = 2.0\n\
             transition t { rule a -> b; rate k * x_a }\ninit x_a = 1.0\n",
        )
        .unwrap();
        let gen = agent_generator(&m).unwrap();
        let q = gen.eval_dense(&[0.4, 0.6]).unwrap();
        assert!((q[0][1] - 2.0).abs() < 1e-12);
        // At zero density the guard keeps the share finite.
        let q0 = gen.eval_dense(&[0.0, 1.0]).unwrap();
        assert!(q0[0][1].is_finite());
    }

    #[test]
    fn linear_solver_solves_small_system() {
        let mut a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let mut b = vec![5.0, 10.0];
        solve_dense(&mut a, &mut b).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12);
    }
}
