//! Adaptive explicit Runge-Kutta 5(4) integration with quartic dense output.
//!
//! The integrator was chosen for non-stiff population ODEs: error control via
//! the embedded 4th-order solution, first-same-as-last stage reuse, and a
//! dense interpolant accurate to the method order so trajectories can be
//! queried at arbitrary times. Stiffness shows up as step-size underflow, it
//! is not handled.

/// Numeric failures shared by every analysis in the crate.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum NumericError {
    #[error("step size underflow at t={t:.6e} (h={h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("exceeded {0} integration steps")]
    MaxStepsExceeded(usize),
    #[error("integration target t1={t1} precedes t0={t0}")]
    BackwardTime { t0: f64, t1: f64 },
    #[error("negative rate on transition `{transition}`: {value:.6e}")]
    NegativeRate { transition: String, value: f64 },
    #[error("non-finite rate on transition `{transition}`")]
    NonFiniteRate { transition: String },
    #[error("no convergence to equilibrium by t={t_limit:.3e} (residual {residual:.3e})")]
    NoConvergence { t_limit: f64, residual: f64 },
    #[error("invariant measure not unique: {classes} closed recurrent classes")]
    NonUniqueInvariantMeasure { classes: usize },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
}

pub trait OdeSystem {
    fn dim(&self) -> usize;
    /// Leading components included in step-error control. Components beyond
    /// this index ride through the same stages uncontrolled; meant for slaved
    /// quadrature variables whose magnitude must not steer the step sequence
    /// of the components that drive them.
    fn controlled_dim(&self) -> usize {
        self.dim()
    }
    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<(), NumericError>;
    /// Applied to each accepted step endpoint; returns whether `y` changed.
    /// Used to pin trajectories to invariant manifolds (simplex, row sums).
    fn project(&mut self, _t: f64, _y: &mut [f64]) -> Result<bool, NumericError> {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-8, atol: 1e-10, h_init: None, max_steps: 4_000_000 }
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Embedded error coefficients (5th order minus 4th order weights).
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output weights for the quartic interpolant's top coefficient.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step's interpolation data: a degree-4 polynomial in the
/// normalized step coordinate, exact at both endpoints and endpoint slopes.
#[derive(Debug, Clone)]
struct StepInterp {
    t0: f64,
    h: f64,
    c: [Vec<f64>; 5],
}

impl StepInterp {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let th = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - th;
        for i in 0..out.len() {
            out[i] = self.c[0][i]
                + th * (self.c[1][i] + th1 * (self.c[2][i] + th * (self.c[3][i] + th1 * self.c[4][i])));
        }
    }
}

/// Continuously evaluable solution on `[t_start, t_end]`.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    t_start: f64,
    t_end: f64,
    dim: usize,
    y_start: Vec<f64>,
    y_end: Vec<f64>,
    steps: Vec<StepInterp>,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_rhs: usize,
}

impl DenseSolution {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y_end(&self) -> &[f64] {
        &self.y_end
    }

    /// Evaluates the solution at `t`, clamped into the covered interval.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        if self.steps.is_empty() {
            out.copy_from_slice(&self.y_end);
            return;
        }
        if t >= self.t_end {
            out.copy_from_slice(&self.y_end);
            return;
        }
        if t <= self.t_start {
            out.copy_from_slice(&self.y_start);
            return;
        }
        let idx = self.steps.partition_point(|s| s.t0 <= t).saturating_sub(1);
        self.steps[idx].eval(t, out);
    }

    /// Accepted step boundaries, including both interval endpoints.
    pub fn mesh(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.steps.iter().map(|s| s.t0).collect();
        ts.push(self.t_end);
        ts
    }
}

struct Work {
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
}

/// Integrates `sys` from `(t0, y0)` to `t1`. Stage evaluations may fail off
/// the feasible region (explicit stages can overshoot it); such failures
/// reject the step and retry smaller rather than aborting, except at already
/// accepted points where they are genuine model errors.
pub fn integrate<S: OdeSystem>(
    sys: &mut S,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &OdeOptions,
) -> Result<DenseSolution, NumericError> {
    let n = sys.dim();
    assert_eq!(y0.len(), n, "initial state dimension mismatch");
    if t1 < t0 {
        return Err(NumericError::BackwardTime { t0, t1 });
    }
    let mut sol = DenseSolution {
        t_start: t0,
        t_end: t1,
        dim: n,
        y_start: y0.to_vec(),
        y_end: y0.to_vec(),
        steps: Vec::new(),
        n_accepted: 0,
        n_rejected: 0,
        n_rhs: 0,
    };
    if t1 == t0 {
        return Ok(sol);
    }

    let mut w = Work {
        k: std::array::from_fn(|_| vec![0.0; n]),
        y_stage: vec![0.0; n],
        y_new: vec![0.0; n],
    };
    let mut y = y0.to_vec();
    let mut t = t0;

    // First slope; a failure here is a model error at the initial condition.
    sys.rhs(t, &y, &mut w.k[0])?;
    sol.n_rhs += 1;

    let mut h = match opts.h_init {
        Some(h) => h.min(t1 - t0),
        None => initial_step(sys, t, &y, &w.k[0], t1 - t0, opts, &mut sol.n_rhs)?,
    };

    let mut facmax = 5.0;
    loop {
        if sol.n_accepted + sol.n_rejected > opts.max_steps {
            return Err(NumericError::MaxStepsExceeded(opts.max_steps));
        }
        if t + h > t1 {
            h = t1 - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(NumericError::StepSizeUnderflow { t, h, state: y.clone() });
        }

        match try_step(sys, t, &y, h, &mut w, opts, &mut sol.n_rhs) {
            Ok(err) => {
                if err <= 1.0 {
                    // Accept: build the interpolant before projection so the
                    // polynomial matches the raw step; projection only nudges
                    // the stored endpoint within tolerance.
                    let mut c: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
                    for i in 0..n {
                        let dy = w.y_new[i] - y[i];
                        let bspl = h * w.k[0][i] - dy;
                        c[0][i] = y[i];
                        c[1][i] = dy;
                        c[2][i] = bspl;
                        c[3][i] = dy - h * w.k[6][i] - bspl;
                        c[4][i] = h
                            * (D1 * w.k[0][i]
                                + D3 * w.k[2][i]
                                + D4 * w.k[3][i]
                                + D5 * w.k[4][i]
                                + D6 * w.k[5][i]
                                + D7 * w.k[6][i]);
                    }
                    sol.steps.push(StepInterp { t0: t, h, c });
                    t += h;
                    y.copy_from_slice(&w.y_new);
                    let changed = sys.project(t, &mut y)?;
                    if changed {
                        // Re-anchor the first-same-as-last slope at the
                        // projected point; failures here are genuine.
                        sys.rhs(t, &y, &mut w.k[0])?;
                        sol.n_rhs += 1;
                    } else {
                        w.k.swap(0, 6);
                    }
                    sol.n_accepted += 1;
                    if t >= t1 - 1e-14 * t1.abs().max(1.0) {
                        sol.y_end.copy_from_slice(&y);
                        sol.t_end = t;
                        return Ok(sol);
                    }
                    let fac = (0.9 * err.powf(-0.2)).clamp(0.2, facmax);
                    h *= fac;
                    facmax = 5.0;
                } else {
                    sol.n_rejected += 1;
                    let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                    h *= fac;
                    facmax = 1.0;
                }
            }
            Err(StepFailure::Stage) => {
                // Overshot the feasible region mid-step: retry smaller.
                sol.n_rejected += 1;
                h *= 0.25;
                facmax = 1.0;
            }
            Err(StepFailure::Fatal(e)) => return Err(e),
        }
    }
}

enum StepFailure {
    /// A stage left the domain where rates are defined; step must shrink.
    Stage,
    Fatal(NumericError),
}

fn try_step<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &[f64],
    h: f64,
    w: &mut Work,
    opts: &OdeOptions,
    n_rhs: &mut usize,
) -> Result<f64, StepFailure> {
    let n = y.len();
    let stage = |sys: &mut S,
                 t: f64,
                 y_stage: &[f64],
                 out: &mut [f64],
                 n_rhs: &mut usize|
     -> Result<(), StepFailure> {
        *n_rhs += 1;
        sys.rhs(t, y_stage, out).map_err(|e| match e {
            NumericError::NegativeRate { .. } | NumericError::NonFiniteRate { .. } => {
                StepFailure::Stage
            }
            other => StepFailure::Fatal(other),
        })
    };

    for i in 0..n {
        w.y_stage[i] = y[i] + h * A21 * w.k[0][i];
    }
    let (k01, ktail) = w.k.split_at_mut(1);
    stage(sys, t + C2 * h, &w.y_stage, &mut ktail[0], n_rhs)?;
    for i in 0..n {
        w.y_stage[i] = y[i] + h * (A31 * k01[0][i] + A32 * ktail[0][i]);
    }
    stage(sys, t + C3 * h, &w.y_stage, &mut ktail[1], n_rhs)?;
    for i in 0..n {
        w.y_stage[i] = y[i] + h * (A41 * k01[0][i] + A42 * ktail[0][i] + A43 * ktail[1][i]);
    }
    stage(sys, t + C4 * h, &w.y_stage, &mut ktail[2], n_rhs)?;
    for i in 0..n {
        w.y_stage[i] = y[i]
            + h * (A51 * k01[0][i] + A52 * ktail[0][i] + A53 * ktail[1][i] + A54 * ktail[2][i]);
    }
    stage(sys, t + C5 * h, &w.y_stage, &mut ktail[3], n_rhs)?;
    for i in 0..n {
        w.y_stage[i] = y[i]
            + h * (A61 * k01[0][i]
                + A62 * ktail[0][i]
                + A63 * ktail[1][i]
                + A64 * ktail[2][i]
                + A65 * ktail[3][i]);
    }
    stage(sys, t + h, &w.y_stage, &mut ktail[4], n_rhs)?;
    for i in 0..n {
        w.y_new[i] = y[i]
            + h * (A71 * k01[0][i]
                + A73 * ktail[1][i]
                + A74 * ktail[2][i]
                + A75 * ktail[3][i]
                + A76 * ktail[4][i]);
    }
    stage(sys, t + h, &w.y_new, &mut ktail[5], n_rhs)?;

    let nc = sys.controlled_dim().min(n).max(1);
    let k = &w.k;
    let mut err_sq = 0.0;
    for i in 0..nc {
        let e = h
            * (E1 * k[0][i]
                + E3 * k[2][i]
                + E4 * k[3][i]
                + E5 * k[4][i]
                + E6 * k[5][i]
                + E7 * k[6][i]);
        let scale = opts.atol + opts.rtol * y[i].abs().max(w.y_new[i].abs());
        err_sq += (e / scale) * (e / scale);
    }
    let err = (err_sq / nc as f64).sqrt();
    if !err.is_finite() {
        return Err(StepFailure::Stage);
    }
    Ok(err)
}

fn initial_step<S: OdeSystem>(
    sys: &mut S,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &OdeOptions,
    n_rhs: &mut usize,
) -> Result<f64, NumericError> {
    let n = y0.len();
    let nc = sys.controlled_dim().min(n).max(1);
    let norm = |v: &[f64], y: &[f64]| -> f64 {
        let s: f64 = v
            .iter()
            .zip(y)
            .take(nc)
            .map(|(&vi, &yi)| {
                let sk = opts.atol + opts.rtol * yi.abs();
                (vi / sk) * (vi / sk)
            })
            .sum();
        (s / nc as f64).sqrt()
    };
    let d0 = norm(y0, y0);
    let d1 = norm(f0, y0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let mut y1 = vec![0.0; n];
    for i in 0..n {
        y1[i] = y0[i] + h0 * f0[i];
    }
    let mut f1 = vec![0.0; n];
    *n_rhs += 1;
    // An explicit Euler probe can overshoot the feasible region; fall back to
    // a conservative guess instead of failing.
    let d2 = match sys.rhs(t0 + h0, &y1, &mut f1) {
        Ok(()) => {
            let mut diff = vec![0.0; n];
            for i in 0..n {
                diff[i] = f1[i] - f0[i];
            }
            norm(&diff, y0) / h0
        }
        Err(_) => 1.0 / h0,
    };
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}
