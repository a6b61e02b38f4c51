//! Command-line front end: argument parsing, dispatch, exit codes, and the
//! file plumbing shared by all subcommands.
//!
//! Exit codes: 0 success, 1 property indeterminate, 2 input error, 3 numeric
//! failure. Outputs are bit-identical for identical inputs, flags, seed, and
//! version; the manifest written next to each output records wall-clock
//! timings and is the one intentionally unstable file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::csl::{
    boolean_signal, check_path_probability, parse_formula, probability_samples, CheckError,
    CheckOutcome, Formula, PathFormula, Query, RewardKind,
};
use crate::fluid::{agent_generator, solve_fluid, steady_state, SteadyOpts};
use crate::model::{validate, PopulationModel, Severity, ValidateOpts};
use crate::ode::OdeOptions;
use crate::output::{
    fmt_g10, parse_numeric_csv, render_line_chart, write_estimator_csv, write_result_csv,
    write_signal_csv, write_trajectory_csv, ResultRow, RunManifest, Series, Source,
};
use crate::reward::{
    cumulative_reward_curve, evaluate_reward_formula, instantaneous_reward_curve,
    invariant_measure, reachability_reward_curve, RewardStructure,
};
use crate::sim::{
    estimate_reward, estimate_state_probs, PathRewardKind, SimConfig, SimError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INDETERMINATE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
enum CmdError {
    Input(String),
    Numeric(String),
}

impl CmdError {
    fn exit_code(&self) -> i32 {
        match self {
            CmdError::Input(_) => EXIT_INPUT,
            CmdError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Input(m) | CmdError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<crate::model::ModelError> for CmdError {
    fn from(e: crate::model::ModelError) -> Self {
        CmdError::Input(e.to_string())
    }
}

impl From<crate::ode::NumericError> for CmdError {
    fn from(e: crate::ode::NumericError) -> Self {
        CmdError::Numeric(e.to_string())
    }
}

impl From<CheckError> for CmdError {
    fn from(e: CheckError) -> Self {
        match e {
            CheckError::Numeric(n) => CmdError::Numeric(n.to_string()),
            other => CmdError::Input(other.to_string()),
        }
    }
}

impl From<SimError> for CmdError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Model(m) => CmdError::Input(m.to_string()),
            SimError::Numeric(n) => CmdError::Numeric(n.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fluidmc",
    version,
    about = "Fluid model checking of single-agent properties in Markov population models"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the mean-field fluid limit and dump densities on a grid
    Fluid(FluidArgs),
    /// Estimate tagged-agent state probabilities by exact simulation
    Simulate(SimulateArgs),
    /// Check formulae against the fluid-limit agent chain
    Check(CheckArgs),
    /// Compare fluid reward curves against statistical estimates
    Compare(CompareArgs),
    /// Fluid equilibrium, agent invariant measure, and steady rewards
    Steady(SteadyArgs),
    /// Render CSV time series to a static SVG chart
    Plot(PlotArgs),
    /// Lint a model file and print its canonical form
    Validate(ValidateArgs),
}

#[derive(Args)]
struct FluidArgs {
    /// Model file
    model: PathBuf,
    /// Integration horizon
    #[arg(long, default_value_t = 100.0)]
    tmax: f64,
    /// Output grid step
    #[arg(long, default_value_t = 1.0)]
    grid: f64,
    /// Trajectory CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model file
    model: PathBuf,
    /// Population size
    #[arg(long = "N", default_value_t = 100)]
    n: u64,
    /// Number of replications
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    /// RNG seed (replication r uses stream r of this seed)
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulation horizon
    #[arg(long, default_value_t = 100.0)]
    tmax: f64,
    /// Estimator grid step
    #[arg(long, default_value_t = 1.0)]
    grid: f64,
    /// Tagged agent's initial state (default: densest initial state)
    #[arg(long)]
    tag: Option<String>,
    /// Estimator CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Model file
    model: PathBuf,
    /// Formula file, one formula per line; blank lines and # comments ignored
    formulas: PathBuf,
    /// Initial state for path and reward formulae (default: densest initial state)
    #[arg(long)]
    s0: Option<String>,
    /// Signal window: threshold path formulae are evaluated for every start
    /// time in [0, twin]
    #[arg(long, default_value_t = 0.0)]
    twin: f64,
    /// Result CSV path; signals go to sibling files <out>.signalK.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Model file
    model: PathBuf,
    /// Formula file of time-bounded reward formulae
    formulas: PathBuf,
    /// Population size for the statistical side
    #[arg(long = "N", default_value_t = 100)]
    n: u64,
    /// Number of replications
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comparison grid step
    #[arg(long, default_value_t = 10.0)]
    grid: f64,
    /// Initial state (default: densest initial state)
    #[arg(long)]
    s0: Option<String>,
    /// Summary CSV path; per-formula curves go to <out>.curveK.csv
    #[arg(long)]
    out: PathBuf,
    /// Optional overlay chart base path (per-formula, indexed like the CSVs)
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct SteadyArgs {
    /// Model file
    model: PathBuf,
    /// Optional result CSV path (stdout report is always printed)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Input CSVs; all must share their first (time) column
    #[arg(required = true)]
    csv: Vec<PathBuf>,
    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
    /// Chart title
    #[arg(long)]
    title: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Model file
    model: PathBuf,
    /// Horizon for rate-sign sampling along the fluid trajectory
    #[arg(long, default_value_t = 1000.0)]
    horizon: f64,
    /// Number of sample times
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

/// Parses arguments from the process environment and runs one command.
/// Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    init_threads();
    let res = match cli.cmd {
        Cmd::Fluid(a) => cmd_fluid(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Steady(a) => cmd_steady(a),
        Cmd::Plot(a) => cmd_plot(a),
        Cmd::Validate(a) => cmd_validate(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// FLUIDMC_THREADS caps the replication pool; unset or invalid leaves the
/// default. Repeated initialization (tests) is harmless.
fn init_threads() {
    if let Ok(v) = std::env::var("FLUIDMC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_model(path: &Path) -> Result<(PopulationModel, Vec<u8>), CmdError> {
    let bytes =
        fs::read(path).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CmdError::Input(format!("{}: not valid UTF-8", path.display())))?;
    let m = PopulationModel::parse(&text)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    Ok((m, bytes))
}

fn write_out(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CmdError> {
    let file = fs::File::create(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|()| w.flush()).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
}

fn write_manifest(man: &RunManifest, out: &Path) -> Result<(), CmdError> {
    let path = manifest_path(out);
    man.write_to(&path).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn sibling(out: &Path, tag: &str, idx: usize) -> PathBuf {
    out.with_extension(format!("{tag}{}.csv", idx + 1))
}

/// Uniform grid 0, step, 2·step, …, closed with t_max when the step does not
/// divide it.
fn make_grid(t_max: f64, step: f64) -> Result<Vec<f64>, CmdError> {
    if !(t_max.is_finite() && t_max >= 0.0) {
        return Err(CmdError::Input(format!("horizon {t_max} must be finite and nonnegative")));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(CmdError::Input(format!("grid step {step} must be positive")));
    }
    let n = (t_max / step).floor();
    if n > 5e6 {
        return Err(CmdError::Input("grid has more than 5e6 points; coarsen --grid".into()));
    }
    let mut out: Vec<f64> = (0..=n as usize).map(|k| k as f64 * step).collect();
    let last = *out.last().unwrap();
    if t_max - last > step * 1e-9 {
        out.push(t_max);
    } else {
        *out.last_mut().unwrap() = last.min(t_max);
    }
    Ok(out)
}

fn resolve_state(m: &PopulationModel, name: &Option<String>) -> Result<usize, CmdError> {
    match name {
        Some(n) => m
            .agent
            .index_of(n)
            .ok_or_else(|| CmdError::Input(format!("unknown state `{n}`"))),
        None => {
            let mut best = 0;
            for (i, &d) in m.init_density.iter().enumerate() {
                if d > m.init_density[best] {
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// One formula per nonempty, non-comment line; texts are echoed in canonical
/// display form.
fn load_formulas(path: &Path, m: &PopulationModel) -> Result<Vec<(String, Formula)>, CmdError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = parse_formula(line, m).map_err(|e| {
            CmdError::Input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push((f.to_string(), f));
    }
    if out.is_empty() {
        return Err(CmdError::Input(format!("{}: no formulae", path.display())));
    }
    Ok(out)
}

fn path_horizon(p: &PathFormula) -> f64 {
    match p {
        PathFormula::Next { t2, .. } | PathFormula::Until { t2, .. } => *t2,
    }
}

fn tolerance_config(man: &mut RunManifest) {
    let opts = OdeOptions::default();
    man.set_config("rtol", json!(opts.rtol));
    man.set_config("atol", json!(opts.atol));
}

fn cmd_fluid(a: FluidArgs) -> Result<i32, CmdError> {
    let (m, bytes) = load_model(&a.model)?;
    let grid = make_grid(a.tmax, a.grid)?;
    let mut man = RunManifest::new("fluid", &a.model.display().to_string(), &bytes);
    man.set_config("tmax", json!(a.tmax));
    man.set_config("grid_step", json!(a.grid));
    tolerance_config(&mut man);

    let t0 = Instant::now();
    let traj = solve_fluid(&m, a.tmax, None)?;
    man.add_timing("fluid_solve", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    write_out(&a.out, |w| write_trajectory_csv(w, &traj, &grid))?;
    man.add_timing("write", t0.elapsed().as_secs_f64());
    write_manifest(&man, &a.out)?;
    Ok(EXIT_OK)
}

fn cmd_simulate(a: SimulateArgs) -> Result<i32, CmdError> {
    let (m, bytes) = load_model(&a.model)?;
    let grid = make_grid(a.tmax, a.grid)?;
    let tag_initial = resolve_state(&m, &a.tag)?;
    let cfg = SimConfig {
        n: a.n,
        t_max: a.tmax,
        runs: a.runs,
        seed: a.seed,
        grid,
        tag_initial,
    };
    let mut man = RunManifest::new("simulate", &a.model.display().to_string(), &bytes);
    man.set_config("N", json!(a.n));
    man.set_config("runs", json!(a.runs));
    man.set_config("seed", json!(a.seed));
    man.set_config("tmax", json!(a.tmax));
    man.set_config("grid_step", json!(a.grid));
    man.set_config("tag", json!(m.agent.name(tag_initial)));

    let t0 = Instant::now();
    let ests = estimate_state_probs(&m, &cfg)?;
    man.add_timing("simulate", t0.elapsed().as_secs_f64());
    if ests.iter().any(|e| e.low_run_count()) {
        eprintln!("warning: fewer than 30 runs; confidence intervals are unreliable");
    }

    let names: Vec<&str> = m.agent.names().iter().map(String::as_str).collect();
    let t0 = Instant::now();
    write_out(&a.out, |w| write_estimator_csv(w, &names, &ests))?;
    man.add_timing("write", t0.elapsed().as_secs_f64());
    write_manifest(&man, &a.out)?;
    Ok(EXIT_OK)
}

fn cmd_check(a: CheckArgs) -> Result<i32, CmdError> {
    let (m, bytes) = load_model(&a.model)?;
    let formulas = load_formulas(&a.formulas, &m)?;
    let s0 = resolve_state(&m, &a.s0)?;
    if !(a.twin.is_finite() && a.twin >= 0.0) {
        return Err(CmdError::Input(format!("--twin {} must be finite and nonnegative", a.twin)));
    }
    let mut man = RunManifest::new("check", &a.model.display().to_string(), &bytes);
    man.set_config("s0", json!(m.agent.name(s0)));
    man.set_config("twin", json!(a.twin));
    tolerance_config(&mut man);

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut any_indeterminate = false;
    let t0 = Instant::now();
    for (idx, (text, f)) in formulas.iter().enumerate() {
        man.formulas.push(text.clone());
        match f {
            Formula::Reward { kind, .. } => {
                let (res, outcome) = evaluate_reward_formula(&m, f, s0)?;
                if matches!(outcome, CheckOutcome::Indeterminate(_)) {
                    any_indeterminate = true;
                }
                let s0_name = if matches!(kind, RewardKind::Steady) {
                    String::new()
                } else {
                    m.agent.name(s0).to_string()
                };
                rows.push(ResultRow {
                    formula: text.clone(),
                    kind: res.kind.to_string(),
                    s0: s0_name,
                    t: res.horizon,
                    value: res.value,
                    ci_low: None,
                    ci_high: None,
                    source: Source::Fluid,
                });
            }
            Formula::Prob { query, path } => {
                let v0 = check_path_probability(&m, path, s0, 0.0)?;
                let kind = match query {
                    Query::Value => "probability",
                    Query::Threshold(..) => "boolean",
                };
                match query {
                    Query::Value => {
                        if a.twin > 0.0 {
                            let samples = probability_samples(&m, path, s0, a.twin)?;
                            write_out(&sibling(&a.out, "prob", idx), |w| {
                                writeln!(w, "t,prob")?;
                                for &(t, p) in &samples {
                                    writeln!(w, "{},{}", fmt_g10(t), fmt_g10(p))?;
                                }
                                Ok(())
                            })?;
                        }
                    }
                    Query::Threshold(cmp, p) => {
                        if a.twin > 0.0 {
                            let sig = boolean_signal(&m, path, *cmp, *p, s0, a.twin)?;
                            if sig.has_indeterminate() {
                                any_indeterminate = true;
                            }
                            write_out(&sibling(&a.out, "signal", idx), |w| {
                                write_signal_csv(w, &sig)
                            })?;
                        } else if matches!(query.decide(v0), CheckOutcome::Indeterminate(_)) {
                            any_indeterminate = true;
                        }
                    }
                }
                rows.push(ResultRow {
                    formula: text.clone(),
                    kind: kind.into(),
                    s0: m.agent.name(s0).to_string(),
                    t: Some(path_horizon(path)),
                    value: v0,
                    ci_low: None,
                    ci_high: None,
                    source: Source::Fluid,
                });
            }
        }
    }
    man.add_timing("check", t0.elapsed().as_secs_f64());

    write_out(&a.out, |w| write_result_csv(w, &rows))?;
    write_manifest(&man, &a.out)?;
    Ok(if any_indeterminate { EXIT_INDETERMINATE } else { EXIT_OK })
}

fn reward_formula_parts<'f>(
    m: &PopulationModel,
    text: &str,
    f: &'f Formula,
) -> Result<(RewardStructure, &'f RewardKind, f64), CmdError> {
    let Formula::Reward { structure, kind, .. } = f else {
        return Err(CmdError::Input(format!(
            "`{text}`: compare requires reward formulae"
        )));
    };
    let t = match kind {
        RewardKind::Cumulative { t }
        | RewardKind::Instantaneous { t }
        | RewardKind::Reach { t, .. } => *t,
        RewardKind::Steady => {
            return Err(CmdError::Input(format!(
                "`{text}`: steady-state rewards have no statistical counterpart to compare"
            )))
        }
    };
    let rw = RewardStructure::from_model(m, structure)?;
    Ok((rw, kind, t))
}

fn cmd_compare(a: CompareArgs) -> Result<i32, CmdError> {
    let (m, bytes) = load_model(&a.model)?;
    let formulas = load_formulas(&a.formulas, &m)?;
    let s0 = resolve_state(&m, &a.s0)?;
    let mut man = RunManifest::new("compare", &a.model.display().to_string(), &bytes);
    man.set_config("N", json!(a.n));
    man.set_config("runs", json!(a.runs));
    man.set_config("seed", json!(a.seed));
    man.set_config("grid_step", json!(a.grid));
    man.set_config("s0", json!(m.agent.name(s0)));
    tolerance_config(&mut man);

    let mut summary = String::from(
        "formula,kind,s0,T,fluid_value,stat_mean,stat_ci_low,stat_ci_high,\
         abs_err_max,abs_err_mean,rel_err_final,fluid_seconds,stat_seconds\n",
    );
    for (idx, (text, f)) in formulas.iter().enumerate() {
        man.formulas.push(text.clone());
        let (rw, kind, t_end) = reward_formula_parts(&m, text, f)?;
        let grid = make_grid(t_end, a.grid)?;

        let t0 = Instant::now();
        let fluid: Vec<f64> = match kind {
            RewardKind::Cumulative { .. } => cumulative_reward_curve(&m, &rw, s0, &grid)?,
            RewardKind::Instantaneous { .. } => instantaneous_reward_curve(&m, &rw, s0, &grid)?,
            RewardKind::Reach { goal, .. } => {
                let mask = goal.sat(&m)?;
                reachability_reward_curve(&m, &rw, &mask, s0, &grid)?
            }
            RewardKind::Steady => unreachable!("rejected above"),
        };
        let fluid_seconds = t0.elapsed().as_secs_f64();

        let sim_kind = match kind {
            RewardKind::Cumulative { .. } => PathRewardKind::Cumulative,
            RewardKind::Instantaneous { .. } => PathRewardKind::Instantaneous,
            RewardKind::Reach { goal, .. } => PathRewardKind::Reach(goal.sat(&m)?),
            RewardKind::Steady => unreachable!("rejected above"),
        };
        let cfg = SimConfig {
            n: a.n,
            t_max: t_end,
            runs: a.runs,
            seed: a.seed,
            grid: grid.clone(),
            tag_initial: s0,
        };
        let t0 = Instant::now();
        let est = estimate_reward(&m, &rw, &sim_kind, &cfg)?;
        let stat_seconds = t0.elapsed().as_secs_f64();

        let abs_err: Vec<f64> =
            fluid.iter().zip(&est.mean).map(|(f, s)| (f - s).abs()).collect();
        let abs_err_max = abs_err.iter().cloned().fold(0.0, f64::max);
        let abs_err_mean = abs_err.iter().sum::<f64>() / abs_err.len() as f64;
        let last = grid.len() - 1;
        // Relative error at the final grid point; a 0/0 disagreement is no
        // disagreement at all.
        let rel_err_final = if est.mean[last] == 0.0 && fluid[last] == 0.0 {
            0.0
        } else {
            (fluid[last] - est.mean[last]).abs() / est.mean[last].abs()
        };

        write_out(&sibling(&a.out, "curve", idx), |w| {
            writeln!(w, "t,fluid,stat_mean,stat_ci,abs_err")?;
            for (k, &t) in grid.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt_g10(t),
                    fmt_g10(fluid[k]),
                    fmt_g10(est.mean[k]),
                    fmt_g10(est.half_width[k]),
                    fmt_g10(abs_err[k])
                )?;
            }
            Ok(())
        })?;
        if let Some(base) = &a.svg {
            let series = vec![
                Series {
                    name: "fluid".into(),
                    points: grid.iter().copied().zip(fluid.iter().copied()).collect(),
                    dash: String::new(),
                },
                Series {
                    name: format!("statistical ({} runs)", a.runs),
                    points: grid.iter().copied().zip(est.mean.iter().copied()).collect(),
                    dash: "6 3".into(),
                },
            ];
            let svg = render_line_chart(text, "t", "reward", &series)
                .map_err(CmdError::Input)?;
            let path = base.with_extension(format!("{}.svg", idx + 1));
            fs::write(&path, svg)
                .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
        }

        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            crate::output::csv_field(text),
            match kind {
                RewardKind::Cumulative { .. } => "cumulative",
                RewardKind::Instantaneous { .. } => "instantaneous",
                RewardKind::Reach { .. } => "reachability",
                RewardKind::Steady => unreachable!(),
            },
            m.agent.name(s0),
            fmt_g10(t_end),
            fmt_g10(fluid[last]),
            fmt_g10(est.mean[last]),
            fmt_g10(est.mean[last] - est.half_width[last]),
            fmt_g10(est.mean[last] + est.half_width[last]),
            fmt_g10(abs_err_max),
            fmt_g10(abs_err_mean),
            fmt_g10(rel_err_final),
            fmt_g10(fluid_seconds),
            fmt_g10(stat_seconds)
        ));
        man.add_timing(&format!("fluid_{}", idx + 1), fluid_seconds);
        man.add_timing(&format!("statistical_{}", idx + 1), stat_seconds);
    }
    write_out(&a.out, |w| w.write_all(summary.as_bytes()))?;
    write_manifest(&man, &a.out)?;
    Ok(EXIT_OK)
}

fn cmd_steady(a: SteadyArgs) -> Result<i32, CmdError> {
    let (m, bytes) = load_model(&a.model)?;
    let mut man = RunManifest::new("steady", &a.model.display().to_string(), &bytes);
    let t0 = Instant::now();
    let ss = steady_state(&m, &SteadyOpts::default())?;
    let gen = agent_generator(&m).map_err(CheckError::from)?;
    let support: Vec<bool> = m.init_density.iter().map(|&v| v > 0.0).collect();
    let pi = invariant_measure(&gen, &ss.x, &support)?;
    man.add_timing("steady", t0.elapsed().as_secs_f64());

    println!("fluid equilibrium (residual {}, reached by t={}):", fmt_g10(ss.residual), fmt_g10(ss.t_reached));
    for (i, name) in m.agent.names().iter().enumerate() {
        println!("  x_{name} = {}", fmt_g10(ss.x[i]));
    }
    println!("agent invariant measure:");
    for (i, name) in m.agent.names().iter().enumerate() {
        println!("  pi_{name} = {}", fmt_g10(pi[i]));
    }
    let mut rows = Vec::new();
    for decl in &m.rewards {
        let rw = RewardStructure::from_model(&m, &decl.name)?;
        let value: f64 = rw.state.iter().zip(&pi).map(|(r, p)| r * p).sum();
        println!("steady reward {} = {}", decl.name, fmt_g10(value));
        rows.push(ResultRow {
            formula: format!("R{{{}}}=? [ S ]", decl.name),
            kind: "steady".into(),
            s0: String::new(),
            t: None,
            value: value.max(0.0),
            ci_low: None,
            ci_high: None,
            source: Source::Fluid,
        });
    }
    if let Some(out) = &a.out {
        write_out(out, |w| write_result_csv(w, &rows))?;
        write_manifest(&man, out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_plot(a: PlotArgs) -> Result<i32, CmdError> {
    let mut series: Vec<Series> = Vec::new();
    let mut time_ref: Option<Vec<f64>> = None;
    let mut first_bytes: Vec<u8> = Vec::new();
    for (fi, path) in a.csv.iter().enumerate() {
        let text = fs::read_to_string(path)
            .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
        if fi == 0 {
            first_bytes = text.clone().into_bytes();
        }
        let (header, rows) = parse_numeric_csv(&text)
            .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
        if header.len() < 2 {
            return Err(CmdError::Input(format!("{}: no data columns", path.display())));
        }
        let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        match &time_ref {
            None => time_ref = Some(times.clone()),
            Some(t0) => {
                let same = t0.len() == times.len()
                    && t0
                        .iter()
                        .zip(&times)
                        .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
                if !same {
                    return Err(CmdError::Input(format!(
                        "{}: time column differs from the first input",
                        path.display()
                    )));
                }
            }
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let dash = ["", "6 3", "2 2"][fi % 3].to_string();
        for col in 1..header.len() {
            // Confidence half-width columns clutter an overlay; keep means
            // and densities.
            if header[col].starts_with("ci_") {
                continue;
            }
            let name = if a.csv.len() > 1 {
                format!("{stem}:{}", header[col])
            } else {
                header[col].clone()
            };
            series.push(Series {
                name,
                points: rows.iter().map(|r| (r[0], r[col])).collect(),
                dash: dash.clone(),
            });
        }
    }
    if series.is_empty() {
        return Err(CmdError::Input("no data columns to plot".into()));
    }
    let title = a.title.clone().unwrap_or_else(|| "fluidmc".into());
    let svg = render_line_chart(&title, "t", "value", &series).map_err(CmdError::Input)?;
    fs::write(&a.out, svg).map_err(|e| CmdError::Input(format!("{}: {e}", a.out.display())))?;
    let mut man = RunManifest::new("plot", &a.csv[0].display().to_string(), &first_bytes);
    man.set_config("inputs", json!(a.csv.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    write_manifest(&man, &a.out)?;
    Ok(EXIT_OK)
}

fn cmd_validate(a: ValidateArgs) -> Result<i32, CmdError> {
    let (m, _) = load_model(&a.model)?;
    print!("{}", m.print());
    let diags = validate(&m, &ValidateOpts { horizon: a.horizon, samples: a.samples });
    let mut errors = 0usize;
    for d in &diags {
        match d.severity {
            Severity::Warning => eprintln!("warning: {}", d.message),
            Severity::Error => {
                errors += 1;
                eprintln!("error: {}", d.message);
            }
        }
    }
    if errors > 0 {
        eprintln!("validation failed with {errors} error(s)");
        Ok(EXIT_INPUT)
    } else {
        eprintln!("model ok ({} diagnostics)", diags.len());
        Ok(EXIT_OK)
    }
}
