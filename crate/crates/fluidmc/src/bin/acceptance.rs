//! Golden-case acceptance harness. Each case drives the `fluidmc` CLI as a
//! subprocess against a shipped model asset and compares the parsed output
//! with a pinned expectation: a closed form, an independently computed
//! uniformization value, or the run's own statistical estimate. Cases run
//! concurrently; the summary is one line per case plus totals, optionally
//! mirrored to a junit XML file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Parser, ValueEnum};
use rayon::prelude::*;

use fluidmc::model::PopulationModel;
use fluidmc::output::split_csv_line;
use fluidmc::sim::uniformization_transient;

#[derive(Parser)]
#[command(name = "fluidmc-acceptance", version, about = "Golden-case acceptance suite")]
struct Opts {
    /// Which cases to run.
    #[arg(long, value_enum, default_value_t = SuiteArg::Quick)]
    suite: SuiteArg,
    /// Also write a junit XML report.
    #[arg(long)]
    junit: Option<PathBuf>,
    /// Keep the scratch directory instead of deleting it.
    #[arg(long)]
    keep: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    All,
    Quick,
    Bike,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Suite {
    Quick,
    Bike,
}

#[derive(Clone, Copy)]
enum Oracle {
    ClosedForm,
    Uniformization,
    Statistical,
}

impl Oracle {
    fn name(self) -> &'static str {
        match self {
            Oracle::ClosedForm => "closed-form",
            Oracle::Uniformization => "uniformization",
            Oracle::Statistical => "statistical",
        }
    }
}

enum Mode {
    /// `check` with one formula; the result CSV's value column is compared.
    Check { s0: Option<&'static str> },
    /// `compare` with one formula; the summary row is compared.
    Compare { n: u64, runs: usize, seed: u64, grid: f64 },
    /// `validate`; passes when the model lints clean.
    Validate,
}

enum Expect {
    /// |value − expected| ≤ tol.
    Abs { value: f64, tol: f64 },
    /// Summary's relative error at the final grid point ≤ tol.
    RelErrFinal { tol: f64 },
    /// Fluid value inside the statistical 95% CI, and relative error ≤ tol.
    WithinCiAndRel { tol: f64 },
    /// Fluid and statistical values both exactly zero.
    ExactZeroBoth,
    /// Exit code 0.
    CleanExit,
}

struct GoldenCase {
    name: &'static str,
    suite: Suite,
    model: &'static str,
    formula: String,
    mode: Mode,
    expect: Expect,
    oracle: Oracle,
}

struct CaseResult {
    name: &'static str,
    oracle: &'static str,
    pass: bool,
    detail: String,
}

fn main() {
    let opts = Opts::parse();
    let env = match Env::discover() {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    };

    let cases: Vec<GoldenCase> = build_cases(&env)
        .into_iter()
        .filter(|c| match opts.suite {
            SuiteArg::All => true,
            SuiteArg::Quick => c.suite == Suite::Quick,
            SuiteArg::Bike => c.suite == Suite::Bike,
        })
        .collect();

    let mut results: Vec<CaseResult> = cases.par_iter().map(|c| run_case(&env, c)).collect();
    results.push(self_test(&env));

    let mut failed = 0usize;
    for r in &results {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        if !r.pass {
            failed += 1;
        }
        println!("[{tag}] {} ({}) [oracle: {}]", r.name, r.detail, r.oracle);
    }
    println!("===== {} passed, {failed} failed =====", results.len() - failed);

    if let Some(path) = &opts.junit {
        if let Err(e) = fs::write(path, junit_xml(&results)) {
            eprintln!("error: {}: {e}", path.display());
            std::process::exit(2);
        }
    }
    if !opts.keep {
        let _ = fs::remove_dir_all(&env.scratch);
    }
    std::process::exit(if failed > 0 { 1 } else { 0 });
}

struct Env {
    cli: PathBuf,
    assets: PathBuf,
    scratch: PathBuf,
}

impl Env {
    fn discover() -> Result<Env, String> {
        let cli = match std::env::var_os("FLUIDMC_BIN") {
            Some(p) => PathBuf::from(p),
            None => {
                let exe = std::env::current_exe().map_err(|e| e.to_string())?;
                exe.parent().ok_or("bare executable path")?.join("fluidmc")
            }
        };
        if !cli.is_file() {
            return Err(format!(
                "CLI binary not found at {}; set FLUIDMC_BIN",
                cli.display()
            ));
        }
        let assets = match std::env::var_os("FLUIDMC_ASSETS") {
            Some(p) => PathBuf::from(p),
            None => {
                let cwd = PathBuf::from("assets");
                if cwd.is_dir() {
                    cwd
                } else {
                    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
                    exe.ancestors().nth(3).ok_or("shallow executable path")?.join("assets")
                }
            }
        };
        if !assets.join("bike.model").is_file() {
            return Err(format!(
                "model assets not found under {}; set FLUIDMC_ASSETS",
                assets.display()
            ));
        }
        let scratch =
            std::env::temp_dir().join(format!("fluidmc-acceptance-{}", std::process::id()));
        fs::create_dir_all(&scratch).map_err(|e| e.to_string())?;
        Ok(Env { cli, assets, scratch })
    }
}

/// Until-probability of the frozen two-state agent by uniformization: an
/// oracle that shares no code with the checker's ODE path.
fn two_state_until_by_uniformization(assets: &Path, t: f64) -> f64 {
    let text = fs::read_to_string(assets.join("twostate.model")).expect("twostate asset");
    let m = PopulationModel::parse(&text).expect("twostate parses");
    let k1 = m.param("k1").expect("k1");
    // on -> off absorbing at rate k1 (per-capita shares are constant here).
    let q = vec![vec![-k1, k1], vec![0.0, 0.0]];
    let gen = fluidmc::model::SparseGenerator::from_dense(&q).expect("generator");
    let p = uniformization_transient(&gen, &[1.0, 0.0], t).expect("transient");
    p[1]
}

fn build_cases(env: &Env) -> Vec<GoldenCase> {
    let e1 = (-1.0f64).exp();
    vec![
        GoldenCase {
            name: "twostate-until-closed-form",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "P=? [ at_on U[0,1] at_off ]".into(),
            mode: Mode::Check { s0: Some("on") },
            expect: Expect::Abs { value: 1.0 - e1, tol: 1e-6 },
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "twostate-next-closed-form",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "P=? [ X[0,1] at_off ]".into(),
            mode: Mode::Check { s0: Some("on") },
            expect: Expect::Abs { value: 1.0 - e1, tol: 1e-6 },
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "twostate-instantaneous-closed-form",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "R{occ}=? [ I=1 ]".into(),
            mode: Mode::Check { s0: Some("on") },
            expect: Expect::Abs { value: 0.5 * (1.0 + (-2.0f64).exp()), tol: 1e-6 },
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "twostate-jump-reward-closed-form",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "R{hops}=? [ C<=5 ]".into(),
            mode: Mode::Check { s0: Some("on") },
            expect: Expect::Abs { value: 2.5 + 0.25 * (1.0 - (-10.0f64).exp()), tol: 1e-6 },
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "twostate-steady-occupancy",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "R{occ}=? [ S ]".into(),
            mode: Mode::Check { s0: None },
            expect: Expect::Abs { value: 0.5, tol: 1e-9 },
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "twostate-until-uniformization",
            suite: Suite::Quick,
            model: "twostate.model",
            formula: "P=? [ at_on U[0,2] at_off ]".into(),
            mode: Mode::Check { s0: Some("on") },
            expect: Expect::Abs {
                value: two_state_until_by_uniformization(&env.assets, 2.0),
                tol: 1e-6,
            },
            oracle: Oracle::Uniformization,
        },
        GoldenCase {
            name: "epidemic-lints-clean",
            suite: Suite::Quick,
            model: "epidemic.model",
            formula: String::new(),
            mode: Mode::Validate,
            expect: Expect::CleanExit,
            oracle: Oracle::ClosedForm,
        },
        GoldenCase {
            name: "bike-phi1-cumulative-cost",
            suite: Suite::Bike,
            model: "bike.model",
            formula: "R{cost}=? [ C<=1000 ]".into(),
            mode: Mode::Compare { n: 300, runs: 1000, seed: 7, grid: 10.0 },
            expect: Expect::RelErrFinal { tol: 0.05 },
            oracle: Oracle::Statistical,
        },
        GoldenCase {
            name: "bike-phi2-instantaneous-literal-zero",
            suite: Suite::Bike,
            model: "bike.model",
            formula: "R{diss}=? [ I=1000 ]".into(),
            mode: Mode::Compare { n: 300, runs: 1000, seed: 7, grid: 10.0 },
            expect: Expect::ExactZeroBoth,
            oracle: Oracle::Statistical,
        },
        GoldenCase {
            name: "bike-phi2-cumulative-dissatisfaction",
            suite: Suite::Bike,
            model: "bike.model",
            formula: "R{diss}=? [ C<=1000 ]".into(),
            mode: Mode::Compare { n: 300, runs: 1000, seed: 7, grid: 10.0 },
            expect: Expect::RelErrFinal { tol: 0.05 },
            oracle: Oracle::Statistical,
        },
        GoldenCase {
            name: "bike-phi3-reachability-ci",
            suite: Suite::Bike,
            model: "bike.model",
            formula: "R{cost}=? [ F<=1000 at_d ]".into(),
            mode: Mode::Compare { n: 300, runs: 1000, seed: 7, grid: 10.0 },
            expect: Expect::WithinCiAndRel { tol: 0.10 },
            oracle: Oracle::Statistical,
        },
    ]
}

struct CompareRow {
    fluid: f64,
    stat_mean: f64,
    ci_low: f64,
    ci_high: f64,
    rel_err_final: f64,
}

fn run_case(env: &Env, case: &GoldenCase) -> CaseResult {
    let fail = |detail: String| CaseResult {
        name: case.name,
        oracle: case.oracle.name(),
        pass: false,
        detail,
    };
    let pass = |detail: String| CaseResult {
        name: case.name,
        oracle: case.oracle.name(),
        pass: true,
        detail,
    };
    let model = env.assets.join(case.model);
    let dir = env.scratch.join(case.name);
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(format!("scratch dir: {e}"));
    }

    match (&case.mode, &case.expect) {
        (Mode::Validate, Expect::CleanExit) => {
            let out = Command::new(&env.cli).arg("validate").arg(&model).output();
            match out {
                Ok(o) if o.status.success() => pass("validator exit 0".into()),
                Ok(o) => fail(format!(
                    "validator exit {:?}: {}",
                    o.status.code(),
                    String::from_utf8_lossy(&o.stderr).trim()
                )),
                Err(e) => fail(format!("spawn: {e}")),
            }
        }
        (Mode::Check { s0 }, expect) => {
            let ff = dir.join("formula.txt");
            if let Err(e) = fs::write(&ff, format!("{}\n", case.formula)) {
                return fail(format!("formula file: {e}"));
            }
            let out_csv = dir.join("result.csv");
            let mut cmd = Command::new(&env.cli);
            cmd.arg("check").arg(&model).arg(&ff).arg("--out").arg(&out_csv);
            if let Some(s) = s0 {
                cmd.arg("--s0").arg(s);
            }
            let out = match cmd.output() {
                Ok(o) => o,
                Err(e) => return fail(format!("spawn: {e}")),
            };
            if !out.status.success() {
                return fail(format!(
                    "check exit {:?}: {}",
                    out.status.code(),
                    String::from_utf8_lossy(&out.stderr).trim()
                ));
            }
            let value = match read_value_column(&out_csv, 4) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            match expect {
                Expect::Abs { value: want, tol } => {
                    let dev = (value - want).abs();
                    if dev <= *tol {
                        pass(format!("|{value:.9} - {want:.9}| = {dev:.2e} <= {tol:.0e}"))
                    } else {
                        fail(format!("|{value:.9} - {want:.9}| = {dev:.2e} > {tol:.0e}"))
                    }
                }
                _ => fail("check cases compare absolute values".into()),
            }
        }
        (Mode::Compare { n, runs, seed, grid }, expect) => {
            let ff = dir.join("formula.txt");
            if let Err(e) = fs::write(&ff, format!("{}\n", case.formula)) {
                return fail(format!("formula file: {e}"));
            }
            let out_csv = dir.join("summary.csv");
            let out = match Command::new(&env.cli)
                .arg("compare")
                .arg(&model)
                .arg(&ff)
                .arg("--N")
                .arg(n.to_string())
                .arg("--runs")
                .arg(runs.to_string())
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--grid")
                .arg(grid.to_string())
                .arg("--out")
                .arg(&out_csv)
                .output()
            {
                Ok(o) => o,
                Err(e) => return fail(format!("spawn: {e}")),
            };
            if !out.status.success() {
                return fail(format!(
                    "compare exit {:?}: {}",
                    out.status.code(),
                    String::from_utf8_lossy(&out.stderr).trim()
                ));
            }
            let row = match read_compare_row(&out_csv) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match expect {
                Expect::RelErrFinal { tol } => {
                    if row.rel_err_final <= *tol {
                        pass(format!(
                            "rel err {:.4} <= {tol} (fluid {:.4}, stat {:.4})",
                            row.rel_err_final, row.fluid, row.stat_mean
                        ))
                    } else {
                        fail(format!(
                            "rel err {:.4} > {tol} (fluid {:.4}, stat {:.4})",
                            row.rel_err_final, row.fluid, row.stat_mean
                        ))
                    }
                }
                Expect::WithinCiAndRel { tol } => {
                    let inside = row.ci_low <= row.fluid && row.fluid <= row.ci_high;
                    if inside && row.rel_err_final <= *tol {
                        pass(format!(
                            "fluid {:.4} in [{:.4}, {:.4}], rel err {:.4} <= {tol}",
                            row.fluid, row.ci_low, row.ci_high, row.rel_err_final
                        ))
                    } else {
                        fail(format!(
                            "fluid {:.4}, CI [{:.4}, {:.4}], rel err {:.4} (tol {tol})",
                            row.fluid, row.ci_low, row.ci_high, row.rel_err_final
                        ))
                    }
                }
                Expect::ExactZeroBoth => {
                    if row.fluid == 0.0 && row.stat_mean == 0.0 && row.rel_err_final == 0.0 {
                        pass("fluid and statistical values both exactly 0".into())
                    } else {
                        fail(format!(
                            "expected exact zeros, got fluid {} stat {}",
                            row.fluid, row.stat_mean
                        ))
                    }
                }
                _ => fail("compare cases use summary expectations".into()),
            }
        }
        _ => fail("case mode and expectation do not match".into()),
    }
}

fn read_value_column(path: &Path, col: usize) -> Result<f64, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let line = text.lines().nth(1).ok_or_else(|| format!("{}: no data row", path.display()))?;
    let fields = split_csv_line(line);
    let cell = fields.get(col).ok_or_else(|| format!("{}: missing column {col}", path.display()))?;
    cell.parse::<f64>().map_err(|_| format!("{}: `{cell}` is not a number", path.display()))
}

fn read_compare_row(path: &Path) -> Result<CompareRow, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let line = text.lines().nth(1).ok_or_else(|| format!("{}: no data row", path.display()))?;
    let fields = split_csv_line(line);
    let num = |idx: usize| -> Result<f64, String> {
        fields
            .get(idx)
            .ok_or_else(|| format!("{}: missing column {idx}", path.display()))?
            .parse::<f64>()
            .map_err(|_| format!("{}: column {idx} is not a number", path.display()))
    };
    Ok(CompareRow {
        fluid: num(4)?,
        stat_mean: num(5)?,
        ci_low: num(6)?,
        ci_high: num(7)?,
        rel_err_final: num(10)?,
    })
}

/// The harness must be able to fail: rerun one closed-form case with a
/// deliberately corrupted expectation and demand a rejection.
fn self_test(env: &Env) -> CaseResult {
    let corrupted = GoldenCase {
        name: "harness-self-test",
        suite: Suite::Quick,
        model: "twostate.model",
        formula: "P=? [ at_on U[0,1] at_off ]".into(),
        mode: Mode::Check { s0: Some("on") },
        expect: Expect::Abs { value: 0.9, tol: 1e-6 },
        oracle: Oracle::ClosedForm,
    };
    let r = run_case(env, &corrupted);
    if r.pass {
        CaseResult {
            name: "harness-self-test",
            oracle: "closed-form",
            pass: false,
            detail: "corrupted expectation was accepted".into(),
        }
    } else {
        CaseResult {
            name: "harness-self-test",
            oracle: "closed-form",
            pass: true,
            detail: format!("corrupted expectation rejected: {}", r.detail),
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn junit_xml(results: &[CaseResult]) -> String {
    let failures = results.iter().filter(|r| !r.pass).count();
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    xml.push_str(&format!(
        "<testsuite name=\"fluidmc-acceptance\" tests=\"{}\" failures=\"{failures}\">\n",
        results.len()
    ));
    for r in results {
        if r.pass {
            xml.push_str(&format!(
                "  <testcase name=\"{}\" classname=\"{}\"/>\n",
                xml_escape(r.name),
                xml_escape(r.oracle)
            ));
        } else {
            xml.push_str(&format!(
                "  <testcase name=\"{}\" classname=\"{}\">\n    <failure message=\"{}\"/>\n  </testcase>\n",
                xml_escape(r.name),
                xml_escape(r.oracle),
                xml_escape(&r.detail)
            ));
        }
    }
    xml.push_str("</testsuite>\n");
    xml
}
