//! The four commands and their artifacts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use asdinv_core::analysis::{bound_report, BoundReport};
use asdinv_core::design::{decompose, verify_output_structure};
use asdinv_core::sim::{metrics, Metrics};
use asdinv_core::{simulate, ControllerSpec, Matrix, Realization, SimError, Trace};
use serde_json::{json, Value};

use crate::scenario::{self, Built};
use crate::{exit, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Command {
    Design,
    Simulate,
    Verify,
    Bound,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Design => "design",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Bound => "bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Adds a `timestamp` field to `summary.json`.
    pub timestamp: bool,
    pub overrides: Vec<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            timestamp: true,
            overrides: Vec::new(),
        }
    }
}

/// Result of one command on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Scenario name, or the argument given when loading failed.
    pub scenario: String,
    pub command: Command,
    pub code: i32,
    pub message: String,
    /// Output directory, when artifacts were written.
    pub dir: Option<PathBuf>,
    pub summary: Option<Value>,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.code == exit::OK
    }
}

/// Matrix as a list of rows.
pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn design_summary(b: &Built) -> Value {
    let core = &b.core;
    let t1 = verify_output_structure(core);
    json!({
        "plant": b.plant.name(),
        "epsilon": b.spec.epsilon,
        "k": rows(&core.k),
        "spectrum": core.spectrum,
        "c": rows(&core.c),
        "lambda": core.lambda.as_slice(),
        "ctb": rows(&core.ctb()),
        "pi_gains": {
            "kp": rows(b.spec.kp()),
            "ki": rows(b.spec.ki()),
        },
        "structure": structure_json(&t1),
    })
}

fn structure_json(r: &asdinv_core::StructureReport) -> Value {
    json!({
        "passed": r.passed(),
        "eigen_residual": r.eigen_residual,
        "eigen_tol": r.eigen_tol,
        "det_ctb": r.det_ctb,
        "rank_c": r.rank_c,
        "columns_unit": r.columns_unit,
    })
}

/// A finished or diverged run.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub trace: Trace,
    pub blowup_time: Option<f64>,
    pub metrics: Option<Metrics>,
}

pub fn run_simulation(b: &Built) -> Result<SimRun, CliError> {
    let (trace, blowup_time) = match simulate(b.plant.as_ref(), &b.spec, &b.sim) {
        Ok(tr) => (tr, None),
        Err(SimError::NonFiniteState { time, trace }) => (*trace, Some(time)),
        Err(e) => return Err(CliError::Config(format!("field `sim`: {e}"))),
    };
    let metrics = metrics(&trace, b.scenario.threshold).ok();
    Ok(SimRun {
        trace,
        blowup_time,
        metrics,
    })
}

fn simulate_summary(b: &Built, run: &SimRun) -> Value {
    json!({
        "plant": b.plant.name(),
        "epsilon": b.spec.epsilon,
        "dt": b.sim.dt,
        "t_final": b.sim.t_final,
        "samples": run.trace.len(),
        "diverged": run.blowup_time.is_some(),
        "blowup_time": run.blowup_time,
        "metrics": run.metrics,
        "warnings": run.trace.meta.warnings,
    })
}

/// Tolerances of the verify command.
pub const IDENTITY_TOL: f64 = 1e-6;
pub const FREQUENCY_TOL: f64 = 1e-10;
pub const TRAJECTORY_TOL: f64 = 1e-6;

/// Log-spaced test frequencies for realization equivalence.
pub fn test_frequencies() -> Vec<f64> {
    asdinv_core::analysis::log_grid(1e-2, 1e3, 20)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: Value,
}

fn check(name: &'static str, passed: bool, detail: Value) -> Check {
    Check { name, passed, detail }
}

fn max_rel_diff(a: &[asdinv_core::Vector], b: &[asdinv_core::Vector]) -> f64 {
    let scale = a.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let diff = a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn verify(b: &Built) -> Vec<Check> {
    let mut out = Vec::new();
    let t1 = verify_output_structure(&b.core);
    out.push(check("structure", t1.passed(), structure_json(&t1)));

    // Every step recorded, so the stage samples are available.
    let dense = b.sim.clone().with_stride(1);
    out.push(match simulate(b.plant.as_ref(), &b.spec, &dense) {
        Ok(trace) => match decompose(&b.core, b.plant.as_ref(), &trace) {
            Ok(dec) => {
                let (err, scale) = dec.identity_error(&b.core, &trace);
                check(
                    "decomposition",
                    err <= IDENTITY_TOL * scale,
                    json!({ "error": err, "scale": scale, "stage_samples": trace.has_stages() }),
                )
            }
            Err(e) => check("decomposition", false, json!({ "error": e.to_string() })),
        },
        Err(e) => check("decomposition", false, json!({ "error": e.to_string() })),
    });

    let obs = b.spec.clone().with_realization(Realization::Observer);
    let pi = b.spec.clone().with_realization(Realization::PiClosed);
    let (fa, fb) = (obs.linear_map(), pi.linear_map());
    let worst = test_frequencies()
        .into_iter()
        .map(|w| {
            let (ra, rb) = (fa.freq_response(w), fb.freq_response(w));
            (&ra - &rb).norm() / rb.norm().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    out.push(check(
        "realization_frequency",
        worst <= FREQUENCY_TOL,
        json!({ "worst_relative": worst, "frequencies": test_frequencies().len() }),
    ));

    // Both forms agree only while the input stays inside its range.
    let unsat = |r: Realization| {
        ControllerSpec::new(std::sync::Arc::clone(&b.core), b.spec.epsilon).map(|s| s.with_realization(r))
    };
    out.push(match (unsat(Realization::Observer), unsat(Realization::PiClosed)) {
        (Ok(o), Ok(p)) => match (
            simulate(b.plant.as_ref(), &o, &b.sim),
            simulate(b.plant.as_ref(), &p, &b.sim),
        ) {
            (Ok(ta), Ok(tb)) => {
                let rel = max_rel_diff(&ta.u, &tb.u);
                check(
                    "realization_trajectory",
                    rel <= TRAJECTORY_TOL,
                    json!({ "relative_u": rel }),
                )
            }
            (Err(e), _) | (_, Err(e)) => check("realization_trajectory", false, json!({ "error": e.to_string() })),
        },
        (Err(e), _) | (_, Err(e)) => check("realization_trajectory", false, json!({ "error": e.to_string() })),
    });
    out
}

pub fn bound(b: &Built) -> Result<BoundReport, CliError> {
    let c = b.constants.ok_or_else(|| {
        CliError::MissingConstants(format!(
            "plant `{}` carries no assumption constants; add a `constants` block to the scenario",
            b.plant.name()
        ))
    })?;
    bound_report(&b.core, &c, Some(b.spec.epsilon)).map_err(|e| CliError::Config(format!("field `constants`: {e}")))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn finish(
    b: &Built,
    command: Command,
    opts: &RunOptions,
    mut summary: Value,
    trace: Option<&Trace>,
    code: i32,
    message: String,
) -> Result<Outcome, CliError> {
    let dir = opts.out.join(&b.scenario.name).join(command.name());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let map = summary.as_object_mut().expect("summary is an object");
    map.insert("scenario".into(), json!(b.scenario.name));
    map.insert("command".into(), json!(command.name()));
    map.insert("exit_code".into(), json!(code));
    if opts.timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        map.insert("timestamp".into(), json!(secs));
    }
    if let Some(tr) = trace {
        write(&dir.join("trace.csv"), &tr.to_csv())?;
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join("summary.json"), &(text + "\n"))?;
    Ok(Outcome {
        scenario: b.scenario.name.clone(),
        command,
        code,
        message,
        dir: Some(dir),
        summary: Some(summary),
    })
}

fn execute(command: Command, b: &Built, opts: &RunOptions) -> Result<Outcome, CliError> {
    match command {
        Command::Design => {
            let s = design_summary(b);
            let passed = s["structure"]["passed"].as_bool().unwrap_or(false);
            let msg = format!(
                "designed {}x{} core, spectrum {:?}, structure {}",
                b.core.n,
                b.core.m,
                b.core.spectrum,
                if passed { "ok" } else { "FAILED" }
            );
            finish(b, command, opts, s, None, exit::OK, msg)
        }
        Command::Simulate => {
            let run = run_simulation(b)?;
            let s = simulate_summary(b, &run);
            let (code, msg) = match (run.blowup_time, &run.metrics) {
                (Some(t), _) => (exit::DIVERGED, format!("diverged at t = {t}")),
                (None, Some(m)) => (
                    exit::OK,
                    format!(
                        "sup-tail {:.3e}, E = {:.4}, saturated {:.1}%",
                        m.sup_tail,
                        m.energy,
                        100.0 * m.saturation_fraction
                    ),
                ),
                (None, None) => (exit::RUNTIME, "empty trace".into()),
            };
            finish(b, command, opts, s, Some(&run.trace), code, msg)
        }
        Command::Verify => {
            let checks = verify(b);
            let all = checks.iter().all(|c| c.passed);
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            let map: serde_json::Map<String, Value> = checks
                .iter()
                .map(|c| {
                    let mut d = c.detail.clone();
                    d.as_object_mut()
                        .expect("detail is an object")
                        .insert("passed".into(), json!(c.passed));
                    (c.name.to_owned(), d)
                })
                .collect();
            let s = json!({ "passed": all, "checks": map });
            let (code, msg) = if all {
                (exit::OK, format!("all {} checks passed", checks.len()))
            } else {
                (exit::VERIFICATION, format!("failed: {}", failed.join(", ")))
            };
            finish(b, command, opts, s, None, code, msg)
        }
        Command::Bound => {
            let rep = bound(b)?;
            let msg = match &rep.bound {
                Some(ub) => format!(
                    "epsilon_max {:.4e}, bound at epsilon {:.4e}: {:.4e}",
                    rep.epsilon_max, ub.epsilon, ub.full
                ),
                None => format!(
                    "epsilon_max {:.4e}; epsilon {:.4e} is outside the admissible range",
                    rep.epsilon_max, b.spec.epsilon
                ),
            };
            let s = json!({ "epsilon": b.spec.epsilon, "report": rep });
            finish(b, command, opts, s, None, exit::OK, msg)
        }
    }
}

/// Loads, builds and runs one scenario. Errors become an outcome with the
/// matching exit code; nothing is written in that case.
pub fn run(command: Command, scenario: &str, opts: &RunOptions) -> Outcome {
    let result = match scenario::load(scenario, &opts.overrides) {
        Ok(sc) => sc
            .build()
            .and_then(|b| execute(command, &b, opts))
            .map_err(|e| (sc.name.clone(), e)),
        Err(e) => Err((scenario.to_owned(), e)),
    };
    match result {
        Ok(o) => o,
        Err((name, e)) => Outcome {
            scenario: name,
            command,
            code: e.exit_code(),
            message: e.to_string(),
            dir: None,
            summary: None,
        },
    }
}

/// Runs `command` on every scenario, on up to `jobs` threads. Outcomes keep
/// the order of `scenarios`.
pub fn run_many(command: Command, scenarios: &[String], opts: &RunOptions, jobs: usize) -> Vec<Outcome> {
    use rayon::prelude::*;
    if jobs <= 1 || scenarios.len() <= 1 {
        return scenarios.iter().map(|s| run(command, s, opts)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| scenarios.par_iter().map(|s| run(command, s, opts)).collect()),
        Err(_) => scenarios.iter().map(|s| run(command, s, opts)).collect(),
    }
}
