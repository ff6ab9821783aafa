//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{PlanFile, RunConfig, Setup};
use crate::constraints::{evaluate, is_feasible, max_violation};
use crate::criterion::Criterion;
use crate::error::{Error, Result};
use crate::optimize::{compare_strategies, run_strategy, DesignReport, Factorization, Rho0Stats, RunSummary, Strategy};
use crate::regression::{build_b, covariance, identify, read_measurements_csv, ExperimentPlan};
use crate::simulate::{monte_carlo_validation, SimulationSpec};

#[derive(Debug, Parser)]
#[command(name = "posecal", version, about = "Measurement pose selection for robot calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a measurement plan and write plan.json and trace.csv.
    Plan(Common),
    /// Score an existing plan.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plan: PathBuf,
        /// Evaluate the plan repeated this many times.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Monte Carlo calibration of an existing plan.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Strategy by factorization comparison table.
    Compare(Common),
    /// Least-squares identification from a measurement CSV.
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        measurements: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

struct Context {
    config: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let config = RunConfig::load(&self.config)?;
        let seed = self.seed.unwrap_or(config.seed);
        let out = self.out.clone().unwrap_or_else(|| config.output_dir.clone());
        Ok(Context { config, seed, out })
    }
}

/// Runs a parsed command and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    let common = match &cli.command {
        Command::Plan(c) | Command::Compare(c) => c,
        Command::Evaluate { common, .. } | Command::Simulate { common, .. } | Command::Identify { common, .. } => common,
    };
    let threads = common.threads;
    let body = || -> Result<String> {
        match &cli.command {
            Command::Plan(c) => cmd_plan(&c.context()?),
            Command::Evaluate { common, plan, repeat } => cmd_evaluate(&common.context()?, plan, *repeat),
            Command::Simulate { common, plan } => cmd_simulate(&common.context()?, plan),
            Command::Compare(c) => cmd_compare(&c.context()?),
            Command::Identify { common, measurements } => cmd_identify(&common.context()?, measurements),
        }
    };
    match threads {
        Some(0) => Err(Error::invalid("--threads must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Writes `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path: path.clone(), source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, contents).map_err(io(&tmp))?;
    std::fs::rename(&tmp, &target).map_err(io(&target))?;
    Ok(target)
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

#[derive(Serialize)]
struct DesignSummary<'a> {
    strategy: &'a Strategy,
    seed: u64,
    m: usize,
    sigma: f64,
    parameters: Vec<String>,
    stats: Rho0Stats,
    evaluations: u64,
    factorization: Option<Factorization>,
    runs: &'a [RunSummary],
}

fn trace_csv(report: &DesignReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["evaluations", "elapsed_s", "best_rho0"]).map_err(err)?;
    for p in &report.trace {
        w.write_record([p.evaluations.to_string(), p.elapsed_s.to_string(), p.best_rho0.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_plan(ctx: &Context) -> Result<String> {
    let problem = ctx.config.problem()?;
    let strategy = &ctx.config.optimizer()?.strategy;
    let report = run_strategy(&problem, strategy, ctx.seed)?;
    if !report.rho0_best.is_finite() {
        return Err(Error::invalid("no identifiable plan was found; increase m or the search budget"));
    }
    let mut file = PlanFile::new(&report.best_plan);
    file.rho0 = Some(report.rho0_best);
    let summary = DesignSummary {
        strategy,
        seed: ctx.seed,
        m: problem.m,
        sigma: problem.sigma,
        parameters: problem.mask.active_names(),
        stats: report.stats,
        evaluations: report.evaluations,
        factorization: report.factorization,
        runs: &report.runs,
    };
    file.design = Some(serde_json::to_value(&summary).expect("summary serializes"));
    let plan_path = write_atomic(&ctx.out, "plan.json", &json(&file))?;
    let trace_path = write_atomic(&ctx.out, "trace.csv", trace_csv(&report)?.as_bytes())?;
    Ok(format!(
        "{} m={} rho0={:.6} mm ({} evaluations)\nwrote {}\nwrote {}\n",
        strategy.name(),
        problem.m,
        report.rho0_best,
        report.evaluations,
        plan_path.display(),
        trace_path.display()
    ))
}

fn load_plan(setup: &Setup, path: &Path) -> Result<ExperimentPlan> {
    let plan = PlanFile::load(path)?.plan()?;
    if plan.mode != setup.mode {
        return Err(Error::invalid(format!(
            "plan is for {} calibration, config for {}",
            plan.mode.as_str(),
            setup.mode.as_str()
        )));
    }
    plan.validate(&setup.model)?;
    Ok(plan)
}

#[derive(Serialize)]
struct PoseStatus {
    index: usize,
    feasible: bool,
    max_violation: f64,
    violated: Vec<String>,
}

#[derive(Serialize)]
struct Evaluation {
    m: usize,
    repeat: usize,
    sigma: f64,
    rho0: f64,
    condition: f64,
    parameters: Vec<String>,
    poses: Vec<PoseStatus>,
}

fn cmd_evaluate(ctx: &Context, plan_path: &Path, repeat: usize) -> Result<String> {
    if repeat == 0 {
        return Err(Error::invalid("--repeat must be >= 1"));
    }
    let setup = ctx.config.setup()?;
    let plan = load_plan(&setup, plan_path)?.repeated(repeat);
    let criterion = Criterion::new(&setup.model, setup.mode, &setup.mask, &setup.test, setup.sigma)?;
    let factor = criterion.factor(&criterion.info(&plan)?.matrix)?;
    let rho0 = criterion.rho0_factored(&factor);
    let labels = setup.constraints.labels(setup.model.n_joints());
    let poses: Vec<PoseStatus> = plan
        .configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let values = evaluate(&setup.model, c, &setup.constraints, setup.mode);
            PoseStatus {
                index: i + 1,
                feasible: is_feasible(&values),
                max_violation: max_violation(&values),
                violated: labels.iter().zip(&values).filter(|(_, v)| **v > 0.0).map(|(l, _)| l.clone()).collect(),
            }
        })
        .collect();
    let eval = Evaluation {
        m: plan.len(),
        repeat,
        sigma: setup.sigma,
        rho0,
        condition: factor.condition(),
        parameters: setup.mask.active_names(),
        poses,
    };
    let path = write_atomic(&ctx.out, "evaluation.json", &json(&eval))?;
    let mut out = String::new();
    let _ = writeln!(out, "rho0       {:.9} mm", eval.rho0);
    let _ = writeln!(out, "condition  {:.3e}", eval.condition);
    let _ = writeln!(out, "poses      {} ({} x {repeat})", eval.m, eval.m / repeat);
    for p in &eval.poses {
        if p.feasible {
            let _ = writeln!(out, "  pose {:>3}: feasible (max constraint {:.3e})", p.index, p.max_violation);
        } else {
            let _ = writeln!(out, "  pose {:>3}: VIOLATES {}", p.index, p.violated.join(", "));
        }
    }
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

fn cmd_simulate(ctx: &Context, plan_path: &Path) -> Result<String> {
    let setup = ctx.config.setup()?;
    let section = ctx.config.simulation()?;
    let plan = load_plan(&setup, plan_path)?;
    let spec = SimulationSpec {
        model: setup.model,
        mode: setup.mode,
        mask: setup.mask,
        truth: section.truth.clone(),
        plan,
        test: setup.test,
        sigma: setup.sigma,
        n_trials: section.n_trials,
        seed: ctx.seed,
        generator: section.generator,
    };
    let report = monte_carlo_validation(&spec)?;
    let text = report.to_text();
    let a = write_atomic(&ctx.out, "simulation.json", &json(&report))?;
    let b = write_atomic(&ctx.out, "simulation.txt", text.as_bytes())?;
    Ok(format!("{text}wrote {}\nwrote {}\n", a.display(), b.display()))
}

fn cmd_compare(ctx: &Context) -> Result<String> {
    let problem = ctx.config.problem()?;
    let opt = ctx.config.optimizer()?;
    let factorizations = opt.factorizations.clone().unwrap_or_else(|| vec![(problem.m, 1)]);
    let strategies = opt.compare.clone().unwrap_or_else(|| vec![opt.strategy.clone()]);
    let table = compare_strategies(&problem, &factorizations, &strategies, ctx.seed)?;
    let text = table.to_text();
    let paths = [
        write_atomic(&ctx.out, "compare.csv", table.to_csv()?.as_bytes())?,
        write_atomic(&ctx.out, "compare.json", &json(&table))?,
        write_atomic(&ctx.out, "compare.txt", text.as_bytes())?,
    ];
    let mut out = text;
    for p in paths {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}

#[derive(Serialize)]
struct IdentifyReport {
    records: usize,
    parameters: Vec<String>,
    estimate: Vec<f64>,
    /// `σ·√diag((Σ BᵢᵀBᵢ)⁻¹)`.
    standard_error: Vec<f64>,
    rms_residual: f64,
    condition: f64,
}

fn cmd_identify(ctx: &Context, csv_path: &Path) -> Result<String> {
    let setup = ctx.config.setup()?;
    let records = read_measurements_csv(csv_path, setup.model.n_joints())?;
    let blocks = records
        .iter()
        .map(|r| build_b(&setup.model, &r.config, setup.mode, &setup.mask))
        .collect::<Result<Vec<_>>>()?;
    let id = identify(&blocks, &records)?;
    let cov = covariance(&blocks, setup.sigma)?;
    let report = IdentifyReport {
        records: records.len(),
        parameters: setup.mask.active_names(),
        estimate: id.estimate.active_values(&setup.mask),
        standard_error: (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        rms_residual: id.rms_residual,
        condition: id.condition,
    };
    let path = write_atomic(&ctx.out, "identification.json", &json(&report))?;
    let mut out = String::new();
    for (i, name) in report.parameters.iter().enumerate() {
        let _ = writeln!(out, "{name:<6} {:>14.6e} ± {:.2e}", report.estimate[i], report.standard_error[i]);
    }
    let _ = writeln!(out, "rms residual {:.6} mm, condition {:.3e}", report.rms_residual, report.condition);
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}
