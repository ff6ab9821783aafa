//! Selection of measurement plans that minimize the test-pose accuracy criterion.
//!
//! A plan of `m` poses is encoded as one flat decision vector, pose after pose
//! (see [`PoseEncoding`]). Every strategy is a pure function of the problem,
//! its hyperparameters and a master seed; independent tasks (samples, starts,
//! fitness evaluations) run on the rayon pool but results are collected in
//! task order, so the outcome does not depend on the number of threads.

mod factorized;
mod genetic;
mod gradient;
mod hybrid;
mod random;

use std::time::Instant;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{evaluate, ConstraintSet, PoseEncoding, Sampler};
use crate::criterion::{Criterion, TestPoseSet};
use crate::error::{Error, Result};
use crate::model::{ParamMask, RobotModel};
use crate::regression::{sum_sorted, CalibrationMode, ExperimentPlan};
use crate::seed::derive_seed;

pub use factorized::{compare_strategies, factorized_design, ComparisonRow, ComparisonTable};
pub use genetic::{genetic_search, genetic_search_from, GeneticOptions};
pub use gradient::{gradient_search, multi_start, GradientOptions, LocalResult};
pub use hybrid::hybrid_search;
pub use random::random_search;

/// A pose-selection problem: choose `m` feasible measurement configurations
/// minimizing `ρ₀` at the test poses.
#[derive(Clone, Debug)]
pub struct DesignProblem {
    pub model: RobotModel,
    pub mode: CalibrationMode,
    pub mask: ParamMask,
    pub test: TestPoseSet,
    pub sigma: f64,
    pub constraints: ConstraintSet,
    pub m: usize,
    /// When set, random sampling and the genetic search only visit an evenly
    /// spaced grid with this many levels per decision variable.
    pub lattice: Option<usize>,
}

impl DesignProblem {
    pub fn new(
        model: RobotModel,
        mode: CalibrationMode,
        mask: ParamMask,
        test: TestPoseSet,
        sigma: f64,
        constraints: ConstraintSet,
        m: usize,
    ) -> Result<Self> {
        let problem = Self { model, mode, mask, test, sigma, constraints, m, lattice: None };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_lattice(mut self, levels: Option<usize>) -> Result<Self> {
        if matches!(levels, Some(l) if l < 2) {
            return Err(Error::invalid("a lattice needs at least 2 levels"));
        }
        self.lattice = levels;
        Ok(self)
    }

    /// The same problem with a different number of poses.
    pub fn with_m(&self, m: usize) -> Result<Self> {
        let problem = Self { m, ..self.clone() };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<()> {
        Criterion::new(&self.model, self.mode, &self.mask, &self.test, self.sigma)?;
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("design needs sigma > 0"));
        }
        let d = self.mask.count();
        let needed = d.div_ceil(3);
        if self.m < needed {
            return Err(Error::invalid(format!(
                "{} poses cannot identify {d} parameters (3 observations per pose, need m >= {needed})",
                self.m
            )));
        }
        Ok(())
    }

    pub fn encoding(&self) -> PoseEncoding {
        PoseEncoding::new(&self.model, self.mode)
    }

    /// Length of the decision vector.
    pub fn dim(&self) -> usize {
        self.m * self.encoding().dim()
    }

    pub fn sampler(&self) -> Sampler<'_> {
        Sampler::new(&self.model, &self.constraints, self.mode).with_lattice(self.lattice)
    }

    pub fn criterion(&self) -> Result<Criterion<'_>> {
        Criterion::new(&self.model, self.mode, &self.mask, &self.test, self.sigma)
    }

    pub fn decode(&self, x: &[f64]) -> ExperimentPlan {
        let enc = self.encoding();
        ExperimentPlan::new(x.chunks(enc.dim()).map(|p| enc.decode(p)).collect(), self.mode)
    }

    pub fn encode(&self, plan: &ExperimentPlan) -> Vec<f64> {
        let enc = self.encoding();
        plan.configs.iter().flat_map(|c| enc.encode(c)).collect()
    }

    /// Draws a full feasible plan from `rng`.
    pub fn sample_vars(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let sampler = self.sampler();
        let mut x = Vec::with_capacity(self.dim());
        for _ in 0..self.m {
            x.extend(sampler.draw_vars(rng)?);
        }
        Ok(x)
    }
}

/// Cached contribution of one pose: Gram matrix over the active columns and
/// its constraint violation.
#[derive(Clone, Debug)]
pub(crate) struct PoseTerm {
    key: Vec<u64>,
    gram: DMatrix<f64>,
    /// Constraint values of the pose.
    values: Vec<f64>,
    feasible: bool,
}

/// Objective evaluation shared by all strategies. Unidentifiable plans score `+∞`.
pub(crate) struct PlanEvaluator<'a> {
    problem: &'a DesignProblem,
    criterion: Criterion<'a>,
    encoding: PoseEncoding,
}

impl<'a> PlanEvaluator<'a> {
    pub fn new(problem: &'a DesignProblem) -> Result<Self> {
        Ok(Self { problem, criterion: problem.criterion()?, encoding: problem.encoding() })
    }

    pub fn pose_dim(&self) -> usize {
        self.encoding.dim()
    }

    pub fn encoding(&self) -> &PoseEncoding {
        &self.encoding
    }

    pub fn term(&self, vars: &[f64]) -> PoseTerm {
        let p = self.problem;
        let config = self.encoding.decode(vars);
        let values = evaluate(&p.model, &config, &p.constraints, p.mode);
        let feasible = values.iter().all(|&v| v <= 0.0);
        PoseTerm { key: config.sort_key(), gram: self.criterion.gram(&config), values, feasible }
    }

    pub fn lattice(&self) -> Option<usize> {
        self.problem.lattice
    }

    pub fn constraint_scales(&self) -> Vec<f64> {
        self.problem.constraints.scales(&self.problem.model)
    }

    pub fn terms(&self, x: &[f64]) -> Vec<PoseTerm> {
        x.chunks(self.pose_dim()).map(|p| self.term(p)).collect()
    }

    pub fn rho0_of<'t>(&self, terms: impl Iterator<Item = &'t PoseTerm>) -> f64 {
        let grams = terms.map(|t| (t.key.as_slice(), &t.gram)).collect();
        let m = sum_sorted(grams, self.criterion.dim());
        match self.criterion.factor(&m) {
            Ok(f) => self.criterion.rho0_factored(&f),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn rho0(&self, x: &[f64]) -> f64 {
        self.rho0_of(self.terms(x).iter())
    }
}

/// Outcome of one independent run (a random sample, a local search, or a GA repetition).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub index: usize,
    pub seed: u64,
    /// For hybrid runs, the rank of the GA member the run started from.
    pub origin: Option<usize>,
    pub start_rho0: f64,
    pub final_rho0: f64,
    pub iterations: usize,
    pub evaluations: u64,
}

/// One point of a convergence trace. `elapsed_s` accumulates task time in
/// task order, so it is comparable between thread counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub evaluations: u64,
    pub elapsed_s: f64,
    pub best_rho0: f64,
}

/// Minimum, mean and maximum `ρ₀` over a strategy's runs; unidentifiable
/// runs are counted separately and excluded from the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rho0Stats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
    pub unidentifiable: usize,
}

impl Rho0Stats {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut min, mut max, mut sum, mut count, mut bad) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0, 0);
        for v in values {
            if v.is_finite() {
                min = min.min(v);
                max = max.max(v);
                sum += v;
                count += 1;
            } else {
                bad += 1;
            }
        }
        if count == 0 {
            return Self { min: f64::INFINITY, mean: f64::INFINITY, max: f64::INFINITY, count, unidentifiable: bad };
        }
        Self { min, mean: sum / count as f64, max, count, unidentifiable: bad }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { min: self.min * factor, mean: self.mean * factor, max: self.max * factor, ..*self }
    }
}

/// A GA individual in its final population.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub vars: Vec<f64>,
    pub rho0: f64,
}

/// Repeated-plan bookkeeping of a factorized design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Factorization {
    pub m0: usize,
    pub k: usize,
    pub rho0_sub: f64,
}

#[derive(Clone, Debug)]
pub struct DesignReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub best_vars: Vec<f64>,
    pub best_plan: ExperimentPlan,
    pub rho0_best: f64,
    pub stats: Rho0Stats,
    pub runs: Vec<RunSummary>,
    pub trace: Vec<TracePoint>,
    pub population: Vec<Individual>,
    pub evaluations: u64,
    pub factorization: Option<Factorization>,
}

/// Search strategy and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Random {
        samples: usize,
    },
    MultiStart {
        starts: usize,
        #[serde(default)]
        gradient: GradientOptions,
    },
    Genetic {
        #[serde(default)]
        ga: GeneticOptions,
        #[serde(default = "one")]
        repeats: usize,
    },
    Hybrid {
        #[serde(default)]
        ga: GeneticOptions,
        #[serde(default)]
        gradient: GradientOptions,
        #[serde(default = "one")]
        repeats: usize,
    },
}

fn one() -> usize {
    1
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random { .. } => "random",
            Strategy::MultiStart { .. } => "multi_start",
            Strategy::Genetic { .. } => "genetic",
            Strategy::Hybrid { .. } => "hybrid",
        }
    }
}

/// Dispatches to the strategy's search.
pub fn run_strategy(problem: &DesignProblem, strategy: &Strategy, seed: u64) -> Result<DesignReport> {
    match strategy {
        Strategy::Random { samples } => random_search(problem, *samples, seed),
        Strategy::MultiStart { starts, gradient } => multi_start(problem, *starts, gradient, seed),
        Strategy::Genetic { ga, repeats } => repeat_runs(strategy, *repeats, seed, |s| genetic_search(problem, ga, s)),
        Strategy::Hybrid { ga, gradient, repeats } => {
            repeat_runs(strategy, *repeats, seed, |s| hybrid_search(problem, ga, gradient, s))
        }
    }
}

/// Best of `repeats` independent seeded runs; statistics over their bests.
fn repeat_runs(
    strategy: &Strategy,
    repeats: usize,
    seed: u64,
    run: impl Fn(u64) -> Result<DesignReport>,
) -> Result<DesignReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    if repeats == 1 {
        let mut report = run(seed)?;
        report.strategy = strategy.clone();
        return Ok(report);
    }
    let reports = (0..repeats)
        .map(|r| run(derive_seed(seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let stats = Rho0Stats::from_values(reports.iter().map(|r| r.rho0_best));
    let best = argmin(reports.iter().map(|r| r.rho0_best)).unwrap_or(0);
    let mut runs = Vec::new();
    let mut trace = Vec::new();
    let (mut evals, mut elapsed, mut best_so_far) = (0u64, 0.0, f64::INFINITY);
    for (r, report) in reports.iter().enumerate() {
        runs.push(RunSummary {
            index: r,
            seed: report.seed,
            origin: None,
            start_rho0: report.runs.iter().map(|s| s.start_rho0).fold(f64::INFINITY, f64::min),
            final_rho0: report.rho0_best,
            iterations: report.runs.iter().map(|s| s.iterations).sum(),
            evaluations: report.evaluations,
        });
        for p in &report.trace {
            best_so_far = best_so_far.min(p.best_rho0);
            trace.push(TracePoint {
                evaluations: evals + p.evaluations,
                elapsed_s: elapsed + p.elapsed_s,
                best_rho0: best_so_far,
            });
        }
        evals += report.evaluations;
        elapsed += report.trace.last().map_or(0.0, |p| p.elapsed_s);
    }
    let chosen = reports.into_iter().nth(best).expect("at least one repeat");
    Ok(DesignReport {
        strategy: strategy.clone(),
        seed,
        stats,
        runs,
        trace,
        evaluations: evals,
        ..chosen
    })
}

/// Index of the first minimum; `+∞` entries only win when all are `+∞`.
pub(crate) fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Wall-clock stopwatch for trace timestamps.
pub(crate) struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Best-so-far trace from values in evaluation order, one point per value.
pub(crate) fn running_best(values: &[f64], seconds: &[f64], start_evals: u64) -> Vec<TracePoint> {
    let mut best = f64::INFINITY;
    let mut elapsed = 0.0;
    values
        .iter()
        .zip(seconds)
        .enumerate()
        .map(|(i, (&v, &s))| {
            best = best.min(v);
            elapsed += s;
            TracePoint { evaluations: start_evals + i as u64 + 1, elapsed_s: elapsed, best_rho0: best }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn too_few_poses_are_rejected() {
        let err = DesignProblem::new(
            fixtures::desk_6r(),
            CalibrationMode::Geometric,
            fixtures::desk_mask(),
            fixtures::desk_test_poses(),
            0.03,
            fixtures::desk_constraints(),
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("m >= 3"));
    }

    #[test]
    fn stats_skip_unidentifiable() {
        let s = Rho0Stats::from_values([2.0, f64::INFINITY, 1.0, 3.0]);
        assert_eq!((s.min, s.mean, s.max, s.count, s.unidentifiable), (1.0, 2.0, 3.0, 3, 1));
    }

    #[test]
    fn argmin_takes_first_minimum() {
        assert_eq!(argmin([3.0, 1.0, 1.0].into_iter()), Some(1));
        assert_eq!(argmin([f64::INFINITY, f64::INFINITY].into_iter()), Some(0));
        assert_eq!(argmin(std::iter::empty()), None);
    }

    #[test]
    fn strategy_json_round_trip() {
        let s: Strategy = serde_json::from_str(r#"{"kind": "hybrid", "ga": {"pop_size": 10}, "repeats": 3}"#).unwrap();
        match &s {
            Strategy::Hybrid { ga, repeats, .. } => assert_eq!((ga.pop_size, ga.generations, *repeats), (10, 20, 3)),
            other => panic!("{other:?}"),
        }
        let back: Strategy = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<Strategy>(r#"{"kind": "random", "samples": 1, "extra": 0}"#).is_err());
    }
}
