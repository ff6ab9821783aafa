use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmin, DesignProblem, DesignReport, PlanEvaluator, PoseTerm, Rho0Stats, RunSummary, Stopwatch, Strategy, TracePoint};
use crate::constraints::{evaluate, is_feasible};
use crate::error::{Error, Result};
use crate::regression::ExperimentPlan;
use crate::seed::{derive_seed, rng_from_seed};

/// Quasi-Newton descent on `ρ₀/ρ₀(start) + μ·Σ max(0, c/s + margin)²` with
/// finite-difference gradients, where `s` is the natural scale of each
/// constraint (reach for lengths, payload for forces, 1 for angles). Joint
/// values are additionally kept inside their limits by projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientOptions {
    /// Central-difference step [rad].
    pub fd_step: f64,
    pub penalty_start: f64,
    pub penalty_growth: f64,
    pub penalty_loops: usize,
    /// Inner iterations per penalty loop.
    pub max_iterations: usize,
    /// Stop when an accepted step moves no variable further than this [rad].
    pub step_tolerance: f64,
    /// Offset added to every scaled constraint value inside the penalty, so
    /// that minimizers on an active constraint end up on its feasible side.
    pub penalty_margin: f64,
    /// Largest first trial move of any variable along a steepest-descent direction [rad].
    pub max_step: f64,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            penalty_start: 1.0,
            penalty_growth: 10.0,
            penalty_loops: 4,
            max_iterations: 200,
            step_tolerance: 1e-8,
            penalty_margin: 1e-4,
            max_step: 0.5,
        }
    }
}

impl GradientOptions {
    fn validate(&self) -> Result<()> {
        let ok = self.fd_step > 0.0
            && self.penalty_start > 0.0
            && self.penalty_growth >= 1.0
            && self.penalty_loops >= 1
            && self.step_tolerance >= 0.0
            && self.penalty_margin >= 0.0
            && self.max_step > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid gradient options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LocalResult {
    pub vars: Vec<f64>,
    pub rho0: f64,
    pub start_rho0: f64,
    pub iterations: usize,
    pub evaluations: u64,
    /// Best feasible `ρ₀` after each accepted step, with run-relative counts.
    pub trace: Vec<TracePoint>,
    /// Penalized objective after each accepted step, one list per penalty loop.
    pub history: Vec<Vec<f64>>,
}

/// Local search from a feasible start plan.
pub fn gradient_search(problem: &DesignProblem, start: &ExperimentPlan, opts: &GradientOptions) -> Result<LocalResult> {
    opts.validate()?;
    if start.mode != problem.mode || start.len() != problem.m {
        return Err(Error::invalid(format!(
            "start plan has {} {} poses, problem needs {} {}",
            start.len(),
            start.mode.as_str(),
            problem.m,
            problem.mode.as_str()
        )));
    }
    start.validate(&problem.model)?;
    for (i, c) in start.configs.iter().enumerate() {
        if !is_feasible(&evaluate(&problem.model, c, &problem.constraints, problem.mode)) {
            return Err(Error::invalid(format!("start pose {} violates the constraints", i + 1)));
        }
    }
    let eval = PlanEvaluator::new(problem)?;
    Ok(descend(&eval, &problem.encode(start), opts))
}

/// `n_starts` local searches from independently sampled feasible plans.
pub fn multi_start(problem: &DesignProblem, n_starts: usize, opts: &GradientOptions, seed: u64) -> Result<DesignReport> {
    if n_starts == 0 {
        return Err(Error::invalid("multi-start needs at least one start"));
    }
    opts.validate()?;
    let eval = PlanEvaluator::new(problem)?;
    let results = (0..n_starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let x0 = problem.sample_vars(&mut rng)?;
            Ok(descend(&eval, &x0, opts))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..n_starts).map(|i| derive_seed(seed, i as u64)).collect();
    Ok(local_report(
        problem,
        Strategy::MultiStart { starts: n_starts, gradient: opts.clone() },
        seed,
        results,
        &seeds,
        &vec![None; n_starts],
        0,
        0.0,
    ))
}

/// Collects local runs into a report; trace points continue after
/// `prior_evals` evaluations and `prior_s` seconds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_report(
    problem: &DesignProblem,
    strategy: Strategy,
    seed: u64,
    results: Vec<LocalResult>,
    seeds: &[u64],
    origins: &[Option<usize>],
    prior_evals: u64,
    prior_s: f64,
) -> DesignReport {
    let best = argmin(results.iter().map(|r| r.rho0)).expect("at least one run");
    let runs: Vec<RunSummary> = results
        .iter()
        .enumerate()
        .map(|(i, r)| RunSummary {
            index: i,
            seed: seeds[i],
            origin: origins[i],
            start_rho0: r.start_rho0,
            final_rho0: r.rho0,
            iterations: r.iterations,
            evaluations: r.evaluations,
        })
        .collect();
    let mut trace = Vec::new();
    let (mut evals, mut elapsed, mut best_so_far) = (prior_evals, prior_s, f64::INFINITY);
    for r in &results {
        for p in &r.trace {
            best_so_far = best_so_far.min(p.best_rho0);
            trace.push(TracePoint {
                evaluations: evals + p.evaluations,
                elapsed_s: elapsed + p.elapsed_s,
                best_rho0: best_so_far,
            });
        }
        evals += r.evaluations;
        elapsed += r.trace.last().map_or(0.0, |p| p.elapsed_s);
    }
    let vars = results[best].vars.clone();
    DesignReport {
        strategy,
        seed,
        best_plan: problem.decode(&vars),
        best_vars: vars,
        rho0_best: results[best].rho0,
        stats: Rho0Stats::from_values(results.iter().map(|r| r.rho0)),
        runs,
        trace,
        population: Vec::new(),
        evaluations: evals - prior_evals,
        factorization: None,
    }
}

/// Penalized objective in normalized units: `ρ₀` relative to its start value,
/// constraint values relative to their natural scale.
struct Objective<'e, 'p> {
    eval: &'e PlanEvaluator<'p>,
    pose_dim: usize,
    joint_bounds: Vec<(f64, f64)>,
    scales: Vec<f64>,
    margin: f64,
    rho_ref: f64,
    evaluations: u64,
}

impl Objective<'_, '_> {
    fn value(&self, terms: &[PoseTerm], mu: f64) -> f64 {
        let rho = self.eval.rho0_of(terms.iter());
        rho / self.rho_ref + mu * terms.iter().map(|t| self.violation(t)).sum::<f64>()
    }

    fn violation(&self, t: &PoseTerm) -> f64 {
        t.values
            .iter()
            .zip(&self.scales)
            .map(|(&v, &s)| (v / s + self.margin).max(0.0).powi(2))
            .sum()
    }

    fn terms(&mut self, x: &[f64]) -> Vec<PoseTerm> {
        self.evaluations += 1;
        self.eval.terms(x)
    }

    fn project(&self, x: &mut [f64]) {
        let nj = self.joint_bounds.len();
        for (i, v) in x.iter_mut().enumerate() {
            let k = i % self.pose_dim;
            if k < nj {
                *v = v.clamp(self.joint_bounds[k].0, self.joint_bounds[k].1);
            }
        }
    }

    /// Central differences; only the perturbed pose is rebuilt.
    fn gradient(&mut self, x: &[f64], terms: &[PoseTerm], mu: f64, h: f64) -> DVector<f64> {
        let violations: Vec<f64> = terms.iter().map(|t| self.violation(t)).collect();
        let violation: f64 = violations.iter().sum();
        let mut g = DVector::zeros(x.len());
        let mut pose = vec![0.0; self.pose_dim];
        for (p, chunk) in x.chunks(self.pose_dim).enumerate() {
            for j in 0..self.pose_dim {
                let mut side = |delta: f64| {
                    pose.copy_from_slice(chunk);
                    pose[j] += delta;
                    let t = self.eval.term(&pose);
                    let rho = self.eval.rho0_of(terms.iter().enumerate().map(|(i, o)| if i == p { &t } else { o }));
                    rho / self.rho_ref + mu * (violation - violations[p] + self.violation(&t))
                };
                let plus = side(h);
                let minus = side(-h);
                g[p * self.pose_dim + j] = (plus - minus) / (2.0 * h);
            }
        }
        self.evaluations += 2 * x.len() as u64;
        g
    }
}

/// Normalized copy of `x` (angles mapped back into their canonical ranges,
/// then rounded to the lattice if there is one) and its exact feasibility
/// and `ρ₀`.
fn canonical(eval: &PlanEvaluator, x: &[f64]) -> (Vec<f64>, bool, f64) {
    let enc = eval.encoding();
    let mut y: Vec<f64> = x.chunks(enc.dim()).flat_map(|p| enc.encode(&enc.decode(p))).collect();
    if let Some(levels) = eval.lattice() {
        for (i, v) in y.iter_mut().enumerate() {
            *v = enc.snap(i % enc.dim(), *v, levels);
        }
    }
    let terms = eval.terms(&y);
    (y.clone(), terms.iter().all(|t| t.feasible), eval.rho0_of(terms.iter()))
}

pub(crate) fn descend(eval: &PlanEvaluator, x0: &[f64], opts: &GradientOptions) -> LocalResult {
    let clock = Stopwatch::start();
    let enc = eval.encoding();
    let mut obj = Objective {
        eval,
        pose_dim: enc.dim(),
        joint_bounds: enc.bounds()[..enc.n_joints()].to_vec(),
        scales: eval.constraint_scales(),
        margin: opts.penalty_margin,
        rho_ref: 1.0,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    let mut terms = obj.terms(&x);
    let start_rho0 = eval.rho0_of(terms.iter());
    if start_rho0.is_finite() {
        obj.rho_ref = start_rho0;
    }
    let start_ok = terms.iter().all(|t| t.feasible) && start_rho0.is_finite();
    let mut best: Option<(f64, Vec<f64>)> = start_ok.then(|| (start_rho0, x.clone()));
    let mut trace = vec![TracePoint { evaluations: 1, elapsed_s: clock.seconds(), best_rho0: start_rho0 }];
    let mut history = Vec::new();
    let mut iterations = 0;

    if start_rho0.is_finite() {
        let n = x.len();
        let mut mu = opts.penalty_start;
        'outer: for _ in 0..opts.penalty_loops {
            let mut f = obj.value(&terms, mu);
            let mut g = obj.gradient(&x, &terms, mu, opts.fd_step);
            let mut loop_history = vec![f];
            let mut h: Option<DMatrix<f64>> = None;
            for _ in 0..opts.max_iterations {
                if !g.iter().all(|v| v.is_finite()) {
                    history.push(loop_history);
                    break 'outer;
                }
                let mut d = match &h {
                    Some(h) => -(h * &g),
                    None => -&g,
                };
                if d.dot(&g) >= 0.0 {
                    h = None;
                    d = -&g;
                }
                let dmax = d.amax();
                if dmax == 0.0 {
                    break;
                }
                let mut alpha = if h.is_none() { opts.max_step / dmax } else { (opts.max_step / dmax).min(1.0) };
                let mut accepted = None;
                for _ in 0..60 {
                    let mut xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                    obj.project(&mut xn);
                    let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
                    if s.amax() == 0.0 {
                        break;
                    }
                    let tn = obj.terms(&xn);
                    let fn_ = obj.value(&tn, mu);
                    if fn_.is_finite() && fn_ <= f && fn_ <= f + 1e-4 * g.dot(&s).min(0.0) {
                        accepted = Some((xn, tn, fn_, s));
                        break;
                    }
                    alpha *= 0.5;
                }
                let Some((xn, tn, fnew, s)) = accepted else {
                    if h.take().is_some() {
                        continue;
                    }
                    break;
                };
                iterations += 1;
                let gn = obj.gradient(&xn, &tn, mu, opts.fd_step);
                let y = &gn - &g;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() && gn.iter().all(|v| v.is_finite()) {
                    let hm = h.get_or_insert_with(|| DMatrix::identity(n, n) * (sy / y.norm_squared()));
                    let hy = &*hm * &y;
                    let rho = 1.0 / sy;
                    let coef = rho + rho * rho * y.dot(&hy);
                    *hm += &s * s.transpose() * coef - (&hy * s.transpose() + &s * hy.transpose()) * rho;
                }
                let step = s.amax();
                x = xn;
                terms = tn;
                f = fnew;
                g = gn;
                loop_history.push(f);
                if terms.iter().all(|t| t.feasible) {
                    let rho = eval.rho0_of(terms.iter());
                    if best.as_ref().is_none_or(|(b, _)| rho < *b) {
                        best = Some((rho, x.clone()));
                    }
                }
                trace.push(TracePoint {
                    evaluations: obj.evaluations,
                    elapsed_s: clock.seconds(),
                    best_rho0: best.as_ref().map_or(f64::INFINITY, |b| b.0),
                });
                if step < opts.step_tolerance {
                    break;
                }
            }
            history.push(loop_history);
            mu *= opts.penalty_growth;
        }
    }

    // Canonicalize the best iterate; fall back to the start if that loses anything.
    let (vars, rho0) = match best {
        Some((_, bx)) => {
            let (y, ok, rho) = canonical(eval, &bx);
            if ok && rho <= start_rho0 {
                (y, rho)
            } else {
                (x0.to_vec(), start_rho0)
            }
        }
        None => (x0.to_vec(), start_rho0),
    };
    let evaluations = obj.evaluations;
    // canonicalization may cost a rounding error; keep the trace non-increasing
    for point in trace.iter_mut().filter(|p| p.best_rho0 < rho0) {
        point.best_rho0 = rho0;
    }
    trace.push(TracePoint { evaluations, elapsed_s: clock.seconds(), best_rho0: rho0 });
    LocalResult { vars, rho0, start_rho0, iterations, evaluations, trace, history }
}
