use rayon::prelude::*;

use super::gradient::{descend, local_report};
use super::{genetic_search, DesignProblem, DesignReport, GeneticOptions, GradientOptions, PlanEvaluator, Rho0Stats, Strategy};
use crate::error::Result;

/// Genetic search followed by local descent from the best half
/// (`ceil(pop/2)`) of the final population.
pub fn hybrid_search(
    problem: &DesignProblem,
    ga: &GeneticOptions,
    gradient: &GradientOptions,
    seed: u64,
) -> Result<DesignReport> {
    let stage = genetic_search(problem, ga, seed)?;
    let eval = PlanEvaluator::new(problem)?;
    let mut ranked: Vec<usize> = (0..stage.population.len()).collect();
    ranked.sort_by(|&a, &b| {
        stage.population[a].rho0.total_cmp(&stage.population[b].rho0).then(a.cmp(&b))
    });
    ranked.truncate(stage.population.len().div_ceil(2).max(1));

    let results: Vec<_> = ranked
        .par_iter()
        .map(|&i| descend(&eval, &stage.population[i].vars, gradient))
        .collect();
    let n = results.len();
    let prior_s = stage.trace.last().map_or(0.0, |p| p.elapsed_s);
    let mut report = local_report(
        problem,
        Strategy::Hybrid { ga: ga.clone(), gradient: gradient.clone(), repeats: 1 },
        seed,
        results,
        &vec![seed; n],
        &(0..n).map(Some).collect::<Vec<_>>(),
        stage.evaluations,
        prior_s,
    );
    let mut trace = stage.trace.clone();
    let ga_best = stage.rho0_best;
    trace.extend(report.trace.iter().map(|p| super::TracePoint { best_rho0: p.best_rho0.min(ga_best), ..*p }));
    report.trace = trace;
    report.evaluations += stage.evaluations;
    report.stats = Rho0Stats::from_values([report.rho0_best]);
    report.population = stage.population;
    Ok(report)
}
