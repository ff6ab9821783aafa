use rayon::prelude::*;

use super::{argmin, running_best, DesignProblem, DesignReport, PlanEvaluator, Rho0Stats, RunSummary, Stopwatch, Strategy};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

const CHUNK: usize = 1024;

/// Best of `n_samples` independently drawn feasible plans. Sample `i` is drawn
/// from seed `derive_seed(seed, i)`.
pub fn random_search(problem: &DesignProblem, n_samples: usize, seed: u64) -> Result<DesignReport> {
    if n_samples == 0 {
        return Err(Error::invalid("random search needs at least one sample"));
    }
    let eval = PlanEvaluator::new(problem)?;
    let mut values = Vec::with_capacity(n_samples);
    let mut seconds = Vec::with_capacity(n_samples);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in (0..n_samples).step_by(CHUNK) {
        let end = (start + CHUNK).min(n_samples);
        let chunk = (start..end)
            .into_par_iter()
            .map(|i| {
                let clock = Stopwatch::start();
                let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                let x = problem.sample_vars(&mut rng)?;
                let rho = eval.rho0(&x);
                Ok((x, rho, clock.seconds()))
            })
            .collect::<Result<Vec<_>>>()?;
        for (x, rho, s) in chunk {
            if best.as_ref().is_none_or(|(b, _)| rho < *b) {
                best = Some((rho, x));
            }
            values.push(rho);
            seconds.push(s);
        }
    }
    let (rho0_best, best_vars) = best.expect("at least one sample");
    debug_assert_eq!(argmin(values.iter().cloned()).map(|i| values[i]), Some(rho0_best));
    let runs = values
        .iter()
        .enumerate()
        .map(|(i, &v)| RunSummary {
            index: i,
            seed: derive_seed(seed, i as u64),
            origin: None,
            start_rho0: v,
            final_rho0: v,
            iterations: 0,
            evaluations: 1,
        })
        .collect();
    Ok(DesignReport {
        strategy: Strategy::Random { samples: n_samples },
        seed,
        best_plan: problem.decode(&best_vars),
        best_vars,
        rho0_best,
        stats: Rho0Stats::from_values(values.iter().cloned()),
        runs,
        trace: running_best(&values, &seconds, 0),
        population: Vec::new(),
        evaluations: n_samples as u64,
        factorization: None,
    })
}
