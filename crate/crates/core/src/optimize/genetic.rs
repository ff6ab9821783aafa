use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmin, DesignProblem, DesignReport, Individual, PlanEvaluator, Rho0Stats, RunSummary, Stopwatch, Strategy, TracePoint};
use crate::constraints::{evaluate, is_feasible, Sampler};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Real-coded genetic algorithm settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneticOptions {
    pub pop_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Mutation s.t.d. as a fraction of each variable's range.
    pub mutation_scale: f64,
    /// Per-gene mutation probability; `1 / dimension` when absent.
    pub mutation_rate: Option<f64>,
    pub tournament: usize,
    pub elitism: usize,
    /// Force-direction redraws tried before a pose is replaced by a fresh sample.
    pub repair_tries: usize,
}

impl Default for GeneticOptions {
    fn default() -> Self {
        Self {
            pop_size: 50,
            generations: 20,
            crossover_rate: 0.9,
            mutation_scale: 0.05,
            mutation_rate: None,
            tournament: 2,
            elitism: 1,
            repair_tries: 20,
        }
    }
}

impl GeneticOptions {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.pop_size >= 2
            && unit(self.crossover_rate)
            && self.mutation_scale >= 0.0
            && self.mutation_rate.is_none_or(unit)
            && self.tournament >= 1
            && self.elitism < self.pop_size;
        if !ok {
            return Err(Error::invalid(format!("invalid genetic options {self:?}")));
        }
        Ok(())
    }
}

/// GA from a randomly sampled initial population; member `i` is drawn from
/// `derive_seed(seed, i)`.
pub fn genetic_search(problem: &DesignProblem, opts: &GeneticOptions, seed: u64) -> Result<DesignReport> {
    genetic_search_from(problem, opts, &[], seed)
}

/// GA whose initial population starts with the given members (repaired if
/// needed) and is filled up with sampled plans.
pub fn genetic_search_from(
    problem: &DesignProblem,
    opts: &GeneticOptions,
    initial: &[Vec<f64>],
    seed: u64,
) -> Result<DesignReport> {
    opts.validate()?;
    let dim = problem.dim();
    if initial.len() > opts.pop_size || initial.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid(format!(
            "initial population must hold at most {} vectors of length {dim}",
            opts.pop_size
        )));
    }
    let eval = PlanEvaluator::new(problem)?;
    let ga = Ga {
        problem,
        opts,
        sampler: problem.sampler(),
        pose_dim: eval.pose_dim(),
        mutation_rate: opts.mutation_rate.unwrap_or(1.0 / dim as f64),
    };
    let mut rng = rng_from_seed(derive_seed(seed, u64::MAX));
    let clock = Stopwatch::start();

    let sampled = (initial.len()..opts.pop_size)
        .into_par_iter()
        .map(|i| problem.sample_vars(&mut rng_from_seed(derive_seed(seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    let mut pop: Vec<Vec<f64>> = Vec::with_capacity(opts.pop_size);
    for x in initial {
        let mut x = x.clone();
        ga.repair(&mut x, &mut rng)?;
        pop.push(x);
    }
    pop.extend(sampled);
    let mut fitness: Vec<f64> = pop.par_iter().map(|x| eval.rho0(x)).collect();
    let mut evaluations = pop.len() as u64;
    let start_best = fitness.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut trace = vec![TracePoint { evaluations, elapsed_s: clock.seconds(), best_rho0: start_best }];

    for _ in 0..opts.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
        let mut next: Vec<Vec<f64>> = order[..opts.elitism].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order[..opts.elitism].iter().map(|&i| fitness[i]).collect();
        let mut children = Vec::with_capacity(opts.pop_size);
        while next.len() + children.len() < opts.pop_size {
            let a = ga.tournament(&fitness, &mut rng);
            let b = ga.tournament(&fitness, &mut rng);
            let (mut c1, mut c2) = (pop[a].clone(), pop[b].clone());
            if rng.random::<f64>() < opts.crossover_rate {
                for j in 0..dim {
                    if rng.random::<bool>() {
                        std::mem::swap(&mut c1[j], &mut c2[j]);
                    }
                }
            }
            for mut c in [c1, c2] {
                if next.len() + children.len() == opts.pop_size {
                    break;
                }
                ga.mutate(&mut c, &mut rng);
                ga.repair(&mut c, &mut rng)?;
                children.push(c);
            }
        }
        let child_fit: Vec<f64> = children.par_iter().map(|x| eval.rho0(x)).collect();
        evaluations += children.len() as u64;
        next.extend(children);
        next_fit.extend(child_fit);
        pop = next;
        fitness = next_fit;
        let best = fitness.iter().cloned().fold(f64::INFINITY, f64::min);
        trace.push(TracePoint { evaluations, elapsed_s: clock.seconds(), best_rho0: best });
    }

    let best = argmin(fitness.iter().cloned()).expect("non-empty population");
    let population: Vec<Individual> = pop
        .iter()
        .zip(&fitness)
        .map(|(x, &rho0)| Individual { vars: x.clone(), rho0 })
        .collect();
    let best_vars = pop[best].clone();
    Ok(DesignReport {
        strategy: Strategy::Genetic { ga: opts.clone(), repeats: 1 },
        seed,
        best_plan: problem.decode(&best_vars),
        best_vars,
        rho0_best: fitness[best],
        stats: Rho0Stats::from_values([fitness[best]]),
        runs: vec![RunSummary {
            index: 0,
            seed,
            origin: None,
            start_rho0: start_best,
            final_rho0: fitness[best],
            iterations: opts.generations,
            evaluations,
        }],
        trace,
        population,
        evaluations,
        factorization: None,
    })
}

struct Ga<'a> {
    problem: &'a DesignProblem,
    opts: &'a GeneticOptions,
    sampler: Sampler<'a>,
    pose_dim: usize,
    mutation_rate: f64,
}

impl Ga<'_> {
    fn tournament(&self, fitness: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let mut best = rng.random_range(0..fitness.len());
        for _ in 1..self.opts.tournament {
            let c = rng.random_range(0..fitness.len());
            if fitness[c] < fitness[best] || (fitness[c] == fitness[best] && c < best) {
                best = c;
            }
        }
        best
    }

    /// Gaussian steps in the continuous case; one-level moves on a lattice.
    fn mutate(&self, x: &mut [f64], rng: &mut ChaCha8Rng) {
        let bounds = self.sampler.encoding().bounds();
        for (i, v) in x.iter_mut().enumerate() {
            if rng.random::<f64>() >= self.mutation_rate {
                continue;
            }
            let (lo, hi) = bounds[i % self.pose_dim];
            match self.problem.lattice {
                Some(levels) => {
                    let step = (hi - lo) / (levels - 1) as f64;
                    *v += if rng.random::<bool>() { step } else { -step };
                }
                None => {
                    let sd = self.opts.mutation_scale * (hi - lo);
                    if sd > 0.0 {
                        *v += Normal::new(0.0, sd).expect("positive s.t.d.").sample(rng);
                    }
                }
            }
        }
    }

    /// Clamps into the bounds (snapping to the lattice if any), then fixes
    /// infeasible poses by redrawing the force direction and, failing that,
    /// by a fresh feasible pose.
    fn repair(&self, x: &mut [f64], rng: &mut ChaCha8Rng) -> Result<()> {
        let enc = self.sampler.encoding();
        let p = self.problem;
        for pose in x.chunks_mut(self.pose_dim) {
            for (i, v) in pose.iter_mut().enumerate() {
                let (lo, hi) = enc.bounds()[i];
                *v = match p.lattice {
                    Some(levels) => enc.snap(i, *v, levels),
                    None => v.clamp(lo, hi),
                };
            }
            if is_feasible(&evaluate(&p.model, &enc.decode(pose), &p.constraints, p.mode)) {
                continue;
            }
            if self.sampler.redraw_direction(pose, rng, self.opts.repair_tries) {
                continue;
            }
            pose.copy_from_slice(&self.sampler.draw_vars(rng)?);
        }
        Ok(())
    }
}
