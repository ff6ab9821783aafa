use std::fmt::Write as _;

use serde::Serialize;

use super::{run_strategy, DesignProblem, DesignReport, Factorization, PlanEvaluator, Stopwatch, Strategy};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Optimizes `m0` distinct poses and repeats each of them `k` times.
/// The reported `ρ₀` is evaluated on the full repeated plan.
pub fn factorized_design(
    problem: &DesignProblem,
    m0: usize,
    k: usize,
    strategy: &Strategy,
    seed: u64,
) -> Result<DesignReport> {
    if k == 0 || m0 * k != problem.m {
        return Err(Error::invalid(format!("{m0}x{k} does not factor m = {}", problem.m)));
    }
    let sub = problem.with_m(m0)?;
    let mut report = run_strategy(&sub, strategy, seed)?;
    let rho0_sub = report.rho0_best;
    if k > 1 {
        let plan = report.best_plan.repeated(k);
        let vars = problem.encode(&plan);
        report.rho0_best = PlanEvaluator::new(problem)?.rho0(&vars);
        report.best_vars = vars;
        report.best_plan = plan;
        report.stats = report.stats.scaled(1.0 / (k as f64).sqrt());
    }
    report.factorization = Some(Factorization { m0, k, rho0_sub });
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub m0: usize,
    pub k: usize,
    pub rho0_min: f64,
    pub rho0_mean: f64,
    pub rho0_max: f64,
    /// Best `ρ₀` of the `m0`-pose subproblem.
    pub rho0_sub: f64,
    /// `|ρ₀ − ρ₀_sub/√k| / ρ₀`; zero up to rounding.
    pub sqrt_k_residual: f64,
    /// `ρ₀` over that of the same strategy's `k = 1` row, when present.
    pub ratio_vs_direct: Option<f64>,
    pub evaluations: u64,
    #[serde(skip)]
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub m: usize,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

/// Runs every strategy on every factorization `(m0, k)` of `problem.m`.
/// The run of strategy `s` on factorization `f` uses seed
/// `derive_seed(derive_seed(seed, s), f)`.
pub fn compare_strategies(
    problem: &DesignProblem,
    factorizations: &[(usize, usize)],
    strategies: &[Strategy],
    seed: u64,
) -> Result<ComparisonTable> {
    if factorizations.is_empty() || strategies.is_empty() {
        return Err(Error::invalid("comparison needs at least one strategy and one factorization"));
    }
    if let Some((m0, k)) = factorizations.iter().find(|(m0, k)| m0 * k != problem.m) {
        return Err(Error::invalid(format!("{m0}x{k} does not factor m = {}", problem.m)));
    }
    let mut rows = Vec::new();
    for (si, strategy) in strategies.iter().enumerate() {
        let first = rows.len();
        for (fi, &(m0, k)) in factorizations.iter().enumerate() {
            let clock = Stopwatch::start();
            let run_seed = derive_seed(derive_seed(seed, si as u64), fi as u64);
            let r = factorized_design(problem, m0, k, strategy, run_seed)?;
            let sub = r.factorization.expect("factorized report").rho0_sub;
            rows.push(ComparisonRow {
                strategy: strategy.name().to_string(),
                m0,
                k,
                rho0_min: r.rho0_best,
                rho0_mean: r.stats.mean,
                rho0_max: r.stats.max,
                rho0_sub: sub,
                sqrt_k_residual: ((r.rho0_best - sub / (k as f64).sqrt()) / r.rho0_best).abs(),
                ratio_vs_direct: None,
                evaluations: r.evaluations,
                wall_s: clock.seconds(),
            });
        }
        if let Some(direct) = rows[first..].iter().find(|r| r.k == 1).map(|r| r.rho0_min) {
            for row in &mut rows[first..] {
                row.ratio_vs_direct = Some(row.rho0_min / direct);
            }
        }
    }
    Ok(ComparisonTable { m: problem.m, seed, rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record([
            "strategy",
            "m0",
            "k",
            "rho0_min",
            "rho0_mean",
            "rho0_max",
            "rho0_sub",
            "sqrt_k_residual",
            "ratio_vs_direct",
            "evaluations",
            "wall_s",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.m0.to_string(),
                r.k.to_string(),
                r.rho0_min.to_string(),
                r.rho0_mean.to_string(),
                r.rho0_max.to_string(),
                r.rho0_sub.to_string(),
                r.sqrt_k_residual.to_string(),
                r.ratio_vs_direct.map(|v| v.to_string()).unwrap_or_default(),
                r.evaluations.to_string(),
                format!("{:.3}", r.wall_s),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "m = {}, seed = {}", self.m, self.seed);
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>10} {:>10} {:>8} {:>9}",
            "strategy", "m0 x k", "rho0 min", "mean", "max", "ratio", "time [s]"
        );
        for r in &self.rows {
            let ratio = r.ratio_vs_direct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>8} {:>9.2}",
                r.strategy,
                format!("{}x{}", r.m0, r.k),
                r.rho0_min,
                r.rho0_mean,
                r.rho0_max,
                ratio,
                r.wall_s
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::regression::CalibrationMode;
    use approx::assert_relative_eq;

    fn desk(m: usize) -> DesignProblem {
        DesignProblem::new(
            fixtures::desk_6r(),
            CalibrationMode::Geometric,
            fixtures::desk_mask(),
            fixtures::desk_test_poses(),
            0.03,
            fixtures::desk_constraints(),
            m,
        )
        .unwrap()
    }

    #[test]
    fn repetition_law_holds() {
        let p = desk(12);
        let s = Strategy::Random { samples: 50 };
        let r = factorized_design(&p, 3, 4, &s, 2).unwrap();
        let f = r.factorization.unwrap();
        assert_relative_eq!(r.rho0_best, f.rho0_sub / 2.0, max_relative = 1e-12);
        assert_eq!(r.best_plan.len(), 12);
    }

    #[test]
    fn identity_factorization_is_direct() {
        let p = desk(4);
        let s = Strategy::Random { samples: 20 };
        let a = factorized_design(&p, 4, 1, &s, 6).unwrap();
        let b = run_strategy(&p, &s, 6).unwrap();
        assert_eq!(a.rho0_best, b.rho0_best);
        assert_eq!(a.best_vars, b.best_vars);
    }

    #[test]
    fn bad_factorizations_are_rejected() {
        let p = desk(12);
        let s = Strategy::Random { samples: 1 };
        assert!(matches!(factorized_design(&p, 5, 2, &s, 0), Err(Error::InvalidInput(_))));
        assert!(compare_strategies(&p, &[(12, 1), (5, 2)], &[s], 0).is_err());
    }

    #[test]
    fn comparison_rows_and_ratios() {
        let p = desk(6);
        let s = Strategy::Random { samples: 30 };
        let t = compare_strategies(&p, &[(6, 1), (3, 2)], std::slice::from_ref(&s), 1).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].ratio_vs_direct, Some(1.0));
        assert!(t.rows[1].sqrt_k_residual < 1e-12);
        let single = compare_strategies(&p, &[(6, 1)], std::slice::from_ref(&s), 1).unwrap();
        let direct = factorized_design(&p, 6, 1, &s, derive_seed(derive_seed(1, 0), 0)).unwrap();
        assert_eq!(single.rows[0].rho0_min, direct.rho0_best);
        assert_eq!(t.to_csv().unwrap().lines().count(), 3);
        assert!(t.to_text().contains("3x2"));
    }
}
