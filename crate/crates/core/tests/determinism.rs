use nalgebra::Vector3;
use posecal::criterion::TestPoseSet;
use posecal::fixtures::{self, toy};
use posecal::model::{MeasurementConfig, ParamMask, Wrench};
use posecal::optimize::{compare_strategies, run_strategy, DesignProblem, DesignReport, GeneticOptions, Strategy};
use posecal::regression::CalibrationMode;
use posecal::simulate::{monte_carlo_validation, GroundTruth, SimulationSpec};

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn strategies() -> Vec<Strategy> {
    let ga = GeneticOptions { pop_size: 12, generations: 4, ..Default::default() };
    vec![
        Strategy::Random { samples: 300 },
        Strategy::MultiStart { starts: 3, gradient: Default::default() },
        Strategy::Genetic { ga: ga.clone(), repeats: 2 },
        Strategy::Hybrid { ga, gradient: Default::default(), repeats: 2 },
    ]
}

fn combined_desk(m: usize) -> DesignProblem {
    let mut names = fixtures::desk_mask().active_names();
    names.extend((1..=5).map(|j| format!("k{j}")));
    DesignProblem::new(
        fixtures::desk_6r(),
        CalibrationMode::Combined,
        ParamMask::from_names(6, &names).unwrap(),
        TestPoseSet::single(MeasurementConfig::new(
            fixtures::desk_test_pose().q,
            Some(Wrench::force(Vector3::new(0.0, 0.0, -1000.0))),
        )),
        0.03,
        fixtures::desk_constraints(),
        m,
    )
    .unwrap()
}

fn toy_problem() -> DesignProblem {
    DesignProblem::new(toy::model(), toy::MODE, toy::mask(), toy::test_poses(), 0.03, toy::constraints(), toy::M)
        .unwrap()
        .with_lattice(Some(toy::LEVELS))
        .unwrap()
}

fn assert_same(a: &DesignReport, b: &DesignReport) {
    assert_eq!(a.best_vars, b.best_vars, "{}", a.strategy.name());
    assert_eq!(a.best_plan, b.best_plan);
    assert_eq!(a.rho0_best.to_bits(), b.rho0_best.to_bits());
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.population, b.population);
    assert_eq!(a.evaluations, b.evaluations);
    let curve = |r: &DesignReport| r.trace.iter().map(|p| (p.evaluations, p.best_rho0.to_bits())).collect::<Vec<_>>();
    assert_eq!(curve(a), curve(b));
}

#[test]
fn strategies_ignore_the_thread_count() {
    for problem in [combined_desk(6), toy_problem()] {
        for strategy in strategies() {
            let one = pool(1, || run_strategy(&problem, &strategy, 99).unwrap());
            let three = pool(3, || run_strategy(&problem, &strategy, 99).unwrap());
            assert_same(&one, &three);
        }
    }
}

#[test]
fn comparison_table_ignores_the_thread_count() {
    let problem = combined_desk(10);
    let strategies = &strategies()[..2];
    let facts = [(10, 1), (5, 2)];
    let one = pool(1, || compare_strategies(&problem, &facts, strategies, 5).unwrap());
    let three = pool(3, || compare_strategies(&problem, &facts, strategies, 5).unwrap());
    let timeless = |csv: String| {
        csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(timeless(one.to_csv().unwrap()), timeless(three.to_csv().unwrap()));
}

#[test]
fn monte_carlo_ignores_the_thread_count() {
    let problem = combined_desk(6);
    let plan = run_strategy(&problem, &Strategy::Random { samples: 50 }, 3).unwrap().best_plan;
    let spec = SimulationSpec {
        model: problem.model.clone(),
        mode: problem.mode,
        mask: problem.mask.clone(),
        truth: GroundTruth::default(),
        plan,
        test: problem.test.clone(),
        sigma: 0.03,
        n_trials: 1500,
        seed: 11,
        generator: Default::default(),
    };
    let one = pool(1, || monte_carlo_validation(&spec).unwrap());
    let three = pool(3, || monte_carlo_validation(&spec).unwrap());
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&three).unwrap());
}
