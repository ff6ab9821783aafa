//! Reference robots and problems shared by examples, tests and the CLI.
//!
//! The desk 6R is a generic industrial-style arm with roughly 2.7 m reach.
//! Its numbers are illustrative, not those of any particular product.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;

use crate::constraints::{ConstraintSet, Sampler};
use crate::criterion::TestPoseSet;
use crate::model::{Convention, JointLimit, LengthAxis, LinkRow, MeasurementConfig, ParamMask, RobotModel, Wrench};
use crate::regression::CalibrationMode;
use crate::seed::{derive_seed, rng_from_seed};

fn deg(v: f64) -> f64 {
    v.to_radians()
}

fn row(alpha_deg: f64, a: f64, d: f64, length: LengthAxis) -> LinkRow {
    LinkRow { alpha: deg(alpha_deg), a, d, theta: 0.0, length }
}

/// Six-axis arm in modified DH, 240 mm tool along the flange z-axis.
pub fn desk_6r() -> RobotModel {
    let links = vec![
        row(0.0, 0.0, 675.0, LengthAxis::D),
        row(-90.0, 350.0, 0.0, LengthAxis::A),
        row(0.0, 1150.0, 0.0, LengthAxis::A),
        row(-90.0, 41.0, 1000.0, LengthAxis::D),
        row(90.0, 0.0, 0.0, LengthAxis::D),
        row(-90.0, 0.0, 0.0, LengthAxis::D),
    ];
    let limits = [185.0, 140.0, 155.0, 350.0, 122.0, 350.0]
        .iter()
        .map(|&l| JointLimit::new(-deg(l), deg(l)))
        .collect();
    RobotModel::new(Convention::Modified, links, Vector3::new(0.0, 0.0, 240.0), limits, 2000.0)
        .expect("desk model is valid")
}

/// Work cell of the desk arm: the tool must stay between 1 m and 3.5 m above
/// the base and within 3.2 m laterally, with 150 mm clearance for the loading
/// device. The working pose of [`desk_test_pose`] lies below this region.
pub fn desk_constraints() -> ConstraintSet {
    ConstraintSet::new(
        Some(1000.0),
        150.0,
        Vector3::new(-3200.0, -3200.0, 1000.0),
        Vector3::new(3200.0, 3200.0, 3500.0),
        None,
    )
    .expect("desk constraints are valid")
}

/// A reach-forward working pose.
pub fn desk_test_pose() -> MeasurementConfig {
    MeasurementConfig::unloaded(vec![deg(20.0), deg(-30.0), deg(40.0), deg(30.0), deg(45.0), deg(15.0)])
}

pub fn desk_test_poses() -> TestPoseSet {
    TestPoseSet::single(desk_test_pose())
}

/// The nine geometric parameters with the largest effect at the test pose,
/// ranking columns of the identification Jacobian scaled by typical
/// deviations of 2 mm and 2 mrad.
pub fn desk_mask() -> ParamMask {
    ParamMask::from_names(6, &["dl1", "dl2", "dl3", "dl4", "dl5", "dl6", "dq1", "dq2", "dq3"])
        .expect("desk mask names are valid")
}

/// `m` feasible geometric-mode poses drawn from a fixed seed.
pub fn desk_reference_plan(m: usize) -> Vec<MeasurementConfig> {
    let model = desk_6r();
    let cs = desk_constraints();
    let sampler = Sampler::new(&model, &cs, CalibrationMode::Geometric);
    (0..m)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(0xDE5C, i as u64));
            sampler.draw(&mut rng).expect("desk cell is feasible")
        })
        .collect()
}

/// Planar two-link arm in standard DH, lengths along `a`, no tool offset.
/// Joint 1 spans `[-π, π]`, joint 2 `[0, π]`; payload 100 N.
pub fn planar_2r(l1: f64, l2: f64) -> RobotModel {
    let links = vec![row(0.0, l1, 0.0, LengthAxis::A), row(0.0, l2, 0.0, LengthAxis::A)];
    let limits = vec![JointLimit::new(-PI, PI), JointLimit::new(0.0, PI)];
    RobotModel::new(Convention::Standard, links, Vector3::zeros(), limits, 100.0).expect("planar model is valid")
}

/// Small elastostatic design problem with a known grid optimum.
///
/// Two compliances of the 1 m + 1 m planar arm are identified from `m = 2`
/// loaded poses; every decision variable takes 5 evenly spaced levels.
pub mod toy {
    use super::*;

    pub const M: usize = 2;
    pub const LEVELS: usize = 5;
    pub const MODE: CalibrationMode = CalibrationMode::Elastostatic;

    pub fn model() -> RobotModel {
        planar_2r(1000.0, 1000.0)
    }

    pub fn mask() -> ParamMask {
        ParamMask::from_names(2, &["k1", "k2"]).expect("valid names")
    }

    /// Elbow at a right angle, pushed with the full payload along +y.
    pub fn test_poses() -> TestPoseSet {
        TestPoseSet::single(MeasurementConfig::new(
            vec![0.0, FRAC_PI_2],
            Some(Wrench::force(Vector3::new(0.0, 100.0, 0.0))),
        ))
    }

    pub fn constraints() -> ConstraintSet {
        ConstraintSet::open_box(5000.0)
    }
}
