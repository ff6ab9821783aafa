//! Feasibility of measurement configurations and feasible sampling.
//!
//! Constraint values follow the `C(q, w) ≤ 0` convention, grouped as
//!
//! | group | entries |
//! |-------|---------|
//! | joint limits | `qᵢ − qᵢᵐᵃˣ` for all i, then `qᵢᵐⁱⁿ − qᵢ` for all i |
//! | payload | `‖F‖ − F_max` |
//! | loading | `p_zᵐⁱⁿ − p_z` (when a floor is set), `rᵐⁱⁿ − r` |
//! | workspace | `p − pᵐᵃˣ` (3), `pᵐⁱⁿ − p` (3) |
//! | tool axis | `cos φ − cos φᵐⁱⁿ` (when set) |
//!
//! In geometric mode nothing is applied to the tool, so the payload, loading
//! and tool-axis entries are reported as exactly zero.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Chain, MeasurementConfig, RobotModel, Wrench};
use crate::regression::CalibrationMode;
use crate::seed::rng_from_seed;

/// Consecutive rejections after which a sampler gives up.
pub const MAX_REJECTIONS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    /// Minimum tool-point height above the floor [mm].
    pub p_z_min: Option<f64>,
    /// Minimum clearance between the loading line and the robot body [mm].
    pub r_min: f64,
    /// Work-cell box [mm].
    pub p_min: Vector3<f64>,
    pub p_max: Vector3<f64>,
    /// Minimum angle between the flange z-axis and base z [rad].
    pub phi_min: Option<f64>,
}

impl ConstraintSet {
    pub fn new(
        p_z_min: Option<f64>,
        r_min: f64,
        p_min: Vector3<f64>,
        p_max: Vector3<f64>,
        phi_min: Option<f64>,
    ) -> Result<Self> {
        if !(0..3).all(|i| p_min[i].is_finite() && p_max[i].is_finite() && p_min[i] < p_max[i]) {
            return Err(Error::invalid("workspace box needs p_min < p_max component-wise"));
        }
        if !(r_min.is_finite() && r_min >= 0.0) {
            return Err(Error::invalid(format!("r_min {r_min} must be >= 0")));
        }
        if let Some(z) = p_z_min {
            if !(z.is_finite() && z >= p_min.z && z <= p_max.z) {
                return Err(Error::invalid(format!(
                    "p_z_min {z} must lie within the box z-range [{}, {}]",
                    p_min.z, p_max.z
                )));
            }
        }
        if let Some(phi) = phi_min {
            if !(phi.is_finite() && (0.0..=PI).contains(&phi)) {
                return Err(Error::invalid(format!("phi_min {phi} must lie in [0, pi]")));
            }
        }
        Ok(Self { p_z_min, r_min, p_min, p_max, phi_min })
    }

    /// A cube of half-width `half` around the base with no other restriction.
    pub fn open_box(half: f64) -> Self {
        Self {
            p_z_min: None,
            r_min: 0.0,
            p_min: Vector3::repeat(-half),
            p_max: Vector3::repeat(half),
            phi_min: None,
        }
    }

    /// Natural magnitude of each entry returned by [`evaluate`]: 1 for angles
    /// and cosines, the payload limit for the payload entry, the robot's reach
    /// for lengths.
    pub fn scales(&self, model: &RobotModel) -> Vec<f64> {
        let n = model.n_joints();
        let reach = model.links().iter().map(|l| l.a.abs() + l.d.abs()).sum::<f64>() + model.tool().norm();
        let reach = if reach > 0.0 { reach } else { 1.0 };
        let mut out = vec![1.0; 2 * n];
        out.push(model.payload_limit());
        if self.p_z_min.is_some() {
            out.push(reach);
        }
        out.extend([reach; 7]);
        if self.phi_min.is_some() {
            out.push(1.0);
        }
        out
    }

    /// Names of the entries returned by [`evaluate`], in order.
    pub fn labels(&self, n_joints: usize) -> Vec<String> {
        let mut out = Vec::new();
        out.extend((1..=n_joints).map(|i| format!("q{i}_max")));
        out.extend((1..=n_joints).map(|i| format!("q{i}_min")));
        out.push("payload".into());
        if self.p_z_min.is_some() {
            out.push("floor".into());
        }
        out.push("load_clearance".into());
        out.extend(["px_max", "py_max", "pz_max", "px_min", "py_min", "pz_min"].map(String::from));
        if self.phi_min.is_some() {
            out.push("tool_axis".into());
        }
        out
    }
}

/// All constraint values of one configuration; feasible iff every entry is `≤ 0`.
pub fn evaluate(
    model: &RobotModel,
    config: &MeasurementConfig,
    cs: &ConstraintSet,
    mode: CalibrationMode,
) -> Vec<f64> {
    let chain = model.chain(&config.q, None);
    evaluate_chain(model, &chain, config, cs, mode)
}

pub(crate) fn evaluate_chain(
    model: &RobotModel,
    chain: &Chain,
    config: &MeasurementConfig,
    cs: &ConstraintSet,
    mode: CalibrationMode,
) -> Vec<f64> {
    let limits = model.joint_limits();
    let mut out = Vec::with_capacity(2 * limits.len() + 12);
    out.extend(config.q.iter().zip(limits).map(|(q, l)| q - l.max));
    out.extend(config.q.iter().zip(limits).map(|(q, l)| l.min - q));

    let loaded = mode.needs_wrench();
    let p = chain.position;
    let force = config.wrench_or_zero().force;
    out.push(if loaded { force.norm() - model.payload_limit() } else { 0.0 });
    if let Some(z) = cs.p_z_min {
        out.push(if loaded { z - p.z } else { 0.0 });
    }
    out.push(if loaded { cs.r_min - load_clearance(chain, &force) } else { 0.0 });
    out.extend((0..3).map(|i| p[i] - cs.p_max[i]));
    out.extend((0..3).map(|i| cs.p_min[i] - p[i]));
    if let Some(phi) = cs.phi_min {
        out.push(if loaded { chain.tool_axis.z - phi.cos() } else { 0.0 });
    }
    out
}

pub fn max_violation(values: &[f64]) -> f64 {
    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_feasible(values: &[f64]) -> bool {
    values.iter().all(|&v| v <= 0.0)
}

/// Distance between the half-line `p + t·F/‖F‖, t ≥ 0` (the loading device)
/// and the robot skeleton, excluding the tool segment that ends at `p`.
/// A zero force degenerates to the point `p`.
pub(crate) fn load_clearance(chain: &Chain, force: &Vector3<f64>) -> f64 {
    let pts = &chain.skeleton;
    if pts.len() < 3 {
        return f64::MAX;
    }
    let origin = chain.position;
    let norm = force.norm();
    let dir = if norm > 0.0 { Some(force / norm) } else { None };
    pts[..pts.len() - 1]
        .windows(2)
        .map(|seg| match dir {
            Some(u) => ray_segment_distance(&origin, &u, &seg[0], &seg[1]),
            None => point_segment_distance(&origin, &seg[0], &seg[1]),
        })
        .fold(f64::MAX, f64::min)
}

fn point_segment_distance(x: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((x - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * s - x).norm()
}

fn point_ray_distance(x: &Vector3<f64>, o: &Vector3<f64>, u: &Vector3<f64>) -> f64 {
    let t = (x - o).dot(u).max(0.0);
    (o + u * t - x).norm()
}

/// The squared distance is a convex quadratic in (t, s) over `t ≥ 0, s ∈ [0, 1]`,
/// so its minimum is either the unconstrained stationary point or lies on one
/// of the three boundary pieces.
fn ray_segment_distance(o: &Vector3<f64>, u: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let mut best = point_segment_distance(o, a, b)
        .min(point_ray_distance(a, o, u))
        .min(point_ray_distance(b, o, u));
    let v = b - a;
    let w = o - a;
    let vv = v.norm_squared();
    let uv = u.dot(&v);
    let denom = vv - uv * uv; // |u| = 1
    if vv > 0.0 && denom > 1e-12 * vv {
        let uw = u.dot(&w);
        let vw = v.dot(&w);
        let t = (uv * vw - vv * uw) / denom;
        let s = (vw - uv * uw) / denom;
        if t >= 0.0 && (0.0..=1.0).contains(&s) {
            best = best.min((o + u * t - (a + v * s)).norm());
        }
    }
    best
}

/// Decision variables of one pose: joint values, then (polar, azimuth) of the
/// applied force direction for loaded modes. The force magnitude is fixed at
/// the payload limit and no torque is applied.
#[derive(Clone, Debug)]
pub struct PoseEncoding {
    n_joints: usize,
    loaded: bool,
    f_max: f64,
    bounds: Vec<(f64, f64)>,
}

impl PoseEncoding {
    pub fn new(model: &RobotModel, mode: CalibrationMode) -> Self {
        let loaded = mode.needs_wrench();
        let mut bounds: Vec<(f64, f64)> = model.joint_limits().iter().map(|l| (l.min, l.max)).collect();
        if loaded {
            bounds.push((0.0, PI));
            bounds.push((-PI, PI));
        }
        Self { n_joints: model.n_joints(), loaded, f_max: model.payload_limit(), bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn decode(&self, vars: &[f64]) -> MeasurementConfig {
        debug_assert_eq!(vars.len(), self.dim());
        let q = vars[..self.n_joints].to_vec();
        let wrench = self
            .loaded
            .then(|| Wrench::from_direction(vars[self.n_joints], vars[self.n_joints + 1], self.f_max));
        MeasurementConfig::new(q, wrench)
    }

    /// Inverse of [`decode`](Self::decode) for configurations whose wrench is a
    /// pure force; the magnitude is not encoded.
    pub fn encode(&self, config: &MeasurementConfig) -> Vec<f64> {
        let mut vars = config.q.clone();
        if self.loaded {
            let f = config.wrench_or_zero().force;
            let norm = f.norm();
            let polar = if norm > 0.0 { (f.z / norm).clamp(-1.0, 1.0).acos() } else { 0.0 };
            vars.push(polar);
            vars.push(f.y.atan2(f.x));
        }
        vars
    }

    /// Nearest value of an evenly spaced `levels`-point lattice over the bounds of variable `i`.
    pub fn snap(&self, i: usize, value: f64, levels: usize) -> f64 {
        let (lo, hi) = self.bounds[i];
        if levels < 2 {
            return 0.5 * (lo + hi);
        }
        let step = (hi - lo) / (levels - 1) as f64;
        let k = ((value - lo) / step).round().clamp(0.0, (levels - 1) as f64);
        lattice_value(lo, hi, k as usize, levels)
    }
}

fn lattice_value(lo: f64, hi: f64, k: usize, levels: usize) -> f64 {
    if k + 1 == levels {
        hi
    } else {
        lo + (hi - lo) * k as f64 / (levels - 1) as f64
    }
}

/// Rejection sampler of feasible poses, uniform in joint space and (for
/// loaded modes) uniform over force directions on the sphere. With a lattice,
/// every variable is drawn uniformly from its evenly spaced levels instead.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    model: &'a RobotModel,
    cs: &'a ConstraintSet,
    mode: CalibrationMode,
    encoding: PoseEncoding,
    lattice: Option<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a RobotModel, cs: &'a ConstraintSet, mode: CalibrationMode) -> Self {
        Self { model, cs, mode, encoding: PoseEncoding::new(model, mode), lattice: None }
    }

    pub fn with_lattice(mut self, levels: Option<usize>) -> Self {
        self.lattice = levels;
        self
    }

    pub fn encoding(&self) -> &PoseEncoding {
        &self.encoding
    }

    fn propose(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let bounds = self.encoding.bounds();
        match self.lattice {
            Some(levels) => bounds
                .iter()
                .map(|&(lo, hi)| lattice_value(lo, hi, rng.random_range(0..levels), levels))
                .collect(),
            None => {
                let n = self.encoding.n_joints();
                let mut vars: Vec<f64> = bounds[..n].iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
                if self.encoding.is_loaded() {
                    let cos_polar: f64 = rng.random_range(-1.0..=1.0);
                    vars.push(cos_polar.acos());
                    vars.push(rng.random_range(-PI..PI));
                }
                vars
            }
        }
    }

    /// Draws decision variables of one feasible pose.
    pub fn draw_vars(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        for _ in 0..MAX_REJECTIONS {
            let vars = self.propose(rng);
            let config = self.encoding.decode(&vars);
            if is_feasible(&evaluate(self.model, &config, self.cs, self.mode)) {
                return Ok(vars);
            }
        }
        Err(Error::Infeasible { rejections: MAX_REJECTIONS })
    }

    /// Fraction of `proposals` raw proposals that are feasible.
    pub fn acceptance_rate(&self, proposals: usize, rng: &mut ChaCha8Rng) -> f64 {
        let accepted = (0..proposals)
            .filter(|_| {
                let config = self.encoding.decode(&self.propose(rng));
                is_feasible(&evaluate(self.model, &config, self.cs, self.mode))
            })
            .count();
        accepted as f64 / proposals.max(1) as f64
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<MeasurementConfig> {
        Ok(self.encoding.decode(&self.draw_vars(rng)?))
    }

    /// Draws a fresh force direction for an otherwise fixed pose, keeping the
    /// joint values. Returns `false` after `tries` infeasible attempts.
    pub fn redraw_direction(&self, vars: &mut [f64], rng: &mut ChaCha8Rng, tries: usize) -> bool {
        if !self.encoding.is_loaded() {
            return false;
        }
        let n = self.encoding.n_joints();
        for _ in 0..tries {
            let fresh = self.propose(rng);
            vars[n] = fresh[n];
            vars[n + 1] = fresh[n + 1];
            if is_feasible(&evaluate(self.model, &self.encoding.decode(vars), self.cs, self.mode)) {
                return true;
            }
        }
        false
    }
}

/// One feasible configuration, deterministic in `seed`.
pub fn sample_feasible(
    model: &RobotModel,
    cs: &ConstraintSet,
    mode: CalibrationMode,
    seed: u64,
) -> Result<MeasurementConfig> {
    let mut rng = rng_from_seed(seed);
    Sampler::new(model, cs, mode).draw(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;

    #[test]
    fn ray_segment_cases() {
        let o = Vector3::new(0.0, 0.0, 0.0);
        let x = Vector3::x();
        // segment crossing the ray at distance 2 above it
        let d = ray_segment_distance(&o, &x, &Vector3::new(5.0, -1.0, 2.0), &Vector3::new(5.0, 1.0, 2.0));
        assert_relative_eq!(d, 2.0, epsilon = 1e-12);
        // segment behind the ray origin: distance to the origin
        let d = ray_segment_distance(&o, &x, &Vector3::new(-3.0, -1.0, 0.0), &Vector3::new(-3.0, 1.0, 0.0));
        assert_relative_eq!(d, 3.0, epsilon = 1e-12);
        // parallel segment
        let d = ray_segment_distance(&o, &x, &Vector3::new(1.0, 4.0, 0.0), &Vector3::new(3.0, 4.0, 0.0));
        assert_relative_eq!(d, 4.0, epsilon = 1e-12);
        // degenerate segment
        let p = Vector3::new(2.0, 0.0, 1.5);
        assert_relative_eq!(ray_segment_distance(&o, &x, &p, &p), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn geometric_mode_ignores_wrench() {
        let model = fixtures::desk_6r();
        let cs = fixtures::desk_constraints();
        let q = vec![0.3, -0.6, 0.5, 0.2, 0.7, -0.1];
        let a = evaluate(&model, &MeasurementConfig::unloaded(q.clone()), &cs, CalibrationMode::Geometric);
        let w = Wrench::from_slice(&[1e5, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = evaluate(&model, &MeasurementConfig::new(q, Some(w)), &cs, CalibrationMode::Geometric);
        assert_eq!(a, b);
        assert_eq!(a.len(), cs.labels(6).len());
        assert_eq!(cs.scales(&model).len(), a.len());
    }

    #[test]
    fn invalid_sets_are_rejected() {
        let lo = Vector3::repeat(-1.0);
        let hi = Vector3::repeat(1.0);
        assert!(ConstraintSet::new(None, 0.0, hi, lo, None).is_err());
        assert!(ConstraintSet::new(None, -1.0, lo, hi, None).is_err());
        assert!(ConstraintSet::new(Some(2.0), 0.0, lo, hi, None).is_err());
        assert!(ConstraintSet::new(Some(0.0), 0.0, lo, hi, Some(0.5)).is_ok());
    }

    #[test]
    fn sampler_is_deterministic_and_feasible() {
        let model = fixtures::desk_6r();
        let cs = fixtures::desk_constraints();
        for mode in [CalibrationMode::Geometric, CalibrationMode::Combined] {
            let a = sample_feasible(&model, &cs, mode, 11).unwrap();
            let b = sample_feasible(&model, &cs, mode, 11).unwrap();
            assert_eq!(a, b);
            assert!(is_feasible(&evaluate(&model, &a, &cs, mode)));
            if mode.needs_wrench() {
                assert_relative_eq!(a.wrench.unwrap().force.norm(), model.payload_limit(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn desk_acceptance_rate_is_pinned() {
        let model = fixtures::desk_6r();
        let cs = fixtures::desk_constraints();
        for (mode, pinned) in [(CalibrationMode::Geometric, 0.342), (CalibrationMode::Combined, 0.292)] {
            let rate = Sampler::new(&model, &cs, mode).acceptance_rate(20_000, &mut rng_from_seed(4));
            assert!((rate / pinned - 1.0).abs() < 0.2, "{mode:?}: {rate}");
        }
    }

    #[test]
    fn empty_region_is_reported() {
        let model = fixtures::planar_2r(1000.0, 1000.0);
        // box far away from the reachable disc
        let cs = ConstraintSet::new(
            None,
            0.0,
            Vector3::new(5000.0, 5000.0, -1.0),
            Vector3::new(6000.0, 6000.0, 1.0),
            None,
        )
        .unwrap();
        let err = sample_feasible(&model, &cs, CalibrationMode::Geometric, 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible { rejections: MAX_REJECTIONS }));
    }

    #[test]
    fn encoding_round_trip_and_snapping() {
        let model = fixtures::planar_2r(1000.0, 1000.0);
        let enc = PoseEncoding::new(&model, CalibrationMode::Elastostatic);
        assert_eq!(enc.dim(), 4);
        let vars = vec![0.3, 1.2, 1.0, -2.0];
        let back = enc.encode(&enc.decode(&vars));
        for (a, b) in vars.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(enc.snap(2, 1.5, 5), PI / 2.0);
        assert_eq!(enc.snap(3, 3.0, 5), PI);
        assert_eq!(enc.snap(3, -10.0, 5), -PI);
    }
}
