//! Serial-manipulator geometry and joint elasticity.
//!
//! A [`RobotModel`] is a chain of revolute joints described by Denavit–Hartenberg
//! rows (standard or modified convention) followed by a fixed tool offset. Each
//! link carries one calibrated length (`a` or `d` of its row) and each joint one
//! calibrated angular offset, so the geometric parameter vector has `2n` entries
//! ordered `(Δl₁..Δlₙ, Δq₁..Δqₙ)`. Joint compliances `k₁..kₙ` follow, for a total
//! of `3n` parameters.
//!
//! Units are fixed throughout the crate: millimetres, radians, newtons and
//! newton-millimetres. Compliances are in rad/(N·mm).

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::regression::CalibrationMode;

/// Denavit–Hartenberg convention used to interpret [`LinkRow`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Convention {
    /// `Rz(θ) · Tz(d) · Tx(a) · Rx(α)` per row.
    Standard,
    /// `Rx(α) · Tx(a) · Rz(θ) · Tz(d)` per row (Khalil–Kleinfinger).
    #[default]
    Modified,
}

/// Which translation of a row is the calibrated link length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthAxis {
    A,
    D,
}

/// One Denavit–Hartenberg row. Lengths in mm, angles in rad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkRow {
    pub alpha: f64,
    pub a: f64,
    pub d: f64,
    /// Constant joint-angle offset added to the joint variable.
    pub theta: f64,
    pub length: LengthAxis,
}

impl LinkRow {
    pub fn nominal_length(&self) -> f64 {
        match self.length {
            LengthAxis::A => self.a,
            LengthAxis::D => self.d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

impl JointLimit {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.min, self.max)
    }
}

/// Nominal geometry, joint limits and payload limit of a serial manipulator.
///
/// Immutable once built; share it freely between threads.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    convention: Convention,
    links: Vec<LinkRow>,
    tool: Vector3<f64>,
    joint_limits: Vec<JointLimit>,
    payload_limit: f64,
}

impl RobotModel {
    pub fn new(
        convention: Convention,
        links: Vec<LinkRow>,
        tool: Vector3<f64>,
        joint_limits: Vec<JointLimit>,
        payload_limit: f64,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::invalid("robot model needs at least one link"));
        }
        if joint_limits.len() != links.len() {
            return Err(Error::invalid(format!(
                "{} joint limits given for {} links",
                joint_limits.len(),
                links.len()
            )));
        }
        for (i, link) in links.iter().enumerate() {
            let finite = [link.alpha, link.a, link.d, link.theta].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("link {} has a non-finite entry", i + 1)));
            }
            if link.nominal_length() < 0.0 {
                return Err(Error::invalid(format!(
                    "link {} has negative nominal length {}",
                    i + 1,
                    link.nominal_length()
                )));
            }
        }
        for (i, lim) in joint_limits.iter().enumerate() {
            if !(lim.min.is_finite() && lim.max.is_finite() && lim.min < lim.max) {
                return Err(Error::invalid(format!(
                    "joint {} limits [{}, {}] must satisfy min < max",
                    i + 1,
                    lim.min,
                    lim.max
                )));
            }
        }
        if !(payload_limit.is_finite() && payload_limit > 0.0) {
            return Err(Error::invalid(format!("payload limit {payload_limit} must be > 0")));
        }
        if !tool.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tool offset must be finite"));
        }
        Ok(Self { convention, links, tool, joint_limits, payload_limit })
    }

    pub fn n_joints(&self) -> usize {
        self.links.len()
    }

    /// Number of entries in the unmasked parameter vector (`3n`).
    pub fn n_params(&self) -> usize {
        3 * self.links.len()
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn links(&self) -> &[LinkRow] {
        &self.links
    }

    pub fn tool(&self) -> Vector3<f64> {
        self.tool
    }

    pub fn joint_limits(&self) -> &[JointLimit] {
        &self.joint_limits
    }

    pub fn payload_limit(&self) -> f64 {
        self.payload_limit
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.n_joints() {
            return Err(Error::invalid(format!(
                "joint vector has {} entries, model has {} joints",
                q.len(),
                self.n_joints()
            )));
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("joint vector contains a non-finite value"));
        }
        Ok(())
    }

    /// End-effector position for geometry `Π₀ + ΔΠ`, evaluated exactly.
    ///
    /// Only the geometric part of `delta` is used; compliances do not move the
    /// unloaded end-effector.
    pub fn forward_kinematics(&self, q: &[f64], delta: &ParamVector) -> Result<Vector3<f64>> {
        self.check_q(q)?;
        if delta.n_joints() != self.n_joints() {
            return Err(Error::invalid(format!(
                "parameter vector is sized for {} joints, model has {}",
                delta.n_joints(),
                self.n_joints()
            )));
        }
        Ok(self.chain(q, Some(delta)).position)
    }

    /// Identification Jacobian `∂p/∂ΔΠ` at nominal geometry (3 × 2n).
    pub fn param_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        Ok(self.chain(q, None).param_jacobian())
    }

    /// Kinematic Jacobian (6 × n): rows 0..3 map joint rates to the linear
    /// velocity of the tool point, rows 3..6 to the angular velocity.
    pub fn elasto_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        Ok(self.chain(q, None).elasto_jacobian())
    }

    /// Compliance regressor `A` (3 × n) with column `j = J_j,pos · (J_jᵀ w)`,
    /// so that `A·k` is the tool-point deflection under wrench `w`.
    pub fn build_a(&self, q: &[f64], wrench: &Wrench) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        Ok(self.chain(q, None).compliance_regressor(wrench))
    }

    /// Walks the chain once and records everything the Jacobians need.
    pub(crate) fn chain(&self, q: &[f64], delta: Option<&ParamVector>) -> Chain {
        let n = self.n_joints();
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        let mut chain = Chain {
            axes: Vec::with_capacity(n),
            pivots: Vec::with_capacity(n),
            length_dirs: Vec::with_capacity(n),
            skeleton: Vec::with_capacity(2 * n + 2),
            tool_axis: Vector3::z(),
            position: Vector3::zeros(),
        };
        chain.skeleton.push(pos);

        for (i, link) in self.links.iter().enumerate() {
            let (dl, dq) = match delta {
                Some(d) => (d.lengths()[i], d.offsets()[i]),
                None => (0.0, 0.0),
            };
            let (a, d) = match link.length {
                LengthAxis::A => (link.a + dl, link.d),
                LengthAxis::D => (link.a, link.d + dl),
            };
            let theta = link.theta + q[i] + dq;

            match self.convention {
                Convention::Standard => {
                    chain.axes.push(rot.column(2).into_owned());
                    chain.pivots.push(pos);
                    let z_prev = rot.column(2).into_owned();
                    rot *= rot_z(theta);
                    pos += z_prev * d;
                    push_if_moved(&mut chain.skeleton, pos);
                    let x_new = rot.column(0).into_owned();
                    pos += x_new * a;
                    push_if_moved(&mut chain.skeleton, pos);
                    chain.length_dirs.push(match link.length {
                        LengthAxis::A => x_new,
                        LengthAxis::D => z_prev,
                    });
                    rot *= rot_x(link.alpha);
                }
                Convention::Modified => {
                    let x_prev = rot.column(0).into_owned();
                    rot *= rot_x(link.alpha);
                    pos += x_prev * a;
                    push_if_moved(&mut chain.skeleton, pos);
                    let z_joint = rot.column(2).into_owned();
                    chain.axes.push(z_joint);
                    chain.pivots.push(pos);
                    rot *= rot_z(theta);
                    pos += z_joint * d;
                    push_if_moved(&mut chain.skeleton, pos);
                    chain.length_dirs.push(match link.length {
                        LengthAxis::A => x_prev,
                        LengthAxis::D => z_joint,
                    });
                }
            }
        }
        chain.tool_axis = rot.column(2).into_owned();
        chain.position = pos + rot * self.tool;
        chain.skeleton.push(chain.position);
        chain
    }
}

fn push_if_moved(points: &mut Vec<Vector3<f64>>, p: Vector3<f64>) {
    if points.last().is_none_or(|last| *last != p) {
        points.push(p);
    }
}

fn rot_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_x(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Per-configuration kinematic quantities, all expressed in the base frame.
#[derive(Clone, Debug)]
pub(crate) struct Chain {
    pub axes: Vec<Vector3<f64>>,
    pub pivots: Vec<Vector3<f64>>,
    pub length_dirs: Vec<Vector3<f64>>,
    /// Base, every distinct frame/offset point along the links, tool point last.
    pub skeleton: Vec<Vector3<f64>>,
    /// z-axis of the flange frame.
    pub tool_axis: Vector3<f64>,
    pub position: Vector3<f64>,
}

impl Chain {
    pub fn lever(&self, j: usize) -> Vector3<f64> {
        self.axes[j].cross(&(self.position - self.pivots[j]))
    }

    pub fn param_jacobian(&self) -> DMatrix<f64> {
        let n = self.axes.len();
        let mut jac = DMatrix::zeros(3, 2 * n);
        for j in 0..n {
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&self.length_dirs[j]);
            jac.fixed_view_mut::<3, 1>(0, n + j).copy_from(&self.lever(j));
        }
        jac
    }

    pub fn elasto_jacobian(&self) -> DMatrix<f64> {
        let n = self.axes.len();
        let mut jac = DMatrix::zeros(6, n);
        for j in 0..n {
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&self.lever(j));
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&self.axes[j]);
        }
        jac
    }

    pub fn compliance_regressor(&self, wrench: &Wrench) -> DMatrix<f64> {
        let n = self.axes.len();
        let mut a = DMatrix::zeros(3, n);
        for j in 0..n {
            let lever = self.lever(j);
            let generalized = lever.dot(&wrench.force) + self.axes[j].dot(&wrench.torque);
            a.fixed_view_mut::<3, 1>(0, j).copy_from(&(lever * generalized));
        }
        a
    }
}

/// External wrench applied at the tool point, in the base frame.
/// Force in N, torque in N·mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros() }
    }

    pub fn force(force: Vector3<f64>) -> Self {
        Self { force, torque: Vector3::zeros() }
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        if w.len() != 6 {
            return Err(Error::invalid(format!("wrench needs 6 entries, got {}", w.len())));
        }
        Ok(Self {
            force: Vector3::new(w[0], w[1], w[2]),
            torque: Vector3::new(w[3], w[4], w[5]),
        })
    }

    /// Pure force of the given magnitude along the unit vector with polar angle
    /// `polar` (from base z) and `azimuth`. The result never exceeds `magnitude`
    /// in norm, so a payload check at the same bound is never violated by rounding.
    pub fn from_direction(polar: f64, azimuth: f64, magnitude: f64) -> Self {
        let (sp, cp) = polar.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        let mut force = Vector3::new(sp * ca, sp * sa, cp) * magnitude;
        while force.norm() > magnitude {
            force *= 1.0 - f64::EPSILON;
        }
        Self::force(force)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }
}

/// One calibration experiment: joint vector and, for loaded experiments, the wrench.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementConfig {
    pub q: Vec<f64>,
    pub wrench: Option<Wrench>,
}

impl MeasurementConfig {
    pub fn new(q: Vec<f64>, wrench: Option<Wrench>) -> Self {
        Self { q, wrench }
    }

    pub fn unloaded(q: Vec<f64>) -> Self {
        Self { q, wrench: None }
    }

    pub fn wrench_or_zero(&self) -> Wrench {
        self.wrench.unwrap_or_else(Wrench::zero)
    }

    /// Total-order key over the bit patterns of `q` and `w`; used to sum
    /// per-configuration contributions in an order independent of plan order.
    pub(crate) fn sort_key(&self) -> Vec<u64> {
        let mut key: Vec<u64> = self.q.iter().map(|v| v.to_bits()).collect();
        match self.wrench {
            Some(w) => {
                key.push(1);
                key.extend(w.to_array().iter().map(|v| v.to_bits()));
            }
            None => key.push(0),
        }
        key
    }
}

/// Parameter deviations `ΔX = (Δl, Δq, k)`, 3n entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    n: usize,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self { n, values: vec![0.0; 3 * n] }
    }

    pub fn from_parts(lengths: &[f64], offsets: &[f64], compliances: &[f64]) -> Result<Self> {
        let n = lengths.len();
        if offsets.len() != n || compliances.len() != n {
            return Err(Error::invalid(format!(
                "parameter blocks have mismatched lengths {}/{}/{}",
                n,
                offsets.len(),
                compliances.len()
            )));
        }
        let values = lengths.iter().chain(offsets).chain(compliances).copied().collect();
        Ok(Self { n, values })
    }

    pub fn from_vec(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 3 * n {
            return Err(Error::invalid(format!(
                "parameter vector for {n} joints needs {} entries, got {}",
                3 * n,
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    /// Expands an estimate over the active columns of `mask` into a full vector.
    pub fn from_active(mask: &ParamMask, active: &[f64]) -> Result<Self> {
        let idx = mask.active_indices();
        if idx.len() != active.len() {
            return Err(Error::invalid(format!(
                "{} active values for a mask with {} active parameters",
                active.len(),
                idx.len()
            )));
        }
        let mut values = vec![0.0; mask.len()];
        for (&i, &v) in idx.iter().zip(active) {
            values[i] = v;
        }
        Ok(Self { n: mask.len() / 3, values })
    }

    pub fn n_joints(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn lengths(&self) -> &[f64] {
        &self.values[..self.n]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.values[self.n..2 * self.n]
    }

    pub fn geometric(&self) -> &[f64] {
        &self.values[..2 * self.n]
    }

    pub fn compliances(&self) -> &[f64] {
        &self.values[2 * self.n..]
    }

    /// Copy with every inactive entry set to exactly zero.
    pub fn masked(&self, mask: &ParamMask) -> Self {
        let values = self
            .values
            .iter()
            .zip(mask.flags())
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect();
        Self { n: self.n, values }
    }

    pub fn active_values(&self, mask: &ParamMask) -> Vec<f64> {
        mask.active_indices().iter().map(|&i| self.values[i]).collect()
    }
}

/// Name of parameter `idx` in a 3n layout: `dl3`, `dq1`, `k6`, ...
pub fn param_name(n: usize, idx: usize) -> String {
    match idx / n {
        0 => format!("dl{}", idx % n + 1),
        1 => format!("dq{}", idx % n + 1),
        _ => format!("k{}", idx % n + 1),
    }
}

/// Boolean selector of the parameters that are identified.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    active: Vec<bool>,
}

impl ParamMask {
    pub fn from_flags(active: Vec<bool>) -> Result<Self> {
        if active.is_empty() || !active.len().is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "mask length {} is not a positive multiple of 3",
                active.len()
            )));
        }
        if !active.iter().any(|&b| b) {
            return Err(Error::invalid("mask selects no parameters"));
        }
        Ok(Self { active })
    }

    /// Every parameter the mode can observe: geometric columns for
    /// `Geometric`, compliances for `Elastostatic`, all for `Combined`.
    pub fn for_mode(n: usize, mode: CalibrationMode) -> Self {
        let active = (0..3 * n)
            .map(|i| match mode {
                CalibrationMode::Geometric => i < 2 * n,
                CalibrationMode::Elastostatic => i >= 2 * n,
                CalibrationMode::Combined => true,
            })
            .collect();
        Self { active }
    }

    pub fn from_names<S: AsRef<str>>(n: usize, names: &[S]) -> Result<Self> {
        let mut active = vec![false; 3 * n];
        for name in names {
            let name = name.as_ref();
            let idx = (0..3 * n)
                .find(|&i| param_name(n, i) == name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter name `{name}`")))?;
            if active[idx] {
                return Err(Error::invalid(format!("parameter `{name}` listed twice")));
            }
            active[idx] = true;
        }
        Self::from_flags(active)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.active.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn active_names(&self) -> Vec<String> {
        let n = self.active.len() / 3;
        self.active_indices().into_iter().map(|i| param_name(n, i)).collect()
    }
}
