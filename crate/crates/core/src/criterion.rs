//! Test-pose accuracy criterion.
//!
//! For a plan with information matrix `M = Σ BᵢᵀBᵢ` and test poses with
//! observation blocks `B₀,t`, the expected position error after compensation is
//!
//! ```text
//! ρ₀² = σ² · mean_t trace(B₀,t M⁻¹ B₀,tᵀ)
//! ```
//!
//! i.e. a trace of the identification covariance weighted by the test poses.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{param_name, MeasurementConfig, ParamMask, RobotModel};
use crate::regression::{check_config, fill_block, sum_sorted, CalibrationMode, ExperimentPlan};

/// Default measurement noise s.t.d. in mm.
pub const DEFAULT_SIGMA: f64 = 0.03;

/// Configurations (and loadings) at which accuracy matters. Aggregated as the
/// arithmetic mean of `ρ₀²` over the set.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPoseSet {
    poses: Vec<MeasurementConfig>,
}

impl TestPoseSet {
    pub fn new(poses: Vec<MeasurementConfig>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("test pose set is empty"));
        }
        Ok(Self { poses })
    }

    pub fn single(pose: MeasurementConfig) -> Self {
        Self { poses: vec![pose] }
    }

    pub fn poses(&self) -> &[MeasurementConfig] {
        &self.poses
    }
}

/// `M = Σ BᵢᵀBᵢ` for a plan, with the measurement count.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    pub m: usize,
}

/// Evaluates information matrices and `ρ₀` for one model, mode and mask.
///
/// Test-pose blocks are built once; the optimizers keep one of these per
/// problem and feed it cached per-configuration Gram matrices.
#[derive(Clone, Debug)]
pub struct Criterion<'a> {
    model: &'a RobotModel,
    mode: CalibrationMode,
    columns: Vec<usize>,
    test_blocks: Vec<DMatrix<f64>>,
    sigma: f64,
}

impl<'a> Criterion<'a> {
    pub fn new(
        model: &'a RobotModel,
        mode: CalibrationMode,
        mask: &ParamMask,
        test: &TestPoseSet,
        sigma: f64,
    ) -> Result<Self> {
        if mask.len() != model.n_params() {
            return Err(Error::invalid(format!(
                "mask has {} entries, model needs {}",
                mask.len(),
                model.n_params()
            )));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma {sigma} must be finite and >= 0")));
        }
        let columns = mask.active_indices();
        let mut test_blocks = Vec::with_capacity(test.poses().len());
        for (i, pose) in test.poses().iter().enumerate() {
            check_config(model, pose, mode)
                .map_err(|e| Error::invalid(format!("test pose {}: {e}", i + 1)))?;
            test_blocks.push(Self::block(model, mode, &columns, pose));
        }
        Ok(Self { model, mode, columns, test_blocks, sigma })
    }

    fn block(model: &RobotModel, mode: CalibrationMode, columns: &[usize], c: &MeasurementConfig) -> DMatrix<f64> {
        let chain = model.chain(&c.q, None);
        let mut b = DMatrix::zeros(3, columns.len());
        fill_block(&chain, &c.wrench_or_zero(), mode, columns, model.n_joints(), &mut b);
        b
    }

    pub fn model(&self) -> &RobotModel {
        self.model
    }

    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// `BᵀB` of one configuration over the active columns. The configuration
    /// must already be dimensionally valid.
    pub fn gram(&self, config: &MeasurementConfig) -> DMatrix<f64> {
        let b = Self::block(self.model, self.mode, &self.columns, config);
        b.tr_mul(&b)
    }

    pub fn factor(&self, m: &DMatrix<f64>) -> Result<SpdFactor> {
        let n = self.model.n_joints();
        SpdFactor::new(m, |i| param_name(n, self.columns[i]))
    }

    /// `ρ₀` from an already factored information matrix.
    pub fn rho0_factored(&self, factor: &SpdFactor) -> f64 {
        let mean = self.test_blocks.iter().map(|b| factor.weighted_trace(b)).sum::<f64>()
            / self.test_blocks.len() as f64;
        self.sigma * mean.sqrt()
    }

    /// `ρ₀` from keyed per-configuration Gram matrices.
    pub fn rho0_from_grams(&self, grams: Vec<(&[u64], &DMatrix<f64>)>) -> Result<f64> {
        let m = sum_sorted(grams, self.dim());
        let factor = self.factor(&m)?;
        Ok(self.rho0_factored(&factor))
    }

    pub fn info(&self, plan: &ExperimentPlan) -> Result<InfoMatrix> {
        if plan.mode != self.mode {
            return Err(Error::invalid(format!(
                "plan mode {} does not match criterion mode {}",
                plan.mode.as_str(),
                self.mode.as_str()
            )));
        }
        plan.validate(self.model)?;
        let keys: Vec<Vec<u64>> = plan.configs.iter().map(|c| c.sort_key()).collect();
        let grams: Vec<DMatrix<f64>> = plan.configs.iter().map(|c| self.gram(c)).collect();
        let terms = keys.iter().map(|k| k.as_slice()).zip(grams.iter()).collect();
        Ok(InfoMatrix { matrix: sum_sorted(terms, self.dim()), m: plan.len() })
    }

    pub fn rho0(&self, plan: &ExperimentPlan) -> Result<f64> {
        let info = self.info(plan)?;
        let factor = self.factor(&info.matrix)?;
        Ok(self.rho0_factored(&factor))
    }
}

/// Information matrix of `plan` over the active parameters of `mask`.
pub fn info_matrix(model: &RobotModel, plan: &ExperimentPlan, mask: &ParamMask) -> Result<InfoMatrix> {
    let placeholder = TestPoseSet::single(MeasurementConfig::new(
        vec![0.0; model.n_joints()],
        plan.mode.needs_wrench().then(crate::model::Wrench::zero),
    ));
    Criterion::new(model, plan.mode, mask, &placeholder, DEFAULT_SIGMA)?.info(plan)
}

/// Expected post-compensation position error at the test poses, in mm.
pub fn rho0(
    model: &RobotModel,
    plan: &ExperimentPlan,
    test: &TestPoseSet,
    sigma: f64,
    mask: &ParamMask,
) -> Result<f64> {
    Criterion::new(model, plan.mode, mask, test, sigma)?.rho0(plan)
}

/// Accuracy of a plan repeated `k` times: `ρ₀ / √k`.
pub fn rho0_factorized(rho0_base: f64, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("repetition count must be >= 1"));
    }
    if !(rho0_base.is_finite() && rho0_base > 0.0) {
        return Err(Error::invalid(format!("base accuracy {rho0_base} must be > 0")));
    }
    Ok(rho0_base / (k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;

    #[test]
    fn factorized_values() {
        assert_eq!(rho0_factorized(0.0637, 1).unwrap(), 0.0637);
        assert_relative_eq!(rho0_factorized(0.0637, 4).unwrap(), 0.03185, epsilon = 1e-15);
        // reported 3×4 entry, rounded to four decimals
        assert_eq!((rho0_factorized(0.0637, 4).unwrap() * 1e4).round() / 1e4, 0.0319);
        assert!(rho0_factorized(0.0637, 0).is_err());
        assert!(rho0_factorized(0.0, 2).is_err());
    }

    #[test]
    fn empty_test_set_is_rejected() {
        assert!(TestPoseSet::new(vec![]).is_err());
    }

    #[test]
    fn duplicated_plan_halves_rho0() {
        let model = fixtures::desk_6r();
        let mask = fixtures::desk_mask();
        let test = fixtures::desk_test_poses();
        let plan = ExperimentPlan::new(fixtures::desk_reference_plan(4), CalibrationMode::Geometric);
        let base = rho0(&model, &plan, &test, DEFAULT_SIGMA, &mask).unwrap();
        let four = rho0(&model, &plan.repeated(4), &test, DEFAULT_SIGMA, &mask).unwrap();
        assert_relative_eq!(four, base / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn empty_plan_is_invalid() {
        let model = fixtures::desk_6r();
        let plan = ExperimentPlan::new(vec![], CalibrationMode::Geometric);
        assert!(matches!(
            info_matrix(&model, &plan, &fixtures::desk_mask()),
            Err(Error::InvalidInput(_))
        ));
    }
}
