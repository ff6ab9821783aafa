//! Monte Carlo model of the whole calibration experiment: synthesize
//! measurements from a known deviation vector, identify, compensate, and
//! measure the error that remains at the test poses.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{Criterion, TestPoseSet};
use crate::error::{Error, Result};
use crate::model::{ParamMask, ParamVector, RobotModel};
use crate::regression::{build_b, build_b_full, covariance, identify, CalibrationMode, ExperimentPlan, MeasurementRecord};
use crate::seed::{derive_seed, rng_from_seed};

/// Measurement noise added to every observed displacement.
pub trait NoiseModel: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64>;
}

/// Independent zero-mean Gaussian noise with s.t.d. `sigma` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsotropicGaussian {
    pub sigma: f64,
}

impl NoiseModel for IsotropicGaussian {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        if self.sigma == 0.0 {
            return Vector3::zeros();
        }
        let normal = Normal::new(0.0, self.sigma).expect("finite sigma");
        Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    }
}

/// How observed displacements are generated from the true deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `Δp = B·ΔX + ε`, the model the identification assumes.
    #[default]
    Linear,
    /// Exact forward kinematics of the deviated geometry. Geometric mode only.
    Nonlinear,
}

/// True deviations: either fixed or drawn uniformly per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruth {
    /// Full 3n layout `(Δl, Δq, k)`.
    Fixed { values: Vec<f64> },
    /// Each entry uniform in `±half-width` of its group.
    Uniform { length: f64, offset: f64, compliance: f64 },
}

impl Default for GroundTruth {
    /// Illustrative magnitudes: ±2 mm, ±0.002 rad, ±1e-6 rad/(N·mm).
    fn default() -> Self {
        GroundTruth::Uniform { length: 2.0, offset: 0.002, compliance: 1e-6 }
    }
}

impl GroundTruth {
    /// One deviation vector, restricted to the active parameters of `mask`.
    pub fn draw(&self, n_joints: usize, mask: &ParamMask, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
        let full = match self {
            GroundTruth::Fixed { values } => ParamVector::from_vec(n_joints, values.clone())?,
            GroundTruth::Uniform { length, offset, compliance } => {
                let mut values = Vec::with_capacity(3 * n_joints);
                for half in [*length, *offset, *compliance] {
                    if !(half.is_finite() && half >= 0.0) {
                        return Err(Error::invalid(format!("ground-truth half-width {half} must be >= 0")));
                    }
                    for _ in 0..n_joints {
                        values.push(if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 });
                    }
                }
                ParamVector::from_vec(n_joints, values)?
            }
        };
        Ok(full.masked(mask))
    }
}

#[derive(Clone, Debug)]
pub struct SimulationSpec {
    pub model: RobotModel,
    pub mode: CalibrationMode,
    pub mask: ParamMask,
    pub truth: GroundTruth,
    pub plan: ExperimentPlan,
    pub test: TestPoseSet,
    pub sigma: f64,
    pub n_trials: usize,
    /// Trial `t` draws everything from `derive_seed(seed, t)`.
    pub seed: u64,
    pub generator: Generator,
}

/// Displacements `Δpᵢ` of every configuration in `plan` for the deviations
/// `true_dx`, with noise drawn from `rng` in plan order.
pub fn simulate_with_noise(
    model: &RobotModel,
    true_dx: &ParamVector,
    plan: &ExperimentPlan,
    generator: Generator,
    noise: &dyn NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MeasurementRecord>> {
    plan.validate(model)?;
    if true_dx.n_joints() != model.n_joints() {
        return Err(Error::invalid(format!(
            "deviation vector is sized for {} joints, model has {}",
            true_dx.n_joints(),
            model.n_joints()
        )));
    }
    if generator == Generator::Nonlinear && plan.mode != CalibrationMode::Geometric {
        return Err(Error::invalid("the nonlinear generator supports geometric calibration only"));
    }
    let zero = ParamVector::zeros(model.n_joints());
    let dx = DVector::from_column_slice(true_dx.as_slice());
    plan.configs
        .iter()
        .map(|config| {
            let clean = match generator {
                Generator::Linear => {
                    let b = build_b_full(model, config, plan.mode)?;
                    let v = b * &dx;
                    Vector3::new(v[0], v[1], v[2])
                }
                Generator::Nonlinear => {
                    model.forward_kinematics(&config.q, true_dx)? - model.forward_kinematics(&config.q, &zero)?
                }
            };
            Ok(MeasurementRecord { config: config.clone(), dp: clean + noise.sample(rng) })
        })
        .collect()
}

/// Gaussian measurements, deterministic in `seed`.
pub fn simulate_measurements(
    model: &RobotModel,
    true_dx: &ParamVector,
    plan: &ExperimentPlan,
    sigma: f64,
    seed: u64,
) -> Result<Vec<MeasurementRecord>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma {sigma} must be finite and >= 0")));
    }
    let mut rng = rng_from_seed(seed);
    simulate_with_noise(model, true_dx, plan, Generator::Linear, &IsotropicGaussian { sigma }, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationReport {
    pub n_trials: usize,
    pub seed: u64,
    pub sigma: f64,
    pub generator: Generator,
    /// Root mean square of `‖δp‖` over trials and test poses, mm.
    pub empirical_rho0: f64,
    pub predicted_rho0: f64,
    /// `empirical / predicted`; absent when the prediction is zero.
    pub ratio: Option<f64>,
    pub parameters: Vec<String>,
    /// Mean of `ΔX̂ − ΔX` over trials, active parameters only.
    pub error_mean: Vec<f64>,
    /// Sample covariance of `ΔX̂ − ΔX`.
    pub error_covariance: Vec<Vec<f64>>,
    /// `σ² (Σ BᵢᵀBᵢ)⁻¹`.
    pub predicted_covariance: Vec<Vec<f64>>,
    /// Per test pose: trial mean of `δp`.
    pub dp_mean: Vec<[f64; 3]>,
    /// Per test pose: standard error of that mean.
    pub dp_standard_error: Vec<[f64; 3]>,
}

struct Trial {
    error: DVector<f64>,
    dp: Vec<Vector3<f64>>,
}

const BATCH: usize = 512;

/// Runs `n_trials` simulate/identify/compensate cycles and compares the
/// realized test-pose error with the predicted `ρ₀`.
pub fn monte_carlo_validation(spec: &SimulationSpec) -> Result<SimulationReport> {
    if spec.n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    if !(spec.sigma.is_finite() && spec.sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma {} must be finite and >= 0", spec.sigma)));
    }
    if spec.plan.mode != spec.mode {
        return Err(Error::invalid("plan mode does not match the simulation mode"));
    }
    let model = &spec.model;
    let blocks = spec
        .plan
        .configs
        .iter()
        .map(|c| build_b(model, c, spec.mode, &spec.mask))
        .collect::<Result<Vec<_>>>()?;
    let criterion = Criterion::new(model, spec.mode, &spec.mask, &spec.test, spec.sigma)?;
    let predicted_rho0 = criterion.rho0(&spec.plan)?;
    let predicted_cov = covariance(&blocks, spec.sigma)?;
    let test_blocks = spec
        .test
        .poses()
        .iter()
        .map(|c| build_b(model, c, spec.mode, &spec.mask).map(|b| b.matrix))
        .collect::<Result<Vec<DMatrix<f64>>>>()?;
    let noise = IsotropicGaussian { sigma: spec.sigma };
    let n = model.n_joints();
    let d = spec.mask.count();

    let run = |t: usize| -> Result<Trial> {
        let mut rng = rng_from_seed(derive_seed(spec.seed, t as u64));
        let truth = spec.truth.draw(n, &spec.mask, &mut rng)?;
        let records = simulate_with_noise(model, &truth, &spec.plan, spec.generator, &noise, &mut rng)?;
        let estimate = identify(&blocks, &records)?.estimate;
        let error = DVector::from_vec(estimate.active_values(&spec.mask))
            - DVector::from_vec(truth.active_values(&spec.mask));
        let dp = match spec.generator {
            Generator::Linear => test_blocks
                .iter()
                .map(|b| {
                    let v = b * &error;
                    Vector3::new(v[0], v[1], v[2])
                })
                .collect(),
            Generator::Nonlinear => spec
                .test
                .poses()
                .iter()
                .map(|c| Ok(model.forward_kinematics(&c.q, &estimate)? - model.forward_kinematics(&c.q, &truth)?))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Trial { error, dp })
    };

    let n_test = test_blocks.len();
    let mut sum_sq = 0.0;
    let mut err_sum = DVector::zeros(d);
    let mut err_outer = DMatrix::zeros(d, d);
    let mut dp_sum = vec![Vector3::zeros(); n_test];
    let mut dp_sq = vec![Vector3::zeros(); n_test];
    for start in (0..spec.n_trials).step_by(BATCH) {
        let end = (start + BATCH).min(spec.n_trials);
        let trials = (start..end)
            .into_par_iter()
            .map(|t| run(t).map_err(|e| Error::Trial { trial: t, source: Box::new(e) }))
            .collect::<Result<Vec<_>>>()?;
        for trial in trials {
            err_sum += &trial.error;
            err_outer += &trial.error * trial.error.transpose();
            for (j, v) in trial.dp.iter().enumerate() {
                sum_sq += v.norm_squared();
                dp_sum[j] += v;
                dp_sq[j] += v.component_mul(v);
            }
        }
    }

    let t = spec.n_trials as f64;
    let empirical_rho0 = (sum_sq / (t * n_test as f64)).sqrt();
    let mean = &err_sum / t;
    let cov = if spec.n_trials > 1 {
        (err_outer - &mean * mean.transpose() * t) / (t - 1.0)
    } else {
        DMatrix::zeros(d, d)
    };
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let mut dp_mean = Vec::with_capacity(n_test);
    let mut dp_se = Vec::with_capacity(n_test);
    for j in 0..n_test {
        let mu = dp_sum[j] / t;
        let var = if spec.n_trials > 1 {
            (dp_sq[j] - mu.component_mul(&mu) * t) / (t - 1.0)
        } else {
            Vector3::zeros()
        };
        dp_mean.push([mu.x, mu.y, mu.z]);
        dp_se.push([0, 1, 2].map(|k| (var[k].max(0.0) / t).sqrt()));
    }
    Ok(SimulationReport {
        n_trials: spec.n_trials,
        seed: spec.seed,
        sigma: spec.sigma,
        generator: spec.generator,
        empirical_rho0,
        predicted_rho0,
        ratio: (predicted_rho0 > 0.0).then(|| empirical_rho0 / predicted_rho0),
        parameters: spec.mask.active_names(),
        error_mean: mean.iter().copied().collect(),
        error_covariance: rows(&cov),
        predicted_covariance: rows(&predicted_cov),
        dp_mean,
        dp_standard_error: dp_se,
    })
}

impl SimulationReport {
    /// Largest `|Ĉᵢⱼ − Cᵢⱼ| / √(CᵢᵢCⱼⱼ)` between the sample and predicted
    /// covariances.
    pub fn covariance_deviation(&self) -> f64 {
        let p = &self.predicted_covariance;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                let scale = (p[i][i] * p[j][j]).sqrt();
                if scale > 0.0 {
                    worst = worst.max((self.error_covariance[i][j] - p[i][j]).abs() / scale);
                }
            }
        }
        worst
    }

    /// Largest `|mean δp| / standard error` over test poses and axes.
    pub fn dp_mean_z_score(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, s) in self.dp_mean.iter().zip(&self.dp_standard_error) {
            for k in 0..3 {
                if s[k] > 0.0 {
                    worst = worst.max(m[k].abs() / s[k]);
                }
            }
        }
        worst
    }

    pub fn to_text(&self) -> String {
        let ratio = self.ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        let mut out = String::new();
        out.push_str("Monte Carlo validation\n");
        out.push_str(&format!("  trials            {}\n", self.n_trials));
        out.push_str(&format!("  seed              {}\n", self.seed));
        out.push_str(&format!("  sigma             {} mm\n", self.sigma));
        out.push_str(&format!("  generator         {:?}\n", self.generator));
        out.push_str(&format!("  predicted rho0    {:.6} mm\n", self.predicted_rho0));
        out.push_str(&format!("  empirical rho0    {:.6} mm\n", self.empirical_rho0));
        out.push_str(&format!("  ratio             {ratio}\n"));
        out.push_str(&format!("  covariance dev.   {:.4}\n", self.covariance_deviation()));
        out.push_str(&format!("  max |mean dp|/se  {:.3}\n", self.dp_mean_z_score()));
        out.push_str("  parameter   error mean     sample sd      predicted sd\n");
        for (i, name) in self.parameters.iter().enumerate() {
            out.push_str(&format!(
                "  {:<10} {:>13.4e} {:>13.4e} {:>13.4e}\n",
                name,
                self.error_mean[i],
                self.error_covariance[i][i].max(0.0).sqrt(),
                self.predicted_covariance[i][i].sqrt()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn desk_spec(sigma: f64, trials: usize) -> SimulationSpec {
        SimulationSpec {
            model: fixtures::desk_6r(),
            mode: CalibrationMode::Geometric,
            mask: fixtures::desk_mask(),
            truth: GroundTruth::default(),
            plan: ExperimentPlan::new(fixtures::desk_reference_plan(6), CalibrationMode::Geometric),
            test: fixtures::desk_test_poses(),
            sigma,
            n_trials: trials,
            seed: 21,
            generator: Generator::Linear,
        }
    }

    #[test]
    fn noise_free_records_are_exact() {
        let model = fixtures::desk_6r();
        let plan = ExperimentPlan::new(fixtures::desk_reference_plan(4), CalibrationMode::Geometric);
        let dx = ParamVector::from_vec(6, (0..18).map(|i| 0.01 * i as f64).collect()).unwrap();
        let recs = simulate_measurements(&model, &dx, &plan, 0.0, 3).unwrap();
        for r in &recs {
            let b = build_b_full(&model, &r.config, CalibrationMode::Geometric).unwrap();
            let v = b * DVector::from_column_slice(dx.as_slice());
            assert_eq!(r.dp, Vector3::new(v[0], v[1], v[2]));
        }
        assert_eq!(recs, simulate_measurements(&model, &dx, &plan, 0.0, 4).unwrap());
    }

    #[test]
    fn same_seed_same_noise() {
        let model = fixtures::desk_6r();
        let plan = ExperimentPlan::new(fixtures::desk_reference_plan(3), CalibrationMode::Geometric);
        let dx = ParamVector::zeros(6);
        let a = simulate_measurements(&model, &dx, &plan, 0.1, 9).unwrap();
        assert_eq!(a, simulate_measurements(&model, &dx, &plan, 0.1, 9).unwrap());
        assert_ne!(a, simulate_measurements(&model, &dx, &plan, 0.1, 10).unwrap());
    }

    #[test]
    fn zero_sigma_recovers_exactly() {
        let r = monte_carlo_validation(&desk_spec(0.0, 20)).unwrap();
        assert!(r.empirical_rho0 < 1e-10);
        assert_eq!(r.ratio, None);
    }

    #[test]
    fn nonlinear_generator_needs_geometric_mode() {
        let mut spec = desk_spec(0.03, 2);
        spec.mode = CalibrationMode::Combined;
        spec.generator = Generator::Nonlinear;
        assert!(monte_carlo_validation(&spec).is_err());
    }

    #[test]
    fn unidentifiable_trial_is_named() {
        let mut spec = desk_spec(0.03, 2);
        spec.plan = ExperimentPlan::new(fixtures::desk_reference_plan(1), CalibrationMode::Geometric).repeated(3);
        let err = monte_carlo_validation(&spec).unwrap_err();
        assert!(err.is_unidentifiable(), "{err}");
    }
}
