//! JSON run configuration and plan files. Angles are in degrees on disk and
//! in radians everywhere else.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::criterion::TestPoseSet;
use crate::error::{Error, Result};
use crate::model::{Convention, JointLimit, LengthAxis, LinkRow, MeasurementConfig, ParamMask, RobotModel, Wrench};
use crate::optimize::{DesignProblem, Strategy};
use crate::regression::{CalibrationMode, ExperimentPlan};
use crate::simulate::{Generator, GroundTruth};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub robot: RobotSection,
    pub constraints: ConstraintSection,
    pub mode: ModeName,
    /// Active parameter names; every parameter of the mode when absent.
    #[serde(default)]
    pub mask: Option<Vec<String>>,
    pub test_poses: Vec<PoseEntry>,
    pub sigma: f64,
    #[serde(default)]
    pub optimizer: Option<OptimizerSection>,
    #[serde(default)]
    pub simulation: Option<SimulationSection>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Geometric,
    Elastostatic,
    Combined,
}

impl From<ModeName> for CalibrationMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Geometric => CalibrationMode::Geometric,
            ModeName::Elastostatic => CalibrationMode::Elastostatic,
            ModeName::Combined => CalibrationMode::Combined,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConventionName {
    Standard,
    Modified,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthName {
    A,
    D,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub alpha_deg: f64,
    pub a: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_deg: f64,
    pub length: LengthName,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    pub convention: ConventionName,
    pub links: Vec<LinkEntry>,
    #[serde(default)]
    pub tool: [f64; 3],
    /// `[min, max]` per joint, degrees.
    pub joint_limits_deg: Vec<[f64; 2]>,
    /// Maximum payload force, N.
    pub payload: f64,
}

impl RobotSection {
    pub fn build(&self) -> Result<RobotModel> {
        let convention = match self.convention {
            ConventionName::Standard => Convention::Standard,
            ConventionName::Modified => Convention::Modified,
        };
        let links = self
            .links
            .iter()
            .map(|l| LinkRow {
                alpha: l.alpha_deg.to_radians(),
                a: l.a,
                d: l.d,
                theta: l.theta_deg.to_radians(),
                length: match l.length {
                    LengthName::A => LengthAxis::A,
                    LengthName::D => LengthAxis::D,
                },
            })
            .collect();
        let limits = self
            .joint_limits_deg
            .iter()
            .map(|[lo, hi]| JointLimit::new(lo.to_radians(), hi.to_radians()))
            .collect();
        RobotModel::new(convention, links, Vector3::from(self.tool), limits, self.payload)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default)]
    pub p_z_min: Option<f64>,
    #[serde(default)]
    pub r_min: f64,
    pub p_min: [f64; 3],
    pub p_max: [f64; 3],
    #[serde(default)]
    pub phi_min_deg: Option<f64>,
}

impl ConstraintSection {
    pub fn build(&self) -> Result<ConstraintSet> {
        ConstraintSet::new(
            self.p_z_min,
            self.r_min,
            Vector3::from(self.p_min),
            Vector3::from(self.p_max),
            self.phi_min_deg.map(f64::to_radians),
        )
    }
}

/// A configuration on disk: joint angles in degrees and an optional wrench
/// (force N, torque N·mm, base frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub q_deg: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrench: Option<[f64; 6]>,
}

impl PoseEntry {
    pub fn from_config(c: &MeasurementConfig) -> Self {
        Self { q_deg: c.q.iter().map(|v| v.to_degrees()).collect(), wrench: c.wrench.map(|w| w.to_array()) }
    }

    pub fn to_config(&self) -> Result<MeasurementConfig> {
        let wrench = self.wrench.map(|w| Wrench::from_slice(&w)).transpose()?;
        Ok(MeasurementConfig::new(self.q_deg.iter().map(|v| v.to_radians()).collect(), wrench))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub strategy: Strategy,
    pub m: usize,
    /// `(m0, k)` pairs for `compare`; `[(m, 1)]` when absent.
    #[serde(default)]
    pub factorizations: Option<Vec<(usize, usize)>>,
    /// Strategies for `compare`; `[strategy]` when absent.
    #[serde(default)]
    pub compare: Option<Vec<Strategy>>,
    /// Evenly spaced levels per decision variable, for discretized problems.
    #[serde(default)]
    pub lattice: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub n_trials: usize,
    #[serde(default)]
    pub truth: GroundTruth,
    #[serde(default)]
    pub generator: Generator,
}

/// Everything a command needs, built from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: RobotModel,
    pub constraints: ConstraintSet,
    pub mode: CalibrationMode,
    pub mask: ParamMask,
    pub test: TestPoseSet,
    pub sigma: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: "schema_version".into(),
                message: format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
            });
        }
        Ok(cfg)
    }

    pub fn setup(&self) -> Result<Setup> {
        let at = |path: &str| {
            let path = path.to_string();
            move |e: Error| Error::Config { path: path.clone(), message: e.to_string() }
        };
        let model = self.robot.build().map_err(at("robot"))?;
        let constraints = self.constraints.build().map_err(at("constraints"))?;
        let mode = CalibrationMode::from(self.mode);
        let n = model.n_joints();
        let mask = match &self.mask {
            Some(names) => ParamMask::from_names(n, names).map_err(at("mask"))?,
            None => ParamMask::for_mode(n, mode),
        };
        let poses = self
            .test_poses
            .iter()
            .map(PoseEntry::to_config)
            .collect::<Result<Vec<_>>>()
            .map_err(at("test_poses"))?;
        let test = TestPoseSet::new(poses).map_err(at("test_poses"))?;
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config { path: "sigma".into(), message: format!("{} must be >= 0", self.sigma) });
        }
        Ok(Setup { model, constraints, mode, mask, test, sigma: self.sigma })
    }

    pub fn optimizer(&self) -> Result<&OptimizerSection> {
        self.optimizer.as_ref().ok_or_else(|| Error::Config {
            path: "optimizer".into(),
            message: "section required by this command".into(),
        })
    }

    pub fn simulation(&self) -> Result<&SimulationSection> {
        self.simulation.as_ref().ok_or_else(|| Error::Config {
            path: "simulation".into(),
            message: "section required by this command".into(),
        })
    }

    /// The design problem of the `optimizer` section.
    pub fn problem(&self) -> Result<DesignProblem> {
        let s = self.setup()?;
        let opt = self.optimizer()?;
        DesignProblem::new(s.model, s.mode, s.mask, s.test, s.sigma, s.constraints, opt.m)
            .and_then(|p| p.with_lattice(opt.lattice))
    }
}

/// A measurement plan on disk, as written by `plan` and read by `evaluate`
/// and `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub schema_version: u32,
    pub mode: ModeName,
    pub poses: Vec<PoseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<serde_json::Value>,
}

impl PlanFile {
    pub fn new(plan: &ExperimentPlan) -> Self {
        let mode = match plan.mode {
            CalibrationMode::Geometric => ModeName::Geometric,
            CalibrationMode::Elastostatic => ModeName::Elastostatic,
            CalibrationMode::Combined => ModeName::Combined,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            poses: plan.configs.iter().map(PoseEntry::from_config).collect(),
            rho0: None,
            design: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let file: PlanFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{}: {}", path.display(), e.path()),
            message: e.inner().to_string(),
        })?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: format!("{}: schema_version", path.display()),
                message: format!("unsupported version {}", file.schema_version),
            });
        }
        Ok(file)
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        let configs = self.poses.iter().map(PoseEntry::to_config).collect::<Result<Vec<_>>>()?;
        Ok(ExperimentPlan::new(configs, self.mode.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "seed": 7,
        "robot": {
            "convention": "standard",
            "links": [
                {"alpha_deg": 0, "a": 1000, "d": 0, "length": "a"},
                {"alpha_deg": 0, "a": 800, "d": 0, "length": "a"}
            ],
            "joint_limits_deg": [[-180, 180], [0, 180]],
            "payload": 100
        },
        "constraints": {"p_min": [-5000, -5000, -5000], "p_max": [5000, 5000, 5000]},
        "mode": "elastostatic",
        "test_poses": [{"q_deg": [0, 90], "wrench": [0, 100, 0, 0, 0, 0]}],
        "sigma": 0.03
    }"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let s = cfg.setup().unwrap();
        assert_eq!(s.model.n_joints(), 2);
        assert_eq!(s.mask.active_names(), vec!["k1", "k2"]);
        assert!((s.test.poses()[0].q[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(cfg.optimizer().is_err());
    }

    #[test]
    fn unknown_field_names_its_path() {
        let bad = MINIMAL.replace("\"p_min\"", "\"r_mn\": 3, \"p_min\"");
        let err = RunConfig::parse(&bad).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "constraints.r_mn");
                assert!(message.contains("r_mn"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_schema_version() {
        let bad = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config { .. })));
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = ExperimentPlan::new(
            vec![MeasurementConfig::new(vec![0.1, 0.2], Some(Wrench::from_slice(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap()))],
            CalibrationMode::Combined,
        );
        let file = PlanFile::new(&plan);
        let text = serde_json::to_string(&file).unwrap();
        let back: PlanFile = serde_json::from_str(&text).unwrap();
        let p = back.plan().unwrap();
        assert_eq!(p.mode, CalibrationMode::Combined);
        assert!((p.configs[0].q[1] - 0.2).abs() < 1e-15);
        assert_eq!(p.configs[0].wrench, plan.configs[0].wrench);
    }
}
