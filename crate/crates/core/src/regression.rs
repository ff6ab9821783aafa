//! Observation matrices, least-squares identification and its covariance.
//!
//! Each measurement contributes one 3-row block `Bᵢ` over the active
//! parameters: `[J | 0]` for geometric, `[0 | A]` for elastostatic and
//! `[J | A]` for combined calibration, with `J` from
//! [`RobotModel::param_jacobian`] and `A` from [`RobotModel::build_a`].

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{param_name, Chain, MeasurementConfig, ParamMask, ParamVector, RobotModel, Wrench};

/// Which parameter group an experiment is meant to identify.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CalibrationMode {
    Geometric,
    Elastostatic,
    Combined,
}

impl CalibrationMode {
    pub fn needs_wrench(self) -> bool {
        !matches!(self, CalibrationMode::Geometric)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Geometric => "geometric",
            CalibrationMode::Elastostatic => "elastostatic",
            CalibrationMode::Combined => "combined",
        }
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(CalibrationMode::Geometric),
            "elastostatic" => Ok(CalibrationMode::Elastostatic),
            "combined" => Ok(CalibrationMode::Combined),
            other => Err(Error::invalid(format!(
                "unknown calibration mode `{other}` (expected geometric, elastostatic or combined)"
            ))),
        }
    }
}

/// Ordered list of measurement configurations for one calibration mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub configs: Vec<MeasurementConfig>,
    pub mode: CalibrationMode,
}

impl ExperimentPlan {
    pub fn new(configs: Vec<MeasurementConfig>, mode: CalibrationMode) -> Self {
        Self { configs, mode }
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Each configuration repeated `k` times in place: `[c1 ×k, c2 ×k, ...]`.
    pub fn repeated(&self, k: usize) -> Self {
        let configs = self
            .configs
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.clone(), k))
            .collect();
        Self { configs, mode: self.mode }
    }

    /// Checks dimensions and wrench presence against `model` and the mode.
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::invalid("plan has no measurement configurations"));
        }
        for (i, c) in self.configs.iter().enumerate() {
            check_config(model, c, self.mode).map_err(|e| match e {
                Error::InvalidInput(msg) => Error::InvalidInput(format!("configuration {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }
}

pub(crate) fn check_config(model: &RobotModel, config: &MeasurementConfig, mode: CalibrationMode) -> Result<()> {
    if config.q.len() != model.n_joints() {
        return Err(Error::invalid(format!(
            "joint vector has {} entries, model has {} joints",
            config.q.len(),
            model.n_joints()
        )));
    }
    if !config.q.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("joint vector contains a non-finite value"));
    }
    if mode.needs_wrench() && config.wrench.is_none() {
        return Err(Error::invalid(format!("{} calibration requires a wrench", mode.as_str())));
    }
    Ok(())
}

/// The 3 × d observation block of one measurement over the active columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBlock {
    pub matrix: DMatrix<f64>,
    /// Indices into the full 3n layout, one per column of `matrix`.
    pub columns: Vec<usize>,
    pub n_joints: usize,
    pub config: MeasurementConfig,
}

/// Unmasked 3 × 3n block with the inactive group of the mode left at zero.
pub fn build_b_full(model: &RobotModel, config: &MeasurementConfig, mode: CalibrationMode) -> Result<DMatrix<f64>> {
    check_config(model, config, mode)?;
    let n = model.n_joints();
    let chain = model.chain(&config.q, None);
    let all: Vec<usize> = (0..3 * n).collect();
    let mut out = DMatrix::zeros(3, 3 * n);
    fill_block(&chain, &config.wrench_or_zero(), mode, &all, n, &mut out);
    Ok(out)
}

pub fn build_b(
    model: &RobotModel,
    config: &MeasurementConfig,
    mode: CalibrationMode,
    mask: &ParamMask,
) -> Result<ObservationBlock> {
    check_config(model, config, mode)?;
    let n = model.n_joints();
    if mask.len() != 3 * n {
        return Err(Error::invalid(format!(
            "mask has {} entries, model needs {}",
            mask.len(),
            3 * n
        )));
    }
    let columns = mask.active_indices();
    let chain = model.chain(&config.q, None);
    let mut matrix = DMatrix::zeros(3, columns.len());
    fill_block(&chain, &config.wrench_or_zero(), mode, &columns, n, &mut matrix);
    Ok(ObservationBlock { matrix, columns, n_joints: n, config: config.clone() })
}

/// Writes the selected columns of `B` into `out` (3 × columns.len()).
pub(crate) fn fill_block(
    chain: &Chain,
    wrench: &Wrench,
    mode: CalibrationMode,
    columns: &[usize],
    n: usize,
    out: &mut DMatrix<f64>,
) {
    let geometric = !matches!(mode, CalibrationMode::Elastostatic);
    let elastic = mode.needs_wrench();
    for (c, &idx) in columns.iter().enumerate() {
        let col = match idx / n {
            0 if geometric => chain.length_dirs[idx],
            1 if geometric => chain.lever(idx - n),
            2 if elastic => {
                let j = idx - 2 * n;
                let lever = chain.lever(j);
                lever * (lever.dot(&wrench.force) + chain.axes[j].dot(&wrench.torque))
            }
            _ => Vector3::zeros(),
        };
        out.fixed_view_mut::<3, 1>(0, c).copy_from(&col);
    }
}

/// Sums `BᵢᵀBᵢ` terms in the order of their keys, making the result
/// independent of measurement order.
pub(crate) fn sum_sorted<'a>(mut terms: Vec<(&'a [u64], &'a DMatrix<f64>)>, d: usize) -> DMatrix<f64> {
    terms.sort_by(|a, b| a.0.cmp(b.0));
    let mut m = DMatrix::zeros(d, d);
    for (_, g) in terms {
        m += g;
    }
    m
}

fn check_blocks(blocks: &[ObservationBlock]) -> Result<()> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::invalid("no observation blocks given"))?;
    if blocks.iter().any(|b| b.columns != first.columns || b.n_joints != first.n_joints) {
        return Err(Error::invalid("observation blocks were built with different masks"));
    }
    Ok(())
}

/// `Σ BᵢᵀBᵢ` over the blocks.
pub fn normal_matrix(blocks: &[ObservationBlock]) -> Result<DMatrix<f64>> {
    check_blocks(blocks)?;
    let d = blocks[0].columns.len();
    let grams: Vec<DMatrix<f64>> = blocks.iter().map(|b| b.matrix.tr_mul(&b.matrix)).collect();
    let keys: Vec<Vec<u64>> = blocks.iter().map(|b| b.config.sort_key()).collect();
    let terms = keys.iter().map(|k| k.as_slice()).zip(grams.iter()).collect();
    Ok(sum_sorted(terms, d))
}

fn factor_blocks(blocks: &[ObservationBlock]) -> Result<SpdFactor> {
    let m = normal_matrix(blocks)?;
    let n = blocks[0].n_joints;
    let cols = blocks[0].columns.clone();
    SpdFactor::new(&m, |i| param_name(n, cols[i]))
}

/// One observed end-effector displacement and the experiment that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub config: MeasurementConfig,
    /// Observed displacement in mm.
    pub dp: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct Identification {
    /// Estimate in the full 3n layout; inactive entries are zero.
    pub estimate: ParamVector,
    /// `Δpᵢ − Bᵢ·ΔX̂` per record, in the order the records were given.
    pub residuals: Vec<Vector3<f64>>,
    pub rms_residual: f64,
    pub condition: f64,
}

/// Least-squares estimate `ΔX̂ = (Σ BᵢᵀBᵢ)⁻¹ Σ Bᵢᵀ Δpᵢ`.
///
/// Solved by Householder QR on the stacked, column-equilibrated system
/// instead of the normal equations. Rows are stacked in a canonical order, so
/// the result does not depend on the order of the measurements.
pub fn identify(blocks: &[ObservationBlock], records: &[MeasurementRecord]) -> Result<Identification> {
    check_blocks(blocks)?;
    if blocks.len() != records.len() {
        return Err(Error::invalid(format!(
            "{} observation blocks for {} measurement records",
            blocks.len(),
            records.len()
        )));
    }
    for (i, (b, r)) in blocks.iter().zip(records).enumerate() {
        if b.config != r.config {
            return Err(Error::invalid(format!(
                "record {} does not match the configuration of its observation block",
                i + 1
            )));
        }
        if !r.dp.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("record {} has a non-finite displacement", i + 1)));
        }
    }
    let factor = factor_blocks(blocks)?;
    let d = blocks[0].columns.len();
    let n = blocks[0].n_joints;

    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let keys: Vec<Vec<u64>> = records
        .iter()
        .map(|r| {
            let mut k = r.config.sort_key();
            k.extend(r.dp.iter().map(|v| v.to_bits()));
            k
        })
        .collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(Ordering::Equal));

    let mut scale: DVector<f64> = DVector::zeros(d);
    for &i in &order {
        for c in 0..d {
            scale[c] += blocks[i].matrix.column(c).norm_squared();
        }
    }
    scale.apply(|s: &mut f64| *s = 1.0 / s.sqrt());

    let rows = 3 * blocks.len();
    let mut design = DMatrix::zeros(rows, d);
    let mut obs = DVector::zeros(rows);
    for (slot, &i) in order.iter().enumerate() {
        for c in 0..d {
            for r in 0..3 {
                design[(3 * slot + r, c)] = blocks[i].matrix[(r, c)] * scale[c];
            }
        }
        obs.rows_mut(3 * slot, 3).copy_from(&records[i].dp);
    }
    let qr = design.qr();
    let rhs = qr.q().tr_mul(&obs);
    let z = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Unidentifiable {
            condition: f64::INFINITY,
            limit: crate::linalg::CONDITION_LIMIT,
            directions: vec![],
        })?;
    let active: Vec<f64> = z.iter().zip(scale.iter()).map(|(z, s)| z * s).collect();
    let est_active = DVector::from_column_slice(&active);

    let residuals: Vec<Vector3<f64>> = blocks
        .iter()
        .zip(records)
        .map(|(b, r)| {
            let pred = &b.matrix * &est_active;
            r.dp - Vector3::new(pred[0], pred[1], pred[2])
        })
        .collect();
    let rms_residual = (residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / rows as f64).sqrt();

    let mut full = vec![0.0; 3 * n];
    for (&col, &v) in blocks[0].columns.iter().zip(&active) {
        full[col] = v;
    }
    Ok(Identification {
        estimate: ParamVector::from_vec(n, full)?,
        residuals,
        rms_residual,
        condition: factor.condition(),
    })
}

/// Identification-error covariance `σ² (Σ BᵢᵀBᵢ)⁻¹` over the active parameters.
pub fn covariance(blocks: &[ObservationBlock], sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma {sigma} must be finite and >= 0")));
    }
    let factor = factor_blocks(blocks)?;
    let mut cov = factor.inverse() * (sigma * sigma);
    // exact symmetry
    let d = cov.nrows();
    for j in 0..d {
        for i in j + 1..d {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Reads measurement records from CSV.
///
/// Header columns: `q1..qn` (degrees), optionally `w1..w6` (force N, torque
/// N·mm, base frame), then `dpx, dpy, dpz` (mm). Column order is free.
pub fn read_measurements_csv(path: &Path, n_joints: usize) -> Result<Vec<MeasurementRecord>> {
    let csv_err = |message: String| Error::Csv { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let q_cols: Vec<usize> = (1..=n_joints)
        .map(|i| find(&format!("q{i}")).ok_or_else(|| csv_err(format!("missing column `q{i}`"))))
        .collect::<Result<_>>()?;
    let w_cols: Vec<Option<usize>> = (1..=6).map(|i| find(&format!("w{i}"))).collect();
    let has_w = w_cols.iter().any(|c| c.is_some());
    if has_w && w_cols.iter().any(|c| c.is_none()) {
        return Err(csv_err("wrench columns must be all of w1..w6 or none".into()));
    }
    let dp_cols: Vec<usize> = ["dpx", "dpy", "dpz"]
        .iter()
        .map(|n| find(n).ok_or_else(|| csv_err(format!("missing column `{n}`"))))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let get = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_err(format!("line {line}, column `{}`: `{raw}` is not a number", &headers[c])))?;
            if !v.is_finite() {
                return Err(csv_err(format!("line {line}, column `{}`: value is not finite", &headers[c])));
            }
            Ok(v)
        };
        let q = q_cols.iter().map(|&c| get(c).map(f64::to_radians)).collect::<Result<Vec<_>>>()?;
        let wrench = if has_w {
            let w = w_cols.iter().map(|c| get(c.unwrap())).collect::<Result<Vec<_>>>()?;
            Some(Wrench::from_slice(&w)?)
        } else {
            None
        };
        let dp = Vector3::new(get(dp_cols[0])?, get(dp_cols[1])?, get(dp_cols[2])?);
        out.push(MeasurementRecord { config: MeasurementConfig::new(q, wrench), dp });
    }
    Ok(out)
}

/// Writes records in the layout accepted by [`read_measurements_csv`].
pub fn write_measurements_csv(records: &[MeasurementRecord], n_joints: usize) -> String {
    let has_w = records.iter().any(|r| r.config.wrench.is_some());
    let mut header: Vec<String> = (1..=n_joints).map(|i| format!("q{i}")).collect();
    if has_w {
        header.extend((1..=6).map(|i| format!("w{i}")));
    }
    header.extend(["dpx", "dpy", "dpz"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for r in records {
        let mut fields: Vec<String> = r.config.q.iter().map(|q| q.to_degrees().to_string()).collect();
        if has_w {
            fields.extend(r.config.wrench_or_zero().to_array().iter().map(|v| v.to_string()));
        }
        fields.extend(r.dp.iter().map(|v| v.to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(model: &RobotModel, rng: &mut ChaCha8Rng, loaded: bool) -> MeasurementConfig {
        let q = model
            .joint_limits()
            .iter()
            .map(|l| rng.random_range(l.min..l.max))
            .collect();
        let w = loaded.then(|| {
            Wrench::from_slice(&[
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-1e4..1e4),
                rng.random_range(-1e4..1e4),
                rng.random_range(-1e4..1e4),
            ])
            .unwrap()
        });
        MeasurementConfig::new(q, w)
    }

    #[test]
    fn geometric_block_has_zero_compliance_columns() {
        let model = fixtures::desk_6r();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_config(&model, &mut rng, true);
        let b = build_b_full(&model, &c, CalibrationMode::Geometric).unwrap();
        assert_eq!(b.shape(), (3, 18));
        assert!(b.columns(12, 6).iter().all(|&v| v == 0.0));
        assert!(b.columns(0, 12).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn elastostatic_zero_wrench_block_is_zero() {
        let model = fixtures::desk_6r();
        let c = MeasurementConfig::new(vec![0.1, -0.4, 0.3, 0.0, 0.5, 0.2], Some(Wrench::zero()));
        let b = build_b_full(&model, &c, CalibrationMode::Elastostatic).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_block_matches_model_outputs() {
        let model = fixtures::desk_6r();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let c = random_config(&model, &mut rng, true);
            let b = build_b_full(&model, &c, CalibrationMode::Combined).unwrap();
            let j = model.param_jacobian(&c.q).unwrap();
            let a = model.build_a(&c.q, c.wrench.as_ref().unwrap()).unwrap();
            assert_eq!(b.columns(0, 12).into_owned(), j);
            assert_eq!(b.columns(12, 6).into_owned(), a);
        }
    }

    #[test]
    fn loaded_modes_require_a_wrench() {
        let model = fixtures::desk_6r();
        let c = MeasurementConfig::unloaded(vec![0.0; 6]);
        let mask = ParamMask::for_mode(6, CalibrationMode::Combined);
        assert!(matches!(
            build_b(&model, &c, CalibrationMode::Elastostatic, &mask),
            Err(Error::InvalidInput(_))
        ));
        assert!(build_b(&model, &c, CalibrationMode::Geometric, &ParamMask::for_mode(6, CalibrationMode::Geometric)).is_ok());
    }

    #[test]
    fn identity_block_covariance() {
        let block = ObservationBlock {
            matrix: DMatrix::identity(3, 3),
            columns: vec![0, 1, 2],
            n_joints: 1,
            config: MeasurementConfig::unloaded(vec![0.0]),
        };
        let cov = covariance(std::slice::from_ref(&block), 1.0).unwrap();
        assert_relative_eq!(cov, DMatrix::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn single_pose_cannot_identify_nine_parameters() {
        let model = fixtures::desk_6r();
        let mask = fixtures::desk_mask();
        let c = MeasurementConfig::unloaded(vec![0.2, -0.5, 0.4, 0.1, 0.6, 0.0]);
        let block = build_b(&model, &c, CalibrationMode::Geometric, &mask).unwrap();
        let rec = MeasurementRecord { config: c, dp: Vector3::zeros() };
        let err = identify(&[block], &[rec]).unwrap_err();
        assert!(err.is_unidentifiable(), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let model = fixtures::desk_6r();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records: Vec<MeasurementRecord> = (0..4)
            .map(|_| MeasurementRecord {
                config: random_config(&model, &mut rng, true),
                dp: Vector3::new(0.1, -0.2, 0.3),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, write_measurements_csv(&records, 6)).unwrap();
        let back = read_measurements_csv(&path, 6).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in records.iter().zip(&back) {
            for (x, y) in a.config.q.iter().zip(&b.config.q) {
                assert_relative_eq!(x, y, max_relative = 1e-14);
            }
            assert_eq!(a.config.wrench, b.config.wrench);
            assert_eq!(a.dp, b.dp);
        }
    }

    #[test]
    fn csv_reports_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "q1,dpx,dpy,dpz\n10,0,0,0\n20,abc,0,0\n").unwrap();
        let err = read_measurements_csv(&path, 1).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("dpx"), "{err}");
        std::fs::write(&path, "q1,dpx,dpy\n10,0,0\n").unwrap();
        assert!(read_measurements_csv(&path, 1).unwrap_err().to_string().contains("dpz"));
    }
}
