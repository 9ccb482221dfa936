//! Conventional beamforming over an azimuth cut and the pattern metrics used
//! to judge a calibration.
//!
//! Patterns are evaluated on noiseless snapshots of a single target and
//! normalised by `(M_t M_r)^2`, so an ideal array peaks at 0 dB on target.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{kron, rx_steering, tx_steering, unit_phasor, ArrayKind, MimoGroundTruth};
use crate::calib::CalibrationResult;
use crate::sphere::{AngularRegion, Direction, SphereError};

/// Power below this is reported as this value instead of `-inf`.
pub const POWER_FLOOR_DB: f64 = -300.0;

pub const PATTERN_HEADER: [&str; 4] = ["azimuth_deg", "ideal_db", "uncal_db", "cal_db"];

#[derive(Debug, Error)]
pub enum BeamformError {
    #[error("calibration was fitted on basis {calibration}, ground truth uses {ground_truth}")]
    BasisMismatch {
        calibration: String,
        ground_truth: String,
    },
    #[error("calibration has {got} {kind} elements, array has {expected}")]
    ElementCount {
        kind: ArrayKind,
        expected: usize,
        got: usize,
    },
    #[error("target ({azimuth_deg:.3}°, {elevation_deg:.3}°) is outside the region")]
    TargetOutsideRegion { azimuth_deg: f64, elevation_deg: f64 },
    #[error("scan grid must be non-empty and strictly increasing")]
    BadScan,
    #[error("scan grid [{first_deg:.3}°, {last_deg:.3}°] does not cover the region azimuths")]
    ScanCoverage { first_deg: f64, last_deg: f64 },
    #[error("scan step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("patterns do not share a scan grid")]
    GridMismatch,
    #[error("ideal pattern has no interior minima on a {points}-point grid; refine the scan")]
    NoNulls { points: usize },
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ideal,
    Uncalibrated,
    Calibrated,
}

/// Normalised beamformer output along an azimuth cut at the target elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamPattern {
    pub target: Direction,
    pub scan_azimuths: Vec<f64>,
    pub power_db: Vec<f64>,
    pub variant: Variant,
}

impl BeamPattern {
    /// Grid index and value of the largest sample.
    pub fn grid_peak(&self) -> (usize, f64) {
        self.power_db
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
    }

    /// Azimuth of the maximum, refined by a parabola through the grid peak
    /// and its neighbours.
    pub fn peak_azimuth(&self) -> f64 {
        let (i, _) = self.grid_peak();
        let az = &self.scan_azimuths;
        if i == 0 || i + 1 == az.len() {
            return az[i];
        }
        let (y0, y1, y2) = (self.power_db[i - 1], self.power_db[i], self.power_db[i + 1]);
        let denom = y0 - 2.0 * y1 + y2;
        if denom >= 0.0 {
            return az[i];
        }
        let delta = (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5);
        if delta >= 0.0 {
            az[i] + delta * (az[i + 1] - az[i])
        } else {
            az[i] + delta * (az[i] - az[i - 1])
        }
    }
}

/// Quality of one evaluated pattern against the ideal one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternMetrics {
    /// Peak gain over the uncalibrated pattern; zero for the uncalibrated one.
    pub peak_snr_increase_db: f64,
    pub peak_snr_recovery_fraction: f64,
    pub mean_null_depth_db: f64,
    pub direction_error_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPair {
    pub uncalibrated: PatternMetrics,
    pub calibrated: PatternMetrics,
}

/// Target-aligned azimuth grid with spacing `step_deg` spanning the region.
/// Azimuths are returned unwrapped and increasing.
pub fn scan_grid(
    region: &AngularRegion,
    target: &Direction,
    step_deg: f64,
) -> Result<Vec<f64>, BeamformError> {
    if !(step_deg.is_finite() && step_deg > 0.0) {
        return Err(BeamformError::BadStep(step_deg));
    }
    if !region.contains(target) {
        return Err(outside(target));
    }
    let step = step_deg.to_radians();
    let lo = region.az_min;
    let hi = lo + region.az_span();
    let mut t = target.azimuth;
    while t < lo - 1e-12 {
        t += std::f64::consts::TAU;
    }
    let eps = 1e-9 * step;
    let k_min = ((lo - t) / step - eps).ceil() as i64;
    let k_max = ((hi - t) / step + eps).floor() as i64;
    Ok((k_min..=k_max).map(|k| t + k as f64 * step).collect())
}

fn outside(target: &Direction) -> BeamformError {
    BeamformError::TargetOutsideRegion {
        azimuth_deg: target.azimuth.to_degrees(),
        elevation_deg: target.elevation.to_degrees(),
    }
}

fn check_scan(region: &AngularRegion, scan: &[f64]) -> Result<(), BeamformError> {
    if scan.is_empty() || scan.iter().any(|a| !a.is_finite()) {
        return Err(BeamformError::BadScan);
    }
    if scan.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BeamformError::BadScan);
    }
    if region.covers_full_azimuth() {
        return Ok(());
    }
    let gap = scan
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
        .max(1e-9);
    let (first, last) = (scan[0], scan[scan.len() - 1]);
    let lo = region.az_min;
    let hi = lo + region.az_span();
    // compare modulo a full turn so unwrapped grids are accepted
    let shift = ((first - lo) / std::f64::consts::TAU).round() * std::f64::consts::TAU;
    if first - shift > lo + gap || last - shift < hi - gap {
        return Err(BeamformError::ScanCoverage {
            first_deg: first.to_degrees(),
            last_deg: last.to_degrees(),
        });
    }
    Ok(())
}

fn to_db(power: f64) -> f64 {
    if power > 0.0 {
        (10.0 * power.log10()).max(POWER_FLOOR_DB)
    } else {
        POWER_FLOOR_DB
    }
}

/// `|w(θ)^H y|^2 / (M_t M_r)^2` in dB over the scan, with
/// `w(θ) = (a_t(θ) ⊙ c_t) ⊗ (a_r(θ) ⊙ c_r)`.
fn evaluate(
    gt: &MimoGroundTruth,
    snapshot: &[Complex64],
    corrections: Option<(&[Complex64], &[Complex64])>,
    target: &Direction,
    scan: &[f64],
) -> Vec<f64> {
    let cfg = *gt.config();
    let norm = (cfg.num_channels() as f64).powi(2);
    scan.par_iter()
        .map(|&az| {
            let dir = Direction::new(az, target.elevation).expect("target elevation is valid");
            let mut at = tx_steering(&cfg, &dir);
            let mut ar = rx_steering(&cfg, &dir);
            if let Some((ct, cr)) = corrections {
                at.iter_mut().zip(ct).for_each(|(a, c)| *a *= c);
                ar.iter_mut().zip(cr).for_each(|(a, c)| *a *= c);
            }
            let out: Complex64 = kron(&at, &ar)
                .iter()
                .zip(snapshot)
                .map(|(w, y)| w.conj() * y)
                .sum();
            to_db(out.norm_sqr() / norm)
        })
        .collect()
}

fn check_calibration(gt: &MimoGroundTruth, calib: &CalibrationResult) -> Result<(), BeamformError> {
    if calib.basis_fingerprint != gt.basis().fingerprint() {
        return Err(BeamformError::BasisMismatch {
            calibration: calib.basis_fingerprint.clone(),
            ground_truth: gt.basis().fingerprint().to_string(),
        });
    }
    for kind in [ArrayKind::Transmit, ArrayKind::Receive] {
        let expected = gt.config().size(kind) - 1;
        let got = calib.elements(kind).len();
        if got != expected {
            return Err(BeamformError::ElementCount {
                kind,
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// Estimated gains of every element of `kind` at `dir`.
pub fn estimated_gains(
    calib: &CalibrationResult,
    gt: &MimoGroundTruth,
    kind: ArrayKind,
    dir: &Direction,
) -> Vec<Complex64> {
    let rho = gt.basis().eval(dir);
    calib
        .residual_phases(kind, &rho)
        .into_iter()
        .map(unit_phasor)
        .collect()
}

/// Pattern of an unperturbed array steered by ideal weights.
pub fn ideal_pattern(
    gt: &MimoGroundTruth,
    target: &Direction,
    scan: &[f64],
) -> Result<BeamPattern, BeamformError> {
    validate(gt, target, scan)?;
    let cfg = gt.config();
    let snapshot = kron(&tx_steering(cfg, target), &rx_steering(cfg, target));
    Ok(BeamPattern {
        target: *target,
        scan_azimuths: scan.to_vec(),
        power_db: evaluate(gt, &snapshot, None, target, scan),
        variant: Variant::Ideal,
    })
}

/// Pattern of the perturbed array, uncalibrated when `calib` is `None`.
///
/// The calibrated weights multiply the ideal steering vector by the gain
/// estimates at the target direction, which is where the perturbation that
/// the snapshot carries was imprinted.
pub fn beam_pattern(
    gt: &MimoGroundTruth,
    calib: Option<&CalibrationResult>,
    target: &Direction,
    scan: &[f64],
) -> Result<BeamPattern, BeamformError> {
    validate(gt, target, scan)?;
    let snapshot = gt.snapshot(target);
    let (power_db, variant) = match calib {
        None => (evaluate(gt, &snapshot, None, target, scan), Variant::Uncalibrated),
        Some(c) => {
            check_calibration(gt, c)?;
            let ct = estimated_gains(c, gt, ArrayKind::Transmit, target);
            let cr = estimated_gains(c, gt, ArrayKind::Receive, target);
            (
                evaluate(gt, &snapshot, Some((&ct, &cr)), target, scan),
                Variant::Calibrated,
            )
        }
    };
    Ok(BeamPattern {
        target: *target,
        scan_azimuths: scan.to_vec(),
        power_db,
        variant,
    })
}

fn validate(gt: &MimoGroundTruth, target: &Direction, scan: &[f64]) -> Result<(), BeamformError> {
    let region = gt.basis().region();
    if !region.contains(target) {
        return Err(outside(target));
    }
    check_scan(region, scan)
}

/// Ideal, uncalibrated and calibrated patterns on one grid.
pub fn beam_patterns(
    gt: &MimoGroundTruth,
    calib: &CalibrationResult,
    target: &Direction,
    scan: &[f64],
) -> Result<[BeamPattern; 3], BeamformError> {
    Ok([
        ideal_pattern(gt, target, scan)?,
        beam_pattern(gt, None, target, scan)?,
        beam_pattern(gt, Some(calib), target, scan)?,
    ])
}

/// Grid indices of the interior local minima of `pattern`.
pub fn null_indices(pattern: &BeamPattern) -> Vec<usize> {
    let p = &pattern.power_db;
    (1..p.len().saturating_sub(1))
        .filter(|&i| p[i] < p[i - 1] && p[i] <= p[i + 1])
        .collect()
}

/// Metrics of the uncalibrated and calibrated patterns against the ideal.
/// Nulls are located on the ideal pattern and sampled on the others.
pub fn pattern_metrics(
    ideal: &BeamPattern,
    uncal: &BeamPattern,
    cal: &BeamPattern,
    target: &Direction,
) -> Result<MetricsPair, BeamformError> {
    if uncal.scan_azimuths != ideal.scan_azimuths || cal.scan_azimuths != ideal.scan_azimuths {
        return Err(BeamformError::GridMismatch);
    }
    let nulls = null_indices(ideal);
    if nulls.is_empty() {
        return Err(BeamformError::NoNulls {
            points: ideal.power_db.len(),
        });
    }
    let ideal_peak = ideal.grid_peak().1;
    let uncal_peak = uncal.grid_peak().1;
    let one = |p: &BeamPattern| {
        let peak = p.grid_peak().1;
        PatternMetrics {
            peak_snr_increase_db: peak - uncal_peak,
            peak_snr_recovery_fraction: 10f64.powf((peak - ideal_peak) / 10.0),
            mean_null_depth_db: nulls.iter().map(|&i| p.power_db[i]).sum::<f64>()
                / nulls.len() as f64,
            direction_error_deg: angle_between(p.peak_azimuth(), target.azimuth).to_degrees(),
        }
    };
    Ok(MetricsPair {
        uncalibrated: one(uncal),
        calibrated: one(cal),
    })
}

fn angle_between(a: f64, b: f64) -> f64 {
    crate::sphere::wrap_angle(a - b).abs()
}

/// Writes the three patterns as `azimuth_deg,ideal_db,uncal_db,cal_db`.
pub fn write_pattern_csv<W: Write>(
    out: W,
    patterns: &[BeamPattern; 3],
    comment: Option<&str>,
) -> Result<(), BeamformError> {
    let [ideal, uncal, cal] = patterns;
    if uncal.scan_azimuths != ideal.scan_azimuths || cal.scan_azimuths != ideal.scan_azimuths {
        return Err(BeamformError::GridMismatch);
    }
    let mut out = std::io::BufWriter::new(out);
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{}", PATTERN_HEADER.join(","))?;
    for (i, az) in ideal.scan_azimuths.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            az.to_degrees(),
            ideal.power_db[i],
            uncal.power_db[i],
            cal.power_db[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Uncalibrated or calibrated power over an azimuth × elevation grid, rows
/// by elevation. Not used by the metrics.
pub fn beam_map(
    gt: &MimoGroundTruth,
    calib: Option<&CalibrationResult>,
    target: &Direction,
    azimuths: &[f64],
    elevations: &[f64],
) -> Result<Vec<Vec<f64>>, BeamformError> {
    if !gt.basis().region().contains(target) {
        return Err(outside(target));
    }
    let snapshot = gt.snapshot(target);
    let corrections = match calib {
        Some(c) => {
            check_calibration(gt, c)?;
            Some((
                estimated_gains(c, gt, ArrayKind::Transmit, target),
                estimated_gains(c, gt, ArrayKind::Receive, target),
            ))
        }
        None => None,
    };
    elevations
        .iter()
        .map(|&el| {
            let cut = Direction::new(target.azimuth, el)?;
            Ok(evaluate(
                gt,
                &snapshot,
                corrections.as_ref().map(|(t, r)| (t.as_slice(), r.as_slice())),
                &cut,
                azimuths,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::ArrayConfig;
    use crate::slepian::build_slepian_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(seed: Option<u64>) -> MimoGroundTruth {
        let region = AngularRegion::from_degrees(-60.0, 60.0, 5.0, 60.0).unwrap();
        let basis = Arc::new(build_slepian_basis(8, &region).unwrap());
        let cfg = ArrayConfig::new(8, 8).unwrap();
        match seed {
            None => MimoGroundTruth::zero(cfg, basis).unwrap(),
            Some(s) => {
                MimoGroundTruth::random(cfg, basis, 0.05, &mut ChaCha8Rng::seed_from_u64(s))
                    .unwrap()
            }
        }
    }

    #[test]
    fn grid_is_target_aligned() {
        let region = AngularRegion::from_degrees(-60.0, 60.0, 5.0, 60.0).unwrap();
        let target = Direction::from_degrees(10.02, 30.0).unwrap();
        let g = scan_grid(&region, &target, 0.05).unwrap();
        assert!(g.contains(&target.azimuth));
        assert!(g[0] >= region.az_min - 1e-12 && g[0] < region.az_min + 0.05f64.to_radians());
        assert!(*g.last().unwrap() <= region.az_max + 1e-12);
        assert_eq!(g.len(), 2400);
        assert!(matches!(
            scan_grid(&region, &target, 0.0),
            Err(BeamformError::BadStep(_))
        ));
    }

    #[test]
    fn ideal_pattern_peaks_at_zero_db() {
        let gt = setup(Some(1));
        let target = Direction::from_degrees(-23.0, 17.0).unwrap();
        let scan = scan_grid(gt.basis().region(), &target, 0.1).unwrap();
        let p = ideal_pattern(&gt, &target, &scan).unwrap();
        let (i, peak) = p.grid_peak();
        assert!(peak.abs() < 1e-12);
        assert!((scan[i] - target.azimuth).abs() < 1e-12);
        assert!(p.power_db.iter().all(|v| *v <= 1e-12));
    }

    #[test]
    fn zero_truth_uncalibrated_equals_ideal() {
        let gt = setup(None);
        let target = Direction::from_degrees(5.0, 40.0).unwrap();
        let scan = scan_grid(gt.basis().region(), &target, 0.2).unwrap();
        let a = ideal_pattern(&gt, &target, &scan).unwrap();
        let b = beam_pattern(&gt, None, &target, &scan).unwrap();
        for (x, y) in a.power_db.iter().zip(&b.power_db) {
            assert!((x - y).abs() < 1e-12 || (*x < -250.0 && *y < -250.0));
        }
    }

    #[test]
    fn perturbation_lowers_peak() {
        let gt = setup(Some(2));
        let target = Direction::from_degrees(30.0, 20.0).unwrap();
        let scan = scan_grid(gt.basis().region(), &target, 0.1).unwrap();
        let p = beam_pattern(&gt, None, &target, &scan).unwrap();
        assert!(p.grid_peak().1 < 0.0);
    }

    #[test]
    fn perfect_calibration_metrics() {
        let gt = setup(Some(3));
        let cal = CalibrationResult::from_ground_truth(&gt);
        let target = Direction::from_degrees(-12.0, 33.0).unwrap();
        let scan = scan_grid(gt.basis().region(), &target, 0.05).unwrap();
        let [i, u, c] = beam_patterns(&gt, &cal, &target, &scan).unwrap();
        let m = pattern_metrics(&i, &u, &c, &target).unwrap();
        assert!((m.calibrated.peak_snr_recovery_fraction - 1.0).abs() < 1e-10);
        assert!(m.calibrated.direction_error_deg < 1e-9);
        assert_eq!(m.uncalibrated.peak_snr_increase_db, 0.0);
        assert!(m.calibrated.peak_snr_increase_db > 0.0);
        let same = pattern_metrics(&i, &u, &u, &target).unwrap();
        assert_eq!(same.calibrated.peak_snr_increase_db, 0.0);
    }

    #[test]
    fn mismatched_basis_is_rejected() {
        let gt = setup(Some(4));
        let mut cal = CalibrationResult::from_ground_truth(&gt);
        cal.basis_fingerprint = "00".into();
        let target = Direction::from_degrees(0.0, 30.0).unwrap();
        let scan = scan_grid(gt.basis().region(), &target, 1.0).unwrap();
        assert!(matches!(
            beam_pattern(&gt, Some(&cal), &target, &scan),
            Err(BeamformError::BasisMismatch { .. })
        ));
    }

    #[test]
    fn coarse_grid_has_no_nulls() {
        let gt = setup(None);
        let target = Direction::from_degrees(0.0, 30.0).unwrap();
        let scan = vec![-60f64.to_radians(), 0.0, 60f64.to_radians()];
        let p = ideal_pattern(&gt, &target, &scan).unwrap();
        assert!(matches!(
            pattern_metrics(&p, &p, &p, &target),
            Err(BeamformError::NoNulls { points: 3 })
        ));
    }

    #[test]
    fn narrow_scan_is_rejected() {
        let gt = setup(None);
        let target = Direction::from_degrees(0.0, 30.0).unwrap();
        let scan: Vec<f64> = (-10..=10).map(|d| (d as f64).to_radians()).collect();
        assert!(matches!(
            ideal_pattern(&gt, &target, &scan),
            Err(BeamformError::ScanCoverage { .. })
        ));
        let outside = Direction::from_degrees(80.0, 30.0).unwrap();
        assert!(matches!(
            ideal_pattern(&gt, &outside, &scan),
            Err(BeamformError::TargetOutsideRegion { .. })
        ));
    }

    #[test]
    fn parabolic_peak_recovers_vertex() {
        let az: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let vertex = 0.537;
        let p = BeamPattern {
            target: Direction::new(0.0, 0.1).unwrap(),
            power_db: az.iter().map(|a| -3.0 * (a - vertex).powi(2)).collect(),
            scan_azimuths: az,
            variant: Variant::Ideal,
        };
        assert!((p.peak_azimuth() - vertex).abs() < 1e-12);
    }
}
