use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rescal::array::{simulate_measurement, steering, ArrayConfig, ArrayKind, MimoGroundTruth};
use rescal::beamform::{
    beam_pattern, beam_patterns, ideal_pattern, null_indices, pattern_metrics, scan_grid,
    write_pattern_csv,
};
use rescal::calib::{calibrate_full_array, CalibrationResult, ObservationSet};
use rescal::slepian::{build_slepian_basis, SlepianBasis};
use rescal::sphere::{fibonacci_nodes, AngularRegion, Direction};

fn basis() -> Arc<SlepianBasis> {
    static B: OnceLock<Arc<SlepianBasis>> = OnceLock::new();
    B.get_or_init(|| {
        let r = AngularRegion::from_degrees(-60.0, 60.0, 5.0, 60.0).unwrap();
        Arc::new(build_slepian_basis(20, &r).unwrap())
    })
    .clone()
}

fn truth(seed: u64) -> MimoGroundTruth {
    let cfg = ArrayConfig::new(8, 8).unwrap();
    MimoGroundTruth::random(cfg, basis(), 0.05, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Direct double sum `|Σ_l Σ_m conj(w_l v_m) y_lm|^2`, no Kronecker helper.
fn brute_force_db(gt: &MimoGroundTruth, az: f64, target: &Direction, corr: Option<(&[Complex64], &[Complex64])>) -> f64 {
    let cfg = gt.config();
    let d = Direction::new(az, target.elevation).unwrap();
    let at = steering(cfg, ArrayKind::Transmit, &d);
    let ar = steering(cfg, ArrayKind::Receive, &d);
    let y = gt.snapshot(target);
    let mut acc = Complex64::new(0.0, 0.0);
    for l in 0..cfg.num_tx {
        for m in 0..cfg.num_rx {
            let mut w = at[l] * ar[m];
            if let Some((ct, cr)) = corr {
                w *= ct[l] * cr[m];
            }
            acc += w.conj() * y[l * cfg.num_rx + m];
        }
    }
    10.0 * (acc.norm_sqr() / 4096.0).log10()
}

#[test]
fn patterns_match_brute_force() {
    let gt = truth(1);
    let target = Direction::from_degrees(20.0, 25.0).unwrap();
    let scan = scan_grid(basis().region(), &target, 0.5).unwrap();
    let u = beam_pattern(&gt, None, &target, &scan).unwrap();
    let cal = CalibrationResult::from_ground_truth(&gt);
    let c = beam_pattern(&gt, Some(&cal), &target, &scan).unwrap();
    let rho = basis().eval(&target);
    let phasors = |kind| -> Vec<Complex64> {
        cal.residual_phases(kind, &rho)
            .into_iter()
            .map(|p| Complex64::from_polar(1.0, p))
            .collect()
    };
    let (ct, cr) = (phasors(ArrayKind::Transmit), phasors(ArrayKind::Receive));
    for (i, az) in scan.iter().enumerate().step_by(7) {
        let bu = brute_force_db(&gt, *az, &target, None);
        let bc = brute_force_db(&gt, *az, &target, Some((&ct, &cr)));
        if bu > -200.0 {
            assert!((u.power_db[i] - bu).abs() < 1e-9, "{az}");
        }
        if bc > -200.0 {
            assert!((c.power_db[i] - bc).abs() < 1e-9, "{az}");
        }
    }
}

#[test]
fn ideal_nulls_are_deep_and_between_sidelobes() {
    let gt = truth(2);
    let target = Direction::from_degrees(0.0, 30.0).unwrap();
    let scan = scan_grid(basis().region(), &target, 0.05).unwrap();
    let p = ideal_pattern(&gt, &target, &scan).unwrap();
    let nulls = null_indices(&p);
    assert!(nulls.len() >= 4);
    let mean: f64 = nulls.iter().map(|&i| p.power_db[i]).sum::<f64>() / nulls.len() as f64;
    assert!(mean < -30.0, "{mean}");
    // first sidelobe of an unwindowed 8-element aperture product is about -13 dB
    let (peak, _) = p.grid_peak();
    let first = nulls.iter().find(|&&i| i > peak).unwrap();
    let side = p.power_db[*first..].iter().cloned().fold(f64::MIN, f64::max);
    assert!(side < -12.0 && side > -14.5, "{side}");
}

#[test]
fn calibrated_at_8db_beats_uncalibrated() {
    let gt = truth(3);
    let dirs = fibonacci_nodes(basis().region(), 150);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let ms: Vec<_> = dirs
        .iter()
        .map(|d| simulate_measurement(&gt, d, Some(8.0), &mut rng))
        .collect();
    let cal = calibrate_full_array(&ObservationSet::from_measurements(*gt.config(), &ms).unwrap(), &basis())
        .unwrap();
    let (mut rec, mut du, mut dc, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (az, el) in [(-40.0, 15.0), (-10.0, 45.0), (5.0, 20.0), (25.0, 35.0), (50.0, 50.0)] {
        let t = Direction::from_degrees(az, el).unwrap();
        let scan = scan_grid(basis().region(), &t, 0.05).unwrap();
        let [i, u, c] = beam_patterns(&gt, &cal, &t, &scan).unwrap();
        let m = pattern_metrics(&i, &u, &c, &t).unwrap();
        rec += m.calibrated.peak_snr_recovery_fraction;
        du += m.uncalibrated.direction_error_deg;
        dc += m.calibrated.direction_error_deg;
        n += 1.0;
    }
    assert!(rec / n >= 0.95, "{}", rec / n);
    assert!(dc < du, "{dc} vs {du}");
}

#[test]
fn refining_grid_keeps_direction_error() {
    let gt = truth(4);
    let t = Direction::from_degrees(-17.3, 28.0).unwrap();
    let err = |step: f64| {
        let scan = scan_grid(basis().region(), &t, step).unwrap();
        let i = ideal_pattern(&gt, &t, &scan).unwrap();
        let u = beam_pattern(&gt, None, &t, &scan).unwrap();
        pattern_metrics(&i, &u, &u, &t).unwrap().uncalibrated.direction_error_deg
    };
    for step in [0.2, 0.1, 0.05] {
        let coarse = err(step);
        let fine = err(step / 2.0);
        assert!((coarse - fine).abs() < step, "{step}: {coarse} vs {fine}");
    }
}

#[test]
fn recovery_never_exceeds_one() {
    for seed in 0..4 {
        let gt = truth(10 + seed);
        let cal = CalibrationResult::from_ground_truth(&truth(20 + seed));
        let t = Direction::from_degrees(10.0 * seed as f64, 30.0).unwrap();
        let scan = scan_grid(basis().region(), &t, 0.1).unwrap();
        let [i, u, c] = beam_patterns(&gt, &cal, &t, &scan).unwrap();
        let m = pattern_metrics(&i, &u, &c, &t).unwrap();
        for pm in [m.uncalibrated, m.calibrated] {
            assert!(pm.peak_snr_recovery_fraction <= 1.0 + 1e-12);
            assert!(pm.peak_snr_recovery_fraction > 0.0);
            assert!(pm.direction_error_deg >= 0.0);
        }
    }
}

#[test]
fn pattern_csv_layout() {
    let gt = truth(5);
    let t = Direction::from_degrees(0.0, 30.0).unwrap();
    let scan = scan_grid(basis().region(), &t, 1.0).unwrap();
    let cal = CalibrationResult::from_ground_truth(&gt);
    let ps = beam_patterns(&gt, &cal, &t, &scan).unwrap();
    let mut buf = Vec::new();
    write_pattern_csv(&mut buf, &ps, Some("prov")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# prov");
    assert_eq!(lines[1], "azimuth_deg,ideal_db,uncal_db,cal_db");
    assert_eq!(lines.len(), scan.len() + 2);
    let mid: Vec<f64> = lines[2 + 60].split(',').map(|v| v.parse().unwrap()).collect();
    assert!(mid[0].abs() < 1e-9);
    assert!(mid[1].abs() < 1e-12);
}
