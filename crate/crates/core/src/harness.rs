//! Experiment orchestration: Monte Carlo weight-recovery sweeps, beam
//! pattern export, beamformer metric tables and file-based calibration.
//!
//! Every random stream is seeded from the master seed and a tag naming what
//! it drives, so results do not depend on scheduling or on which other
//! cells are present.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::array::{simulate_measurement, ArrayConfig, ArrayError, ArrayKind, MimoGroundTruth};
use crate::beamform::{
    beam_pattern, ideal_pattern, pattern_metrics, scan_grid, BeamPattern, BeamformError,
    MetricsPair,
};
use crate::calib::{
    calibrate_full_array_with, CalibError, CalibrationResult, Calibrator, ObservationSet,
    RankPolicy,
};
use crate::slepian::{build_slepian_basis, RegionDegrees, SlepianBasis, SlepianError};
use crate::sphere::{fibonacci_nodes, AngularRegion, Direction, SphereError};

pub const TOOL_NAME: &str = "rescal";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const METRICS_HEADER: [&str; 10] = [
    "observation_snr_db",
    "peak_snr_increase_db",
    "peak_snr_increase_pct",
    "peak_snr_recovery_pct",
    "null_depth_uncal_db",
    "null_depth_cal_db",
    "uncal_delta_theta_deg",
    "cal_delta_theta_deg",
    "samples",
    "excluded",
];

pub const CELLS_HEADER: [&str; 7] = [
    "scatterers",
    "snr_db",
    "mean_rmse",
    "std_rmse",
    "completed",
    "excluded",
    "rank_deficient",
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every run failed; first error: {0}")]
    AllRunsFailed(String),
    #[error(transparent)]
    Slepian(#[from] SlepianError),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::AllRunsFailed(_) => true,
            HarnessError::Slepian(e) => matches!(
                e,
                SlepianError::Asymmetric(_) | SlepianError::EigenFailure
            ),
            HarnessError::Calib(e) => e.is_numerical(),
            _ => false,
        }
    }

    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}

/// Observation SNR in dB, or no noise at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Noiseless,
}

impl Snr {
    pub fn db(self) -> Option<f64> {
        match self {
            Snr::Db(v) => Some(v),
            Snr::Noiseless => None,
        }
    }

    /// Stable identity used for seeding.
    fn key(self) -> u64 {
        match self {
            Snr::Db(v) => v.to_bits(),
            Snr::Noiseless => u64::MAX,
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Db(v) => write!(f, "{v}"),
            Snr::Noiseless => f.write_str("noiseless"),
        }
    }
}

impl FromStr for Snr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "noiseless" | "inf" | "infinity" => Ok(Snr::Noiseless),
            t => match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Snr::Db(v)),
                _ => Err(format!("`{s}` is neither a finite dB value nor `noiseless`")),
            },
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Db(v) => s.serialize_f64(*v),
            Snr::Noiseless => s.serialize_str("noiseless"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() => Ok(Snr::Db(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("non-finite SNR {v}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Quick,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "quick" => Ok(Preset::Quick),
            _ => Err(format!("unknown preset `{s}` (expected `paper` or `quick`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_tx: usize,
    pub num_rx: usize,
    /// In wavelengths.
    pub element_spacing: f64,
    pub region_deg: RegionDegrees,
    pub max_degree: usize,
    /// Ground-truth weights are uniform in `[-weight_max_abs, weight_max_abs]` rad.
    pub weight_max_abs: f64,
    /// Monte Carlo scatterer counts.
    pub scatterer_counts: Vec<usize>,
    /// Monte Carlo and metrics-table SNRs.
    pub snr_db: Vec<Snr>,
    /// Monte Carlo runs per cell.
    pub runs: usize,
    pub rank_policy: RankPolicy,
    /// Scatterers used for the metrics table and beam patterns.
    pub table_scatterers: usize,
    pub table_arrays: usize,
    pub table_directions: usize,
    pub pattern_snr_db: Snr,
    /// Beam-pattern target as `[azimuth, elevation]` degrees.
    pub pattern_target_deg: [f64; 2],
    pub scan_step_deg: f64,
    pub seed: u64,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_tx: 8,
            num_rx: 8,
            element_spacing: 0.5,
            region_deg: RegionDegrees {
                az_min: -60.0,
                az_max: 60.0,
                el_min: 5.0,
                el_max: 60.0,
            },
            max_degree: 20,
            weight_max_abs: 0.05,
            scatterer_counts: vec![25, 50, 100, 200, 400],
            snr_db: vec![Snr::Db(0.0), Snr::Db(4.0), Snr::Db(8.0), Snr::Db(12.0)],
            runs: 50,
            rank_policy: RankPolicy::MinimumNorm,
            table_scatterers: 150,
            table_arrays: 10,
            table_directions: 200,
            pattern_snr_db: Snr::Db(8.0),
            pattern_target_deg: [0.0, 30.0],
            scan_step_deg: 0.05,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = Self::default();
        if p == Preset::Quick {
            cfg.runs = 5;
            cfg.scatterer_counts = vec![50, 100, 200, 400];
            cfg.table_arrays = 3;
            cfg.table_directions = 50;
        }
        cfg
    }

    /// `overrides` (a JSON object) replaces the matching fields of `base`.
    pub fn merged(base: &Self, overrides: &str) -> Result<Self, HarnessError> {
        let over: serde_json::Value = serde_json::from_str(overrides)
            .map_err(|e| HarnessError::Config(format!("config file: {e}")))?;
        let serde_json::Value::Object(over) = over else {
            return Err(HarnessError::Config("config file must hold a JSON object".into()));
        };
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("config serialises to an object");
        for (k, v) in over {
            obj.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(value)
            .map_err(|e| HarnessError::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &Self, path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::merged(base, &text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if let Err(e) = ArrayConfig::with_spacing(self.num_tx, self.num_rx, self.element_spacing) {
            return bad(e.to_string());
        }
        if let Err(e) = self.region() {
            return bad(e.to_string());
        }
        if !(self.weight_max_abs.is_finite() && self.weight_max_abs >= 0.0) {
            return bad(format!("weight_max_abs must be finite and >= 0, got {}", self.weight_max_abs));
        }
        if self.scatterer_counts.is_empty() || self.scatterer_counts.contains(&0) {
            return bad("scatterer_counts must be non-empty and positive".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr_db must not be empty".into());
        }
        for (i, a) in self.snr_db.iter().enumerate() {
            if self.snr_db[..i].contains(a) {
                return bad(format!("duplicate SNR {a}"));
            }
        }
        for (i, a) in self.scatterer_counts.iter().enumerate() {
            if self.scatterer_counts[..i].contains(a) {
                return bad(format!("duplicate scatterer count {a}"));
            }
        }
        if self.runs == 0 || self.table_arrays == 0 || self.table_directions == 0 {
            return bad("runs, table_arrays and table_directions must be positive".into());
        }
        if self.table_scatterers == 0 {
            return bad("table_scatterers must be positive".into());
        }
        if !(self.scan_step_deg.is_finite() && self.scan_step_deg > 0.0) {
            return bad(format!("scan_step_deg must be positive, got {}", self.scan_step_deg));
        }
        let [az, el] = self.pattern_target_deg;
        if !(az.is_finite() && el.is_finite()) {
            return bad("pattern_target_deg must be finite".into());
        }
        Ok(())
    }

    pub fn array(&self) -> Result<ArrayConfig, HarnessError> {
        Ok(ArrayConfig::with_spacing(
            self.num_tx,
            self.num_rx,
            self.element_spacing,
        )?)
    }

    pub fn region(&self) -> Result<AngularRegion, HarnessError> {
        let r = &self.region_deg;
        Ok(AngularRegion::from_degrees(
            r.az_min, r.az_max, r.el_min, r.el_max,
        )?)
    }

    pub fn pattern_target(&self) -> Result<Direction, HarnessError> {
        let [az, el] = self.pattern_target_deg;
        Ok(Direction::from_degrees(az, el)?)
    }

    /// SHA-256 of the canonical JSON form, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Text of the first row of every CSV this config produces.
    pub fn provenance(&self) -> String {
        format!("{TOOL_NAME} {VERSION} config_hash={}", self.hash())
    }

    pub fn build_basis(&self) -> Result<Arc<SlepianBasis>, HarnessError> {
        Ok(Arc::new(build_slepian_basis(self.max_degree, &self.region()?)?))
    }

    fn check_basis(&self, basis: &SlepianBasis) -> Result<(), HarnessError> {
        let r = self.region()?;
        if basis.max_degree() != self.max_degree || *basis.region() != r {
            return Err(HarnessError::Config(format!(
                "basis (P={}) does not match the configured band limit {} and region",
                basis.max_degree(),
                self.max_degree
            )));
        }
        Ok(())
    }
}

/// `master` mixed with a digest of `tag` and `indices`.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let d = h.finalize();
    master ^ u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn rng(master: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}

/// RMSE over all weights of all calibrated elements.
pub fn weight_rmse(gt: &MimoGroundTruth, cal: &CalibrationResult) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for kind in [ArrayKind::Transmit, ArrayKind::Receive] {
        for (s, e) in gt.surfaces(kind).iter().zip(cal.elements(kind)) {
            for (a, b) in s.weights.iter().zip(&e.weights) {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    (sum / n as f64).sqrt()
}

fn observe<R: Rng>(
    gt: &MimoGroundTruth,
    dirs: &[Direction],
    snr: Snr,
    rng: &mut R,
) -> Result<ObservationSet, CalibError> {
    let ms: Vec<_> = dirs
        .iter()
        .map(|d| simulate_measurement(gt, d, snr.db(), rng))
        .collect();
    ObservationSet::from_measurements(*gt.config(), &ms)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub scatterers: usize,
    pub snr: Snr,
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub completed: usize,
    pub excluded: usize,
    /// Completed runs in which some element was fitted below full rank.
    pub rank_deficient: usize,
    pub first_error: Option<String>,
}

/// Mean pooled weight RMSE per (scatterer count, SNR).
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloTable {
    pub scatterer_counts: Vec<usize>,
    pub snrs: Vec<Snr>,
    /// Row-major: scatterer count, then SNR.
    pub cells: Vec<CellSummary>,
}

impl MonteCarloTable {
    pub fn cell(&self, scatterers: usize, snr: Snr) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scatterers == scatterers && c.snr == snr)
    }

    /// Wide table: one row per scatterer count, one RMSE column per SNR.
    pub fn write_csv<W: Write>(&self, out: W, provenance: &str) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "# {provenance}")?;
        write!(out, "scatterers")?;
        for s in &self.snrs {
            write!(out, ",rmse_snr_{s}")?;
        }
        writeln!(out)?;
        for (i, n) in self.scatterer_counts.iter().enumerate() {
            write!(out, "{n}")?;
            for j in 0..self.snrs.len() {
                write!(out, ",{}", fmt_opt(self.cells[i * self.snrs.len() + j].mean_rmse))?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    /// Long table with spread and exclusion counts.
    pub fn write_cells_csv<W: Write>(&self, out: W, provenance: &str) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "# {provenance}")?;
        writeln!(out, "{}", CELLS_HEADER.join(","))?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.scatterers,
                c.snr,
                fmt_opt(c.mean_rmse),
                fmt_opt(c.std_rmse),
                c.completed,
                c.excluded,
                c.rank_deficient
            )?;
        }
        out.flush()
    }
}

/// Weight-recovery sweep. Each run draws fresh ground truth, observes the
/// Fibonacci scatterer layout and calibrates; failed runs are excluded and
/// counted.
pub fn run_montecarlo(
    cfg: &ExperimentConfig,
    basis: &Arc<SlepianBasis>,
) -> Result<MonteCarloTable, HarnessError> {
    cfg.validate()?;
    cfg.check_basis(basis)?;
    let array = cfg.array()?;
    let k = basis.len();
    let layouts: Vec<Vec<Direction>> = cfg
        .scatterer_counts
        .iter()
        .map(|&n| fibonacci_nodes(basis.region(), n))
        .collect();
    let calibrators: Vec<Result<Calibrator, String>> = layouts
        .iter()
        .map(|dirs| {
            Calibrator::new(basis, array, dirs, cfg.rank_policy).map_err(|e| e.to_string())
        })
        .collect();

    let n_snr = cfg.snr_db.len();
    let tasks: Vec<(usize, usize, usize)> = (0..layouts.len())
        .flat_map(|c| (0..n_snr).flat_map(move |s| (0..cfg.runs).map(move |r| (c, s, r))))
        .collect();
    let outcomes: Vec<Result<(f64, bool), String>> = tasks
        .par_iter()
        .map(|&(c, s, r)| {
            let calibrator = calibrators[c].as_ref().map_err(Clone::clone)?;
            let snr = cfg.snr_db[s];
            let cell = [cfg.scatterer_counts[c] as u64, snr.key(), r as u64];
            let mut rng = rng(cfg.seed, "montecarlo", &cell);
            let gt = MimoGroundTruth::random(array, basis.clone(), cfg.weight_max_abs, &mut rng)
                .map_err(|e| e.to_string())?;
            let obs = observe(&gt, &layouts[c], snr, &mut rng).map_err(|e| e.to_string())?;
            let cal = calibrator.calibrate(&obs).map_err(|e| e.to_string())?;
            let deficient = cal.tx.iter().chain(&cal.rx).any(|e| e.rank < k);
            Ok((weight_rmse(&gt, &cal), deficient))
        })
        .collect();

    let mut cells = Vec::with_capacity(layouts.len() * n_snr);
    for (chunk, &(c, s, _)) in outcomes
        .chunks(cfg.runs)
        .zip(tasks.iter().step_by(cfg.runs))
    {
        let ok: Vec<(f64, bool)> = chunk.iter().filter_map(|r| r.clone().ok()).collect();
        let n = ok.len() as f64;
        let mean = (!ok.is_empty()).then(|| ok.iter().map(|r| r.0).sum::<f64>() / n);
        let std = mean.filter(|_| ok.len() > 1).map(|m| {
            (ok.iter().map(|r| (r.0 - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        cells.push(CellSummary {
            scatterers: cfg.scatterer_counts[c],
            snr: cfg.snr_db[s],
            mean_rmse: mean,
            std_rmse: std,
            completed: ok.len(),
            excluded: chunk.len() - ok.len(),
            rank_deficient: ok.iter().filter(|r| r.1).count(),
            first_error: chunk.iter().find_map(|r| r.clone().err()),
        });
    }
    if cells.iter().all(|c| c.completed == 0) {
        return Err(HarnessError::AllRunsFailed(
            cells[0].first_error.clone().unwrap_or_default(),
        ));
    }
    Ok(MonteCarloTable {
        scatterer_counts: cfg.scatterer_counts.clone(),
        snrs: cfg.snr_db.clone(),
        cells,
    })
}

/// Fixed ground truth and scatterer layout shared by the pattern and table
/// experiments.
fn table_layout(cfg: &ExperimentConfig, basis: &SlepianBasis) -> Vec<Direction> {
    fibonacci_nodes(basis.region(), cfg.table_scatterers)
}

/// Ideal, uncalibrated and calibrated patterns toward `target` for one
/// ground truth calibrated at the configured pattern SNR.
pub fn run_beampattern(
    cfg: &ExperimentConfig,
    basis: &Arc<SlepianBasis>,
    target: &Direction,
) -> Result<[BeamPattern; 3], HarnessError> {
    cfg.validate()?;
    cfg.check_basis(basis)?;
    let array = cfg.array()?;
    let gt = MimoGroundTruth::random(
        array,
        basis.clone(),
        cfg.weight_max_abs,
        &mut rng(cfg.seed, "beampattern/truth", &[]),
    )?;
    let dirs = table_layout(cfg, basis);
    let snr = cfg.pattern_snr_db;
    let obs = observe(&gt, &dirs, snr, &mut rng(cfg.seed, "beampattern/noise", &[snr.key()]))?;
    let cal = calibrate_full_array_with(&obs, basis, cfg.rank_policy)?;
    patterns_for(&gt, &cal, target, cfg.scan_step_deg)
}

fn patterns_for(
    gt: &MimoGroundTruth,
    cal: &CalibrationResult,
    target: &Direction,
    step_deg: f64,
) -> Result<[BeamPattern; 3], HarnessError> {
    let scan = scan_grid(gt.basis().region(), target, step_deg)?;
    Ok([
        ideal_pattern(gt, target, &scan)?,
        beam_pattern(gt, None, target, &scan)?,
        beam_pattern(gt, Some(cal), target, &scan)?,
    ])
}

/// One row of the beamformer quality table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub snr: Snr,
    pub peak_snr_increase_db: Option<f64>,
    pub peak_snr_recovery: Option<f64>,
    pub null_depth_uncal_db: Option<f64>,
    pub null_depth_cal_db: Option<f64>,
    pub delta_theta_uncal_deg: Option<f64>,
    pub delta_theta_cal_deg: Option<f64>,
    pub samples: usize,
    pub excluded: usize,
    pub first_error: Option<String>,
}

impl MetricsRow {
    fn from_samples(snr: Snr, results: &[Result<MetricsPair, String>]) -> Self {
        let ok: Vec<&MetricsPair> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mean = |f: &dyn Fn(&MetricsPair) -> f64| {
            (!ok.is_empty()).then(|| ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64)
        };
        Self {
            snr,
            peak_snr_increase_db: mean(&|m| m.calibrated.peak_snr_increase_db),
            peak_snr_recovery: mean(&|m| m.calibrated.peak_snr_recovery_fraction),
            null_depth_uncal_db: mean(&|m| m.uncalibrated.mean_null_depth_db),
            null_depth_cal_db: mean(&|m| m.calibrated.mean_null_depth_db),
            delta_theta_uncal_deg: mean(&|m| m.uncalibrated.direction_error_deg),
            delta_theta_cal_deg: mean(&|m| m.calibrated.direction_error_deg),
            samples: ok.len(),
            excluded: results.len() - ok.len(),
            first_error: results.iter().find_map(|r| r.clone().err()),
        }
    }
}

pub fn write_metrics_csv<W: Write>(
    out: W,
    rows: &[MetricsRow],
    provenance: &str,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "# {provenance}")?;
    writeln!(out, "{}", METRICS_HEADER.join(","))?;
    for r in rows {
        let pct = r
            .peak_snr_increase_db
            .map(|db| 100.0 * (10f64.powf(db / 10.0) - 1.0));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.snr,
            fmt_opt(r.peak_snr_increase_db),
            fmt_opt(pct),
            fmt_opt(r.peak_snr_recovery.map(|f| 100.0 * f)),
            fmt_opt(r.null_depth_uncal_db),
            fmt_opt(r.null_depth_cal_db),
            fmt_opt(r.delta_theta_uncal_deg),
            fmt_opt(r.delta_theta_cal_deg),
            r.samples,
            r.excluded
        )?;
    }
    out.flush()
}

/// Area-uniform random directions inside `region`.
pub fn sample_directions<R: Rng>(region: &AngularRegion, count: usize, rng: &mut R) -> Vec<Direction> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            region.map_unit_square(u, v)
        })
        .collect()
}

/// Beamformer quality per SNR, averaged over random arrays and random
/// target directions. Each array keeps its ground truth and targets across
/// SNRs; only the observation noise changes.
pub fn run_metrics_table(
    cfg: &ExperimentConfig,
    basis: &Arc<SlepianBasis>,
) -> Result<Vec<MetricsRow>, HarnessError> {
    cfg.validate()?;
    cfg.check_basis(basis)?;
    let array = cfg.array()?;
    let dirs = table_layout(cfg, basis);
    let calibrator = Calibrator::new(basis, array, &dirs, cfg.rank_policy)?;
    let region = *basis.region();

    // [array][snr][target]
    let per_array: Vec<Vec<Vec<Result<MetricsPair, String>>>> = (0..cfg.table_arrays)
        .into_par_iter()
        .map(|a| {
            let a = a as u64;
            let gt = match MimoGroundTruth::random(
                array,
                basis.clone(),
                cfg.weight_max_abs,
                &mut rng(cfg.seed, "metrics/truth", &[a]),
            ) {
                Ok(gt) => gt,
                Err(e) => {
                    let row = vec![Err(e.to_string()); cfg.table_directions];
                    return vec![row; cfg.snr_db.len()];
                }
            };
            let targets = sample_directions(
                &region,
                cfg.table_directions,
                &mut rng(cfg.seed, "metrics/targets", &[a]),
            );
            let cals: Vec<Result<CalibrationResult, String>> = cfg
                .snr_db
                .iter()
                .map(|snr| {
                    let mut noise = rng(cfg.seed, "metrics/noise", &[snr.key(), a]);
                    observe(&gt, &dirs, *snr, &mut noise)
                        .and_then(|obs| calibrator.calibrate(&obs))
                        .map_err(|e| e.to_string())
                })
                .collect();
            let per_target: Vec<Vec<Result<MetricsPair, String>>> = targets
                .par_iter()
                .map(|t| {
                    let base = scan_grid(&region, t, cfg.scan_step_deg).and_then(|scan| {
                        Ok((
                            ideal_pattern(&gt, t, &scan)?,
                            beam_pattern(&gt, None, t, &scan)?,
                            scan,
                        ))
                    });
                    cals.iter()
                        .map(|cal| {
                            let cal = cal.as_ref().map_err(Clone::clone)?;
                            let (ideal, uncal, scan) = base.as_ref().map_err(|e| e.to_string())?;
                            let c = beam_pattern(&gt, Some(cal), t, scan)
                                .map_err(|e| e.to_string())?;
                            pattern_metrics(ideal, uncal, &c, t).map_err(|e| e.to_string())
                        })
                        .collect()
                })
                .collect();
            (0..cfg.snr_db.len())
                .map(|s| per_target.iter().map(|row| row[s].clone()).collect())
                .collect()
        })
        .collect();

    let rows: Vec<MetricsRow> = cfg
        .snr_db
        .iter()
        .enumerate()
        .map(|(s, snr)| {
            let all: Vec<Result<MetricsPair, String>> = per_array
                .iter()
                .flat_map(|arr| arr[s].iter().cloned())
                .collect();
            MetricsRow::from_samples(*snr, &all)
        })
        .collect();
    if rows.iter().all(|r| r.samples == 0) {
        return Err(HarnessError::AllRunsFailed(
            rows[0].first_error.clone().unwrap_or_default(),
        ));
    }
    Ok(rows)
}

/// One ground truth and its observations of `scatterers` Fibonacci nodes.
pub fn simulate_observations(
    cfg: &ExperimentConfig,
    basis: &Arc<SlepianBasis>,
    scatterers: usize,
    snr: Snr,
) -> Result<(MimoGroundTruth, ObservationSet), HarnessError> {
    cfg.validate()?;
    cfg.check_basis(basis)?;
    if scatterers == 0 {
        return Err(HarnessError::Config("scatterer count must be positive".into()));
    }
    let gt = MimoGroundTruth::random(
        cfg.array()?,
        basis.clone(),
        cfg.weight_max_abs,
        &mut rng(cfg.seed, "simulate/truth", &[]),
    )?;
    let dirs = fibonacci_nodes(basis.region(), scatterers);
    let obs = observe(
        &gt,
        &dirs,
        snr,
        &mut rng(cfg.seed, "simulate/noise", &[scatterers as u64, snr.key()]),
    )?;
    Ok((gt, obs))
}

/// Reads an observation CSV and a basis file, calibrates every element and
/// writes the calibration JSON to `out`.
pub fn calibrate_from_file(
    observations: &Path,
    basis: &Path,
    out: &Path,
    element_spacing: f64,
    policy: RankPolicy,
) -> Result<CalibrationResult, HarnessError> {
    let basis = SlepianBasis::load(basis)?;
    let file = std::fs::File::open(observations)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", observations.display())))?;
    let obs = ObservationSet::read_csv(std::io::BufReader::new(file), element_spacing)?;
    let cal = calibrate_full_array_with(&obs, &basis, policy)?;
    cal.save(out)?;
    Ok(cal)
}

/// Creates `dir` and returns the path of `name` inside it.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
