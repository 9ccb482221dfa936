//! Residual-surface calibration.
//!
//! Measurements of known-direction scatterers are de-steered into complex
//! channel gains, each non-reference element is normalised against the
//! reference element of its own array, and the resulting phases are fitted
//! with the Slepian basis by linear least squares.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{
    rx_steering, tx_steering, ArrayConfig, ArrayError, ArrayKind, Measurement, MimoGroundTruth,
};
use crate::slepian::SlepianBasis;
use crate::sphere::{Direction, SphereError};

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

/// Largest design-matrix condition number accepted by [`RankPolicy::Reject`].
pub const MAX_CONDITION: f64 = 1e10;

/// Reference samples smaller than this cannot be normalised against.
pub const MIN_REFERENCE_MAGNITUDE: f64 = 1e-12;

pub const OBSERVATION_HEADER: [&str; 7] = [
    "scatterer",
    "azimuth_rad",
    "elevation_rad",
    "tx",
    "rx",
    "re",
    "im",
];

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("reference sample (scatterer {scatterer}, tx {tx}, rx {rx}) has magnitude {magnitude:e}")]
    DegenerateSample {
        scatterer: usize,
        tx: usize,
        rx: usize,
        magnitude: f64,
    },
    #[error("{got} observations cannot determine {needed} weights")]
    TooFewObservations { needed: usize, got: usize },
    #[error(
        "ill-posed scatterer geometry: design matrix has rank {rank} of {columns} \
         (condition number {condition:e}); add scatterers or lower the band limit"
    )]
    IllPosedGeometry {
        rank: usize,
        columns: usize,
        condition: f64,
    },
    #[error("observation directions differ from the ones the design was built for")]
    DesignMismatch,
    #[error("{kind} element {element}: {source}")]
    Element {
        kind: ArrayKind,
        element: usize,
        #[source]
        source: Box<CalibError>,
    },
    #[error("element index {element} is invalid for the {kind} array (reference is 0, size {size})")]
    BadElement {
        kind: ArrayKind,
        element: usize,
        size: usize,
    },
    #[error("incomplete channel grid; missing (scatterer, tx, rx): {}", format_triples(.missing))]
    IncompleteGrid { missing: Vec<(usize, usize, usize)> },
    #[error("duplicate sample (scatterer {0}, tx {1}, rx {2})")]
    DuplicateSample(usize, usize, usize),
    #[error("scatterer {0} has inconsistent directions across its samples")]
    InconsistentDirection(usize),
    #[error("observation set is empty")]
    Empty,
    #[error("measurement has {got} channels, array has {expected}")]
    ChannelCount { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("calibration was fitted on basis {expected}, got {got}")]
    BasisMismatch { expected: String, got: String },
    #[error("calibration file: {0}")]
    File(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CalibError {
    /// True for failures caused by the numbers rather than by inputs that are
    /// malformed.
    pub fn is_numerical(&self) -> bool {
        match self {
            CalibError::DegenerateSample { .. }
            | CalibError::TooFewObservations { .. }
            | CalibError::IllPosedGeometry { .. } => true,
            CalibError::Element { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn format_triples(t: &[(usize, usize, usize)]) -> String {
    let mut s = String::new();
    for (i, (n, l, m)) in t.iter().take(10).enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "({n}, {l}, {m})");
    }
    if t.len() > 10 {
        let _ = write!(s, " and {} more", t.len() - 10);
    }
    s
}

/// One de-steered channel gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSample {
    pub scatterer_index: usize,
    pub tx_index: usize,
    pub rx_index: usize,
    pub value: Complex64,
    pub dir: Direction,
}

/// Removes the ideal steering phase of every channel:
/// `g = conj(a_t ⊗ a_r) ⊙ ỹ`.
pub fn extract_gains(
    y: &Measurement,
    config: &ArrayConfig,
    scatterer_index: usize,
) -> Result<Vec<GainSample>, CalibError> {
    if y.channels.len() != config.num_channels() {
        return Err(CalibError::ChannelCount {
            expected: config.num_channels(),
            got: y.channels.len(),
        });
    }
    let at = tx_steering(config, &y.dir);
    let ar = rx_steering(config, &y.dir);
    let mut out = Vec::with_capacity(config.num_channels());
    for (l, t) in at.iter().enumerate() {
        for (m, r) in ar.iter().enumerate() {
            let value = (t * r).conj() * y.channels[config.channel_index(l, m)];
            out.push(GainSample {
                scatterer_index,
                tx_index: l,
                rx_index: m,
                value,
                dir: y.dir,
            });
        }
    }
    Ok(out)
}

/// Complete `N_s × M_t × M_r` grid of gain samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    config: ArrayConfig,
    dirs: Vec<Direction>,
    /// Indexed `[n][tx][rx]`, row-major.
    values: Vec<Complex64>,
}

impl ObservationSet {
    pub fn new(config: ArrayConfig) -> Self {
        Self {
            config,
            dirs: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends one scatterer; returns its index.
    pub fn push_measurement(&mut self, y: &Measurement) -> Result<usize, CalibError> {
        let n = self.dirs.len();
        let samples = extract_gains(y, &self.config, n)?;
        self.dirs.push(y.dir);
        self.values.extend(samples.iter().map(|s| s.value));
        Ok(n)
    }

    pub fn from_measurements<'a>(
        config: ArrayConfig,
        measurements: impl IntoIterator<Item = &'a Measurement>,
    ) -> Result<Self, CalibError> {
        let mut set = Self::new(config);
        for y in measurements {
            set.push_measurement(y)?;
        }
        Ok(set)
    }

    /// Assembles a set from loose samples, which may arrive in any order.
    pub fn from_samples(config: ArrayConfig, samples: &[GainSample]) -> Result<Self, CalibError> {
        if samples.is_empty() {
            return Err(CalibError::Empty);
        }
        let ns = samples.iter().map(|s| s.scatterer_index).max().unwrap() + 1;
        let (mt, mr) = (config.num_tx, config.num_rx);
        let mut values = vec![None; ns * mt * mr];
        let mut dirs: Vec<Option<Direction>> = vec![None; ns];
        for s in samples {
            if s.tx_index >= mt {
                return Err(ArrayError::ElementOutOfRange {
                    kind: ArrayKind::Transmit,
                    element: s.tx_index,
                    size: mt,
                }
                .into());
            }
            if s.rx_index >= mr {
                return Err(ArrayError::ElementOutOfRange {
                    kind: ArrayKind::Receive,
                    element: s.rx_index,
                    size: mr,
                }
                .into());
            }
            let i = (s.scatterer_index * mt + s.tx_index) * mr + s.rx_index;
            if values[i].is_some() {
                return Err(CalibError::DuplicateSample(
                    s.scatterer_index,
                    s.tx_index,
                    s.rx_index,
                ));
            }
            values[i] = Some(s.value);
            match dirs[s.scatterer_index] {
                None => dirs[s.scatterer_index] = Some(s.dir),
                Some(d) if d == s.dir => {}
                Some(_) => return Err(CalibError::InconsistentDirection(s.scatterer_index)),
            }
        }
        let missing: Vec<(usize, usize, usize)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| (i / (mt * mr), (i / mr) % mt, i % mr))
            .collect();
        if !missing.is_empty() {
            return Err(CalibError::IncompleteGrid { missing });
        }
        Ok(Self {
            config,
            dirs: dirs.into_iter().map(Option::unwrap).collect(),
            values: values.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.config
    }

    pub fn num_scatterers(&self) -> usize {
        self.dirs.len()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.dirs
    }

    pub fn sample(&self, scatterer: usize, tx: usize, rx: usize) -> Complex64 {
        let c = &self.config;
        self.values[(scatterer * c.num_tx + tx) * c.num_rx + rx]
    }

    pub fn samples(&self) -> impl Iterator<Item = GainSample> + '_ {
        let (mt, mr) = (self.config.num_tx, self.config.num_rx);
        self.values.iter().enumerate().map(move |(i, v)| {
            let n = i / (mt * mr);
            GainSample {
                scatterer_index: n,
                tx_index: (i / mr) % mt,
                rx_index: i % mr,
                value: *v,
                dir: self.dirs[n],
            }
        })
    }

    /// Writes the observation CSV. `comment`, if given, becomes a leading
    /// `#` line.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<(), CalibError> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(OBSERVATION_HEADER)?;
        for s in self.samples() {
            w.write_record(&[
                s.scatterer_index.to_string(),
                s.dir.azimuth.to_string(),
                s.dir.elevation.to_string(),
                s.tx_index.to_string(),
                s.rx_index.to_string(),
                s.value.re.to_string(),
                s.value.im.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an observation CSV. Array sizes are taken from the largest
    /// element indices present; lines starting with `#` are ignored.
    pub fn read_csv<R: Read>(input: R, element_spacing: f64) -> Result<Self, CalibError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = rdr.headers()?.clone();
        let header_line = rdr.position().line();
        let got: Vec<&str> = header.iter().collect();
        if got != OBSERVATION_HEADER {
            return Err(CalibError::Parse {
                line: header_line.max(1),
                message: format!(
                    "expected header `{}`, found `{}`",
                    OBSERVATION_HEADER.join(","),
                    got.join(",")
                ),
            });
        }
        let mut samples = Vec::new();
        let mut record = csv::StringRecord::new();
        loop {
            let more = rdr.read_record(&mut record).map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                CalibError::Parse {
                    line,
                    message: e.to_string(),
                }
            })?;
            if !more {
                break;
            }
            let line = record.position().map_or(0, |p| p.line());
            samples.push(parse_sample(&record, line)?);
        }
        if samples.is_empty() {
            return Err(CalibError::Empty);
        }
        let num_tx = samples.iter().map(|s| s.tx_index).max().unwrap() + 1;
        let num_rx = samples.iter().map(|s| s.rx_index).max().unwrap() + 1;
        let config = ArrayConfig::with_spacing(num_tx, num_rx, element_spacing)?;
        Self::from_samples(config, &samples)
    }
}

fn parse_sample(record: &csv::StringRecord, line: u64) -> Result<GainSample, CalibError> {
    if record.len() != OBSERVATION_HEADER.len() {
        return Err(CalibError::Parse {
            line,
            message: format!(
                "expected {} fields, found {}",
                OBSERVATION_HEADER.len(),
                record.len()
            ),
        });
    }
    let int = |i: usize| -> Result<usize, CalibError> {
        record[i].parse::<usize>().map_err(|e| CalibError::Parse {
            line,
            message: format!("column `{}`: {e} (`{}`)", OBSERVATION_HEADER[i], &record[i]),
        })
    };
    let float = |i: usize| -> Result<f64, CalibError> {
        let v = record[i].parse::<f64>().map_err(|e| CalibError::Parse {
            line,
            message: format!("column `{}`: {e} (`{}`)", OBSERVATION_HEADER[i], &record[i]),
        })?;
        if !v.is_finite() {
            return Err(CalibError::Parse {
                line,
                message: format!("column `{}`: non-finite value", OBSERVATION_HEADER[i]),
            });
        }
        Ok(v)
    };
    let dir = Direction::new(float(1)?, float(2)?).map_err(|e| CalibError::Parse {
        line,
        message: e.to_string(),
    })?;
    Ok(GainSample {
        scatterer_index: int(0)?,
        tx_index: int(3)?,
        rx_index: int(4)?,
        value: Complex64::new(float(5)?, float(6)?),
        dir,
    })
}

/// A residual-phase observation of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseObservation {
    pub dir: Direction,
    /// Principal value in `(-pi, pi]`.
    pub phase: f64,
}

/// Phase of `element` relative to element 0 of the same array, one value per
/// (scatterer, opposite-array element) pair, scatterer-major.
///
/// For a transmit element `ℓ` this is `arg(g[n][ℓ][m] · conj(g[n][0][m]))`
/// over every receive element `m`; receive elements are symmetric.
pub fn residual_phase_observations(
    obs: &ObservationSet,
    kind: ArrayKind,
    element: usize,
) -> Result<Vec<PhaseObservation>, CalibError> {
    let cfg = obs.config();
    let size = cfg.size(kind);
    if element == 0 || element >= size {
        return Err(CalibError::BadElement {
            kind,
            element,
            size,
        });
    }
    let other = match kind {
        ArrayKind::Transmit => cfg.num_rx,
        ArrayKind::Receive => cfg.num_tx,
    };
    let mut out = Vec::with_capacity(obs.num_scatterers() * other);
    for (n, dir) in obs.directions().iter().enumerate() {
        for m in 0..other {
            let (target, reference, (rt, rr)) = match kind {
                ArrayKind::Transmit => (obs.sample(n, element, m), obs.sample(n, 0, m), (0, m)),
                ArrayKind::Receive => (obs.sample(n, m, element), obs.sample(n, m, 0), (m, 0)),
            };
            let magnitude = reference.norm();
            if magnitude.is_nan() || magnitude < MIN_REFERENCE_MAGNITUDE {
                return Err(CalibError::DegenerateSample {
                    scatterer: n,
                    tx: rt,
                    rx: rr,
                    magnitude,
                });
            }
            out.push(PhaseObservation {
                dir: *dir,
                phase: (target * reference.conj()).arg(),
            });
        }
    }
    Ok(out)
}

/// How a rank-deficient design is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Fail with [`CalibError::IllPosedGeometry`].
    #[default]
    Reject,
    /// Return the minimum-norm solution, discarding singular values below
    /// `1 / MAX_CONDITION` of the largest.
    MinimumNorm,
}

/// Least-squares fit of one residual surface.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    /// 2-norm of the phase residual over all observations.
    pub residual_norm: f64,
    /// Numerical rank of the design matrix.
    pub rank: usize,
}

/// Factorised design matrix for a fixed list of observation directions.
///
/// Observations that share a direction share a design row, so they are
/// merged: the least-squares problem over the raw rows equals the one over
/// distinct directions with rows scaled by `sqrt(multiplicity)` and the mean
/// phase as right-hand side.
#[derive(Debug, Clone)]
pub struct PhaseDesign {
    dirs: Vec<Direction>,
    /// Distinct-direction slot of each observation.
    slot: Vec<usize>,
    counts: Vec<usize>,
    /// Basis values at each distinct direction.
    rho: Vec<Vec<f64>>,
    /// `V Σ⁺ Uᵀ` of the scaled distinct-row design.
    pinv: DMatrix<f64>,
    rank: usize,
    condition: f64,
}

impl PhaseDesign {
    pub fn new(
        dirs: &[Direction],
        basis: &SlepianBasis,
        policy: RankPolicy,
    ) -> Result<Self, CalibError> {
        let k = basis.len();
        if policy == RankPolicy::Reject && dirs.len() < k {
            return Err(CalibError::TooFewObservations {
                needed: k,
                got: dirs.len(),
            });
        }
        if dirs.is_empty() {
            return Err(CalibError::Empty);
        }
        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut distinct: Vec<Direction> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        let slot: Vec<usize> = dirs
            .iter()
            .map(|d| {
                let key = (d.azimuth.to_bits(), d.elevation.to_bits());
                *index.entry(key).or_insert_with(|| {
                    distinct.push(*d);
                    counts.push(0);
                    distinct.len() - 1
                })
            })
            .collect();
        for s in &slot {
            counts[*s] += 1;
        }

        let rho: Vec<Vec<f64>> = distinct.iter().map(|d| basis.eval(d)).collect();
        let g = distinct.len();
        let mut a = DMatrix::<f64>::zeros(g, k);
        for (i, (r, c)) in rho.iter().zip(&counts).enumerate() {
            let s = (*c as f64).sqrt();
            for (j, v) in r.iter().enumerate() {
                a[(i, j)] = s * v;
            }
        }

        let svd = a.svd(true, true);
        let sv = &svd.singular_values;
        let smax = sv.max();
        let cutoff = smax / MAX_CONDITION;
        let rank = sv.iter().filter(|s| **s > cutoff).count();
        // Fewer distinct rows than columns leaves implicit zero singular values.
        let smin = if g < k { 0.0 } else { sv.min() };
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if policy == RankPolicy::Reject && (rank < k || !(condition <= MAX_CONDITION)) {
            return Err(CalibError::IllPosedGeometry {
                rank,
                columns: k,
                condition,
            });
        }
        let u = svd.u.as_ref().expect("u requested");
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let mut pinv = DMatrix::<f64>::zeros(k, g);
        for (i, s) in sv.iter().enumerate() {
            if *s > cutoff {
                let vi = v_t.row(i).transpose() / *s;
                pinv += vi * u.column(i).transpose();
            }
        }
        Ok(Self {
            dirs: dirs.to_vec(),
            slot,
            counts,
            rho,
            pinv,
            rank,
            condition,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Number of distinct observation directions.
    pub fn distinct_directions(&self) -> usize {
        self.counts.len()
    }

    /// Fits phases observed at exactly the directions this design was built
    /// from, in the same order.
    pub fn solve(&self, observations: &[PhaseObservation]) -> Result<WeightFit, CalibError> {
        if observations.len() != self.dirs.len()
            || observations.iter().zip(&self.dirs).any(|(o, d)| o.dir != *d)
        {
            return Err(CalibError::DesignMismatch);
        }
        let mut sums = vec![0.0; self.counts.len()];
        for (o, s) in observations.iter().zip(&self.slot) {
            sums[*s] += o.phase;
        }
        let b = DVector::from_iterator(
            sums.len(),
            sums.iter()
                .zip(&self.counts)
                .map(|(sum, c)| sum / (*c as f64).sqrt()),
        );
        let w = &self.pinv * b;
        let weights: Vec<f64> = w.iter().copied().collect();
        let predicted: Vec<f64> = self
            .rho
            .iter()
            .map(|r| r.iter().zip(&weights).map(|(a, b)| a * b).sum())
            .collect();
        let residual_norm = observations
            .iter()
            .zip(&self.slot)
            .map(|(o, s)| (o.phase - predicted[*s]).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(WeightFit {
            weights,
            residual_norm,
            rank: self.rank,
        })
    }
}

/// Ordinary least-squares fit of `phase ≈ ρ(dir) · w`, rejecting
/// ill-conditioned geometry.
pub fn fit_weights(
    observations: &[PhaseObservation],
    basis: &SlepianBasis,
) -> Result<WeightFit, CalibError> {
    fit_weights_with(observations, basis, RankPolicy::Reject)
}

pub fn fit_weights_with(
    observations: &[PhaseObservation],
    basis: &SlepianBasis,
    policy: RankPolicy,
) -> Result<WeightFit, CalibError> {
    let dirs: Vec<Direction> = observations.iter().map(|o| o.dir).collect();
    PhaseDesign::new(&dirs, basis, policy)?.solve(observations)
}

/// Fitted surface of one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementCalibration {
    pub element: usize,
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    pub rank: usize,
}

/// Fitted residual surfaces of every non-reference element. Serialises
/// directly as the calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub version: u32,
    pub basis_fingerprint: String,
    pub max_degree: usize,
    pub cutoff_rank: usize,
    pub tx: Vec<ElementCalibration>,
    pub rx: Vec<ElementCalibration>,
}

impl CalibrationResult {
    pub fn elements(&self, kind: ArrayKind) -> &[ElementCalibration] {
        match kind {
            ArrayKind::Transmit => &self.tx,
            ArrayKind::Receive => &self.rx,
        }
    }

    /// Estimated residual phase of every element of `kind` given basis values
    /// `rho` at some direction; the reference element gets 0.
    pub fn residual_phases(&self, kind: ArrayKind, rho: &[f64]) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(
                self.elements(kind)
                    .iter()
                    .map(|e| e.weights.iter().zip(rho).map(|(w, r)| w * r).sum()),
            )
            .collect()
    }

    /// A calibration that reproduces the true surfaces exactly.
    pub fn from_ground_truth(gt: &MimoGroundTruth) -> Self {
        let exact = |kind: ArrayKind| {
            gt.surfaces(kind)
                .iter()
                .map(|s| ElementCalibration {
                    element: s.element_index,
                    weights: s.weights.clone(),
                    residual_norm: 0.0,
                    rank: s.weights.len(),
                })
                .collect()
        };
        let basis = gt.basis();
        Self {
            version: CALIBRATION_FORMAT_VERSION,
            basis_fingerprint: basis.fingerprint().to_string(),
            max_degree: basis.max_degree(),
            cutoff_rank: basis.cutoff_rank(),
            tx: exact(ArrayKind::Transmit),
            rx: exact(ArrayKind::Receive),
        }
    }

    pub fn check_basis(&self, basis: &SlepianBasis) -> Result<(), CalibError> {
        if self.basis_fingerprint != basis.fingerprint() {
            return Err(CalibError::BasisMismatch {
                expected: self.basis_fingerprint.clone(),
                got: basis.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.version != CALIBRATION_FORMAT_VERSION {
            return Err(CalibError::File(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }
}

/// Calibrates every element of both arrays for a fixed scatterer layout.
///
/// The design matrices depend only on the scatterer directions, so they are
/// factorised once and reused for any observation set with that layout.
#[derive(Debug, Clone)]
pub struct Calibrator<'a> {
    basis: &'a SlepianBasis,
    config: ArrayConfig,
    tx_design: PhaseDesign,
    rx_design: PhaseDesign,
}

impl<'a> Calibrator<'a> {
    pub fn new(
        basis: &'a SlepianBasis,
        config: ArrayConfig,
        scatterers: &[Direction],
        policy: RankPolicy,
    ) -> Result<Self, CalibError> {
        let expand = |reps: usize| -> Vec<Direction> {
            scatterers
                .iter()
                .flat_map(|d| std::iter::repeat_n(*d, reps))
                .collect()
        };
        let design = |kind: ArrayKind, reps: usize| {
            PhaseDesign::new(&expand(reps), basis, policy).map_err(|e| CalibError::Element {
                kind,
                element: 1,
                source: Box::new(e),
            })
        };
        Ok(Self {
            basis,
            config,
            tx_design: design(ArrayKind::Transmit, config.num_rx)?,
            rx_design: design(ArrayKind::Receive, config.num_tx)?,
        })
    }

    pub fn design(&self, kind: ArrayKind) -> &PhaseDesign {
        match kind {
            ArrayKind::Transmit => &self.tx_design,
            ArrayKind::Receive => &self.rx_design,
        }
    }

    pub fn calibrate(&self, obs: &ObservationSet) -> Result<CalibrationResult, CalibError> {
        if obs.config().num_tx != self.config.num_tx || obs.config().num_rx != self.config.num_rx
        {
            return Err(CalibError::DesignMismatch);
        }
        let fit_kind = |kind: ArrayKind| -> Result<Vec<ElementCalibration>, CalibError> {
            (1..self.config.size(kind))
                .map(|element| {
                    let annotate = |e: CalibError| CalibError::Element {
                        kind,
                        element,
                        source: Box::new(e),
                    };
                    let phases = residual_phase_observations(obs, kind, element).map_err(annotate)?;
                    let fit = self.design(kind).solve(&phases).map_err(annotate)?;
                    Ok(ElementCalibration {
                        element,
                        weights: fit.weights,
                        residual_norm: fit.residual_norm,
                        rank: fit.rank,
                    })
                })
                .collect()
        };
        Ok(CalibrationResult {
            version: CALIBRATION_FORMAT_VERSION,
            basis_fingerprint: self.basis.fingerprint().to_string(),
            max_degree: self.basis.max_degree(),
            cutoff_rank: self.basis.cutoff_rank(),
            tx: fit_kind(ArrayKind::Transmit)?,
            rx: fit_kind(ArrayKind::Receive)?,
        })
    }
}

/// Fits every non-reference element of both arrays.
pub fn calibrate_full_array(
    obs: &ObservationSet,
    basis: &SlepianBasis,
) -> Result<CalibrationResult, CalibError> {
    calibrate_full_array_with(obs, basis, RankPolicy::Reject)
}

pub fn calibrate_full_array_with(
    obs: &ObservationSet,
    basis: &SlepianBasis,
    policy: RankPolicy,
) -> Result<CalibrationResult, CalibError> {
    Calibrator::new(basis, *obs.config(), obs.directions(), policy)?.calibrate(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{simulate_measurement, MimoGroundTruth};
    use crate::slepian::build_slepian_basis;
    use crate::sphere::{fibonacci_nodes, AngularRegion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn small_basis() -> Arc<SlepianBasis> {
        let region = AngularRegion::from_degrees(-60.0, 60.0, 5.0, 60.0).unwrap();
        Arc::new(build_slepian_basis(10, &region).unwrap())
    }

    fn observe(gt: &MimoGroundTruth, n: usize, snr: Option<f64>, seed: u64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = fibonacci_nodes(gt.basis().region(), n);
        let ms: Vec<_> = dirs
            .iter()
            .map(|d| simulate_measurement(gt, d, snr, &mut rng))
            .collect();
        ObservationSet::from_measurements(*gt.config(), &ms).unwrap()
    }

    #[test]
    fn zero_truth_extracts_unity() {
        let b = small_basis();
        let cfg = ArrayConfig::new(8, 8).unwrap();
        let gt = MimoGroundTruth::zero(cfg, b).unwrap();
        let d = Direction::from_degrees(31.0, 12.0).unwrap();
        let y = simulate_measurement(&gt, &d, None, &mut ChaCha8Rng::seed_from_u64(0));
        let g = extract_gains(&y, &cfg, 0).unwrap();
        assert_eq!(g.len(), 64);
        for s in g {
            assert!((s.value - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn extracted_gain_is_gain_product() {
        let b = small_basis();
        let cfg = ArrayConfig::new(8, 8).unwrap();
        let gt = MimoGroundTruth::random(cfg, b, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = Direction::from_degrees(-41.0, 27.0).unwrap();
        let y = simulate_measurement(&gt, &d, None, &mut ChaCha8Rng::seed_from_u64(0));
        for s in extract_gains(&y, &cfg, 0).unwrap() {
            let expect = gt.gain_at(ArrayKind::Transmit, s.tx_index, &d).unwrap()
                * gt.gain_at(ArrayKind::Receive, s.rx_index, &d).unwrap();
            assert!((s.value - expect).norm() < 1e-15 * 8.0);
        }
    }

    #[test]
    fn zero_truth_gives_zero_phases_and_weights() {
        let b = small_basis();
        let cfg = ArrayConfig::new(4, 4).unwrap();
        let gt = MimoGroundTruth::zero(cfg, b.clone()).unwrap();
        let obs = observe(&gt, 30, None, 0);
        let ph = residual_phase_observations(&obs, ArrayKind::Transmit, 2).unwrap();
        assert_eq!(ph.len(), 30 * 4);
        assert!(ph.iter().all(|p| p.phase.abs() < 1e-14));
        let zeros: Vec<PhaseObservation> = ph
            .iter()
            .map(|p| PhaseObservation {
                dir: p.dir,
                phase: 0.0,
            })
            .collect();
        let fit = fit_weights(&zeros, &b).unwrap();
        assert!(fit.weights.iter().all(|w| *w == 0.0));
        assert_eq!(fit.residual_norm, 0.0);
    }

    #[test]
    fn bad_elements_rejected() {
        let b = small_basis();
        let cfg = ArrayConfig::new(3, 5).unwrap();
        let obs = observe(&MimoGroundTruth::zero(cfg, b).unwrap(), 5, None, 0);
        assert!(residual_phase_observations(&obs, ArrayKind::Transmit, 0).is_err());
        assert!(residual_phase_observations(&obs, ArrayKind::Transmit, 3).is_err());
        assert_eq!(
            residual_phase_observations(&obs, ArrayKind::Receive, 4)
                .unwrap()
                .len(),
            5 * 3
        );
    }

    #[test]
    fn degenerate_reference_sample() {
        let b = small_basis();
        let cfg = ArrayConfig::new(2, 2).unwrap();
        let mut obs = observe(&MimoGroundTruth::zero(cfg, b).unwrap(), 3, None, 0);
        obs.values[(1 * 2) * 2 + 1] = Complex64::new(0.0, 1e-13);
        let err = residual_phase_observations(&obs, ArrayKind::Transmit, 1).unwrap_err();
        assert!(matches!(
            err,
            CalibError::DegenerateSample {
                scatterer: 1,
                tx: 0,
                rx: 1,
                ..
            }
        ));
        assert!(err.is_numerical());
    }

    #[test]
    fn too_few_scatterers_is_ill_posed() {
        let b = small_basis();
        let cfg = ArrayConfig::new(8, 8).unwrap();
        let obs = observe(&MimoGroundTruth::zero(cfg, b.clone()).unwrap(), b.len() - 2, None, 0);
        let err = calibrate_full_array(&obs, &b).unwrap_err();
        match err {
            CalibError::Element { source, .. } => {
                assert!(matches!(*source, CalibError::IllPosedGeometry { .. }))
            }
            other => panic!("{other}"),
        }
        let loose = calibrate_full_array_with(&obs, &b, RankPolicy::MinimumNorm).unwrap();
        assert_eq!(loose.tx[0].rank, b.len() - 2);
    }

    #[test]
    fn minimal_array_shape() {
        let b = small_basis();
        let cfg = ArrayConfig::new(2, 2).unwrap();
        let gt = MimoGroundTruth::random(cfg, b.clone(), 0.05, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let obs = observe(&gt, 40, None, 0);
        let res = calibrate_full_array(&obs, &b).unwrap();
        assert_eq!(res.tx.len() + res.rx.len(), 2);
        assert!(res.tx.iter().chain(&res.rx).all(|e| e.weights.len() == b.len()));
    }

    #[test]
    fn design_rejects_other_directions() {
        let b = small_basis();
        let dirs = fibonacci_nodes(b.region(), 40);
        let design = PhaseDesign::new(&dirs, &b, RankPolicy::Reject).unwrap();
        assert_eq!(design.distinct_directions(), 40);
        let wrong: Vec<PhaseObservation> = fibonacci_nodes(b.region(), 41)
            .into_iter()
            .take(40)
            .map(|dir| PhaseObservation { dir, phase: 0.0 })
            .collect();
        assert!(matches!(design.solve(&wrong), Err(CalibError::DesignMismatch)));
    }

    #[test]
    fn incomplete_grid_lists_missing() {
        let b = small_basis();
        let cfg = ArrayConfig::new(2, 3).unwrap();
        let obs = observe(&MimoGroundTruth::zero(cfg, b).unwrap(), 2, None, 0);
        let mut samples: Vec<GainSample> = obs.samples().collect();
        samples.remove(7);
        match ObservationSet::from_samples(cfg, &samples) {
            Err(CalibError::IncompleteGrid { missing }) => assert_eq!(missing, vec![(1, 0, 1)]),
            other => panic!("{other:?}"),
        }
        let mut dup: Vec<GainSample> = obs.samples().collect();
        dup.push(dup[0]);
        assert!(matches!(
            ObservationSet::from_samples(cfg, &dup),
            Err(CalibError::DuplicateSample(0, 0, 0))
        ));
    }
}
