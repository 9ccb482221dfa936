//! MIMO measurement model for co-located orthogonal uniform linear arrays.
//!
//! Every element carries a unit-magnitude gain whose phase, relative to
//! element 0 of the same array, is a Slepian expansion (a residual surface).
//! A measurement is the Kronecker product of the perturbed transmit and
//! receive steering vectors plus circular white Gaussian noise.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slepian::SlepianBasis;
use crate::sphere::Direction;

pub const GROUND_TRUTH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("arrays need at least two elements (got {num_tx} tx, {num_rx} rx)")]
    TooFewElements { num_tx: usize, num_rx: usize },
    #[error("element spacing must be positive and finite (got {0})")]
    BadSpacing(f64),
    #[error("{kind} element {element} is out of range for an array of {size}")]
    ElementOutOfRange {
        kind: ArrayKind,
        element: usize,
        size: usize,
    },
    #[error("{kind} element {element}: expected {expected} weights, got {got}")]
    WeightLength {
        kind: ArrayKind,
        element: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} {kind} surfaces, got {got}")]
    SurfaceCount {
        kind: ArrayKind,
        expected: usize,
        got: usize,
    },
    #[error("ground truth was built on basis {expected}, got {got}")]
    BasisMismatch { expected: String, got: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArrayKind {
    Transmit,
    Receive,
}

impl fmt::Display for ArrayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrayKind::Transmit => f.write_str("tx"),
            ArrayKind::Receive => f.write_str("rx"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub num_tx: usize,
    pub num_rx: usize,
    /// Inter-element spacing in wavelengths.
    pub element_spacing: f64,
}

impl ArrayConfig {
    /// Half-wavelength arrays.
    pub fn new(num_tx: usize, num_rx: usize) -> Result<Self, ArrayError> {
        Self::with_spacing(num_tx, num_rx, 0.5)
    }

    pub fn with_spacing(
        num_tx: usize,
        num_rx: usize,
        element_spacing: f64,
    ) -> Result<Self, ArrayError> {
        if num_tx < 2 || num_rx < 2 {
            return Err(ArrayError::TooFewElements { num_tx, num_rx });
        }
        if !(element_spacing.is_finite() && element_spacing > 0.0) {
            return Err(ArrayError::BadSpacing(element_spacing));
        }
        Ok(Self {
            num_tx,
            num_rx,
            element_spacing,
        })
    }

    pub fn size(&self, kind: ArrayKind) -> usize {
        match kind {
            ArrayKind::Transmit => self.num_tx,
            ArrayKind::Receive => self.num_rx,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.num_tx * self.num_rx
    }

    /// Flat channel index of transmit element `tx` and receive element `rx`.
    pub fn channel_index(&self, tx: usize, rx: usize) -> usize {
        tx * self.num_rx + rx
    }

    pub fn validate(&self) -> Result<(), ArrayError> {
        Self::with_spacing(self.num_tx, self.num_rx, self.element_spacing).map(|_| ())
    }
}

fn ula_steering(n: usize, spacing: f64, direction_cosine: f64) -> Vec<Complex64> {
    (0..n)
        .map(|m| Complex64::from_polar(1.0, -PI * (2.0 * spacing) * m as f64 * direction_cosine))
        .collect()
}

/// Ideal transmit steering vector; the transmit axis sees `sin(az) cos(el)`.
pub fn tx_steering(config: &ArrayConfig, dir: &Direction) -> Vec<Complex64> {
    ula_steering(
        config.num_tx,
        config.element_spacing,
        dir.azimuth.sin() * dir.elevation.cos(),
    )
}

/// Ideal receive steering vector; the receive axis sees `cos(az) cos(el)`.
pub fn rx_steering(config: &ArrayConfig, dir: &Direction) -> Vec<Complex64> {
    ula_steering(
        config.num_rx,
        config.element_spacing,
        dir.azimuth.cos() * dir.elevation.cos(),
    )
}

pub fn steering(config: &ArrayConfig, kind: ArrayKind, dir: &Direction) -> Vec<Complex64> {
    match kind {
        ArrayKind::Transmit => tx_steering(config, dir),
        ArrayKind::Receive => rx_steering(config, dir),
    }
}

/// `a ⊗ b` with `b` varying fastest.
pub fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x * y);
        }
    }
    out
}

/// Slepian weights of one non-reference element's residual phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSurface {
    pub kind: ArrayKind,
    /// Always `>= 1`; element 0 is the reference.
    pub element_index: usize,
    /// Radians per unit Slepian function.
    pub weights: Vec<f64>,
}

/// Direction-dependent phase shared by every element of one array.
pub type PhaseFn = Arc<dyn Fn(&Direction) -> f64 + Send + Sync>;

/// Phase terms that affect all channels of an array equally, standing in for
/// propagation effects that the relative calibration must cancel.
#[derive(Clone)]
pub struct CommonChannel {
    pub tx: PhaseFn,
    pub rx: PhaseFn,
}

impl CommonChannel {
    pub fn new(
        tx: impl Fn(&Direction) -> f64 + Send + Sync + 'static,
        rx: impl Fn(&Direction) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            tx: Arc::new(tx),
            rx: Arc::new(rx),
        }
    }

    fn phase(&self, kind: ArrayKind, dir: &Direction) -> f64 {
        match kind {
            ArrayKind::Transmit => (self.tx)(dir),
            ArrayKind::Receive => (self.rx)(dir),
        }
    }
}

impl fmt::Debug for CommonChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CommonChannel { .. }")
    }
}

/// True element gains of a simulated array.
#[derive(Debug, Clone)]
pub struct MimoGroundTruth {
    config: ArrayConfig,
    basis: Arc<SlepianBasis>,
    tx_surfaces: Vec<ResidualSurface>,
    rx_surfaces: Vec<ResidualSurface>,
    common_channel: Option<CommonChannel>,
}

impl MimoGroundTruth {
    /// `tx_weights[i]` belongs to transmit element `i + 1`, likewise for rx.
    pub fn new(
        config: ArrayConfig,
        basis: Arc<SlepianBasis>,
        tx_weights: Vec<Vec<f64>>,
        rx_weights: Vec<Vec<f64>>,
    ) -> Result<Self, ArrayError> {
        config.validate()?;
        let tx_surfaces = surfaces(ArrayKind::Transmit, config.num_tx, basis.len(), tx_weights)?;
        let rx_surfaces = surfaces(ArrayKind::Receive, config.num_rx, basis.len(), rx_weights)?;
        Ok(Self {
            config,
            basis,
            tx_surfaces,
            rx_surfaces,
            common_channel: None,
        })
    }

    /// An unperturbed array.
    pub fn zero(config: ArrayConfig, basis: Arc<SlepianBasis>) -> Result<Self, ArrayError> {
        let k = basis.len();
        Self::new(
            config,
            basis,
            vec![vec![0.0; k]; config.num_tx - 1],
            vec![vec![0.0; k]; config.num_rx - 1],
        )
    }

    /// Weights drawn independently and uniformly from `[-max_abs, max_abs]`,
    /// transmit elements first.
    pub fn random<R: Rng + ?Sized>(
        config: ArrayConfig,
        basis: Arc<SlepianBasis>,
        max_abs: f64,
        rng: &mut R,
    ) -> Result<Self, ArrayError> {
        let k = basis.len();
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(-max_abs..=max_abs)).collect())
                .collect()
        };
        let tx = draw(config.num_tx - 1);
        let rx = draw(config.num_rx - 1);
        Self::new(config, basis, tx, rx)
    }

    pub fn with_common_channel(mut self, channel: CommonChannel) -> Self {
        self.common_channel = Some(channel);
        self
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.config
    }

    pub fn basis(&self) -> &Arc<SlepianBasis> {
        &self.basis
    }

    pub fn common_channel(&self) -> Option<&CommonChannel> {
        self.common_channel.as_ref()
    }

    pub fn surfaces(&self, kind: ArrayKind) -> &[ResidualSurface] {
        match kind {
            ArrayKind::Transmit => &self.tx_surfaces,
            ArrayKind::Receive => &self.rx_surfaces,
        }
    }

    /// Weights of `element` (zero vector for the reference).
    pub fn weights(&self, kind: ArrayKind, element: usize) -> Result<Vec<f64>, ArrayError> {
        self.check_element(kind, element)?;
        Ok(if element == 0 {
            vec![0.0; self.basis.len()]
        } else {
            self.surfaces(kind)[element - 1].weights.clone()
        })
    }

    fn check_element(&self, kind: ArrayKind, element: usize) -> Result<(), ArrayError> {
        let size = self.config.size(kind);
        if element >= size {
            return Err(ArrayError::ElementOutOfRange {
                kind,
                element,
                size,
            });
        }
        Ok(())
    }

    fn common_phase(&self, kind: ArrayKind, dir: &Direction) -> f64 {
        self.common_channel
            .as_ref()
            .map_or(0.0, |c| c.phase(kind, dir))
    }

    /// Residual phase of every element of `kind` at `dir`, reference first.
    pub fn residual_phases(&self, kind: ArrayKind, dir: &Direction) -> Vec<f64> {
        let rho = self.basis.eval(dir);
        std::iter::once(0.0)
            .chain(
                self.surfaces(kind)
                    .iter()
                    .map(|s| s.weights.iter().zip(&rho).map(|(w, r)| w * r).sum()),
            )
            .collect()
    }

    /// Complex gain of every element of `kind` at `dir`.
    pub fn gains(&self, kind: ArrayKind, dir: &Direction) -> Vec<Complex64> {
        let common = self.common_phase(kind, dir);
        self.residual_phases(kind, dir)
            .into_iter()
            .map(|phi| unit_phasor(common + phi))
            .collect()
    }

    pub fn gain_at(
        &self,
        kind: ArrayKind,
        element: usize,
        dir: &Direction,
    ) -> Result<Complex64, ArrayError> {
        self.check_element(kind, element)?;
        let mut phase = self.common_phase(kind, dir);
        if element > 0 {
            phase += self
                .basis
                .synthesize(&self.surfaces(kind)[element - 1].weights, dir);
        }
        Ok(unit_phasor(phase))
    }

    /// Ideal steering vector with each entry multiplied by its element gain.
    pub fn perturbed_steering(&self, kind: ArrayKind, dir: &Direction) -> Vec<Complex64> {
        steering(&self.config, kind, dir)
            .iter()
            .zip(self.gains(kind, dir))
            .map(|(a, g)| a * g)
            .collect()
    }

    /// Noiseless `ã_t ⊗ ã_r`.
    pub fn snapshot(&self, dir: &Direction) -> Vec<Complex64> {
        kron(
            &self.perturbed_steering(ArrayKind::Transmit, dir),
            &self.perturbed_steering(ArrayKind::Receive, dir),
        )
    }

    pub fn to_file(&self, basis_file: Option<String>) -> GroundTruthFile {
        GroundTruthFile {
            version: GROUND_TRUTH_FORMAT_VERSION,
            config: self.config,
            basis_file,
            basis_fingerprint: self.basis.fingerprint().to_string(),
            tx_weights: self.tx_surfaces.iter().map(|s| s.weights.clone()).collect(),
            rx_weights: self.rx_surfaces.iter().map(|s| s.weights.clone()).collect(),
        }
    }

    /// Rebuilds a ground truth from its file and the basis it references.
    /// Common-channel terms are not persisted.
    pub fn from_file(file: GroundTruthFile, basis: Arc<SlepianBasis>) -> Result<Self, ArrayError> {
        if file.basis_fingerprint != basis.fingerprint() {
            return Err(ArrayError::BasisMismatch {
                expected: file.basis_fingerprint,
                got: basis.fingerprint().to_string(),
            });
        }
        Self::new(file.config, basis, file.tx_weights, file.rx_weights)
    }
}

fn surfaces(
    kind: ArrayKind,
    size: usize,
    basis_len: usize,
    weights: Vec<Vec<f64>>,
) -> Result<Vec<ResidualSurface>, ArrayError> {
    if weights.len() != size - 1 {
        return Err(ArrayError::SurfaceCount {
            kind,
            expected: size - 1,
            got: weights.len(),
        });
    }
    weights
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            if w.len() != basis_len {
                return Err(ArrayError::WeightLength {
                    kind,
                    element: i + 1,
                    expected: basis_len,
                    got: w.len(),
                });
            }
            Ok(ResidualSurface {
                kind,
                element_index: i + 1,
                weights: w,
            })
        })
        .collect()
}

pub(crate) fn unit_phasor(phase: f64) -> Complex64 {
    if phase == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        let (s, c) = phase.sin_cos();
        Complex64::new(c, s)
    }
}

/// On-disk form of a [`MimoGroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub version: u32,
    pub config: ArrayConfig,
    /// Path of the basis file the weights refer to, if it was saved.
    pub basis_file: Option<String>,
    pub basis_fingerprint: String,
    pub tx_weights: Vec<Vec<f64>>,
    pub rx_weights: Vec<Vec<f64>>,
}

/// Channel vector of one scatterer, `M_t · M_r` long in Kronecker order.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub channels: Vec<Complex64>,
    pub dir: Direction,
    /// `None` for a noiseless snapshot.
    pub snr_db: Option<f64>,
}

/// Per-channel noise variance for a given SNR against unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// `ỹ = ã_t ⊗ ã_r + η`, with `η` circular Gaussian of variance
/// `10^(-snr/10)` per channel. Noise is drawn channel by channel, real part
/// then imaginary part.
pub fn simulate_measurement<R: Rng + ?Sized>(
    gt: &MimoGroundTruth,
    dir: &Direction,
    snr_db: Option<f64>,
    rng: &mut R,
) -> Measurement {
    let mut channels = gt.snapshot(dir);
    if let Some(snr) = snr_db {
        let sigma = (noise_variance(snr) / 2.0).sqrt();
        for c in channels.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *c += Complex64::new(sigma * re, sigma * im);
        }
    }
    Measurement {
        channels,
        dir: *dir,
        snr_db,
    }
}
