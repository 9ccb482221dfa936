//! Slepian functions concentrated in an azimuth/elevation region.
//!
//! The localization matrix `D[i][j] = ∫_R Y_i Y_j dΩ` is assembled from a
//! region quadrature rule and diagonalised. Its eigenvectors, sorted by
//! descending concentration, are the coefficient vectors of the Slepian
//! functions; only the first `round(shannon)` are retained.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sphere::{
    fill_sph_harm_row, harmonic_count, region_quadrature, AngularRegion, Direction,
    QuadratureRule, SphereError,
};

pub const BASIS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SlepianError {
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error("quadrature node {index} lies outside the region")]
    NodeOutsideRegion { index: usize },
    #[error("quadrature ({n_az} x {n_el} nodes) does not resolve degree-{} products", 2 * .max_degree)]
    UnderResolved {
        max_degree: usize,
        n_az: usize,
        n_el: usize,
    },
    #[error("localization matrix symmetry defect {0:e} exceeds 1e-10")]
    Asymmetric(f64),
    #[error("eigendecomposition produced non-finite values")]
    EigenFailure,
    #[error("region too small for band limit: Shannon number {0:.4} < 1")]
    RegionTooSmall(f64),
    #[error("cannot truncate basis of {available} functions to {requested}")]
    BadTruncation { available: usize, requested: usize },
    #[error("basis file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Shannon number `(P+1)^2 A / 4π`.
pub fn shannon_number(max_degree: usize, region: &AngularRegion) -> f64 {
    harmonic_count(max_degree) as f64 * region.area() / (4.0 * PI)
}

/// Quadrature resolution used by [`build_slepian_basis`]: `2(P+1)` nodes on
/// each axis, enough for degree-`2P` products in elevation with margin.
pub fn default_resolution(max_degree: usize) -> (usize, usize) {
    let n = 2 * (max_degree + 1);
    (n, n)
}

/// `D = Y W Yᵀ` over the nodes of `rule`.
pub fn build_localization_matrix(
    max_degree: usize,
    region: &AngularRegion,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>, SlepianError> {
    if let Some(index) = rule.nodes.iter().position(|d| !region.contains(d)) {
        return Err(SlepianError::NodeOutsideRegion { index });
    }
    let az_needed = if region.covers_full_azimuth() {
        2 * max_degree + 1
    } else {
        max_degree + 1
    };
    if rule.n_el < max_degree + 1 || rule.n_az < az_needed {
        return Err(SlepianError::UnderResolved {
            max_degree,
            n_az: rule.n_az,
            n_el: rule.n_el,
        });
    }

    let nh = harmonic_count(max_degree);
    let nb = rule.len();
    let mut y = DMatrix::<f64>::zeros(nh, nb);
    let mut yw = DMatrix::<f64>::zeros(nh, nb);
    let mut row = vec![0.0; nh];
    for (k, (node, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        fill_sph_harm_row(max_degree, node, &mut row);
        for (i, v) in row.iter().enumerate() {
            y[(i, k)] = *v;
            yw[(i, k)] = v * w;
        }
    }
    let d = &yw * y.transpose();

    let scale = d.diagonal().amax().max(1.0);
    let defect = (&d - d.transpose()).amax() / scale;
    if !defect.is_finite() || defect > 1e-10 {
        return Err(SlepianError::Asymmetric(defect));
    }
    Ok((&d + d.transpose()) * 0.5)
}

/// Region-concentrated Slepian basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SlepianBasis {
    max_degree: usize,
    region: AngularRegion,
    /// `(P+1)^2 × (cutoff_rank+1)`, columns sorted by concentration.
    eigvecs: DMatrix<f64>,
    /// Every eigenvalue of `D`, descending.
    eigvals: Vec<f64>,
    cutoff_rank: usize,
    shannon: f64,
    fingerprint: String,
}

impl SlepianBasis {
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn region(&self) -> &AngularRegion {
        &self.region
    }

    /// Retained eigenvectors, one per column.
    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    /// All eigenvalues of the localization matrix, descending. Only the first
    /// [`len`](Self::len) belong to retained functions.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Concentration of each retained function.
    pub fn concentrations(&self) -> &[f64] {
        &self.eigvals[..self.len()]
    }

    /// Highest retained rank, `α_max`.
    pub fn cutoff_rank(&self) -> usize {
        self.cutoff_rank
    }

    /// Number of retained functions, `cutoff_rank + 1`.
    pub fn len(&self) -> usize {
        self.cutoff_rank + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn shannon(&self) -> f64 {
        self.shannon
    }

    /// Content hash over degree, region, eigenvalues and eigenvectors.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Values of every retained Slepian function at `dir`.
    pub fn eval(&self, dir: &Direction) -> Vec<f64> {
        let mut row = vec![0.0; harmonic_count(self.max_degree)];
        fill_sph_harm_row(self.max_degree, dir, &mut row);
        self.eigvecs
            .column_iter()
            .map(|c| c.iter().zip(&row).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Σ_a weights[a] ρ_a(dir)`.
    pub fn synthesize(&self, weights: &[f64], dir: &Direction) -> f64 {
        assert_eq!(weights.len(), self.len(), "weight vector length");
        self.eval(dir).iter().zip(weights).map(|(r, w)| r * w).sum()
    }

    /// Copy of the basis keeping only the `count` most concentrated functions.
    pub fn truncated(&self, count: usize) -> Result<SlepianBasis, SlepianError> {
        if count == 0 || count > self.len() {
            return Err(SlepianError::BadTruncation {
                available: self.len(),
                requested: count,
            });
        }
        Ok(Self::assemble(
            self.max_degree,
            self.region,
            self.eigvecs.columns(0, count).into_owned(),
            self.eigvals.clone(),
            count - 1,
            self.shannon,
        ))
    }

    fn assemble(
        max_degree: usize,
        region: AngularRegion,
        eigvecs: DMatrix<f64>,
        eigvals: Vec<f64>,
        cutoff_rank: usize,
        shannon: f64,
    ) -> Self {
        let fingerprint = fingerprint(max_degree, &region, &eigvecs, &eigvals[..=cutoff_rank]);
        Self {
            max_degree,
            region,
            eigvecs,
            eigvals,
            cutoff_rank,
            shannon,
            fingerprint,
        }
    }

    pub fn to_file(&self) -> BasisFile {
        let (rows, cols) = self.eigvecs.shape();
        let mut flat = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                flat.push(self.eigvecs[(i, j)]);
            }
        }
        let [az_min, az_max, el_min, el_max] = self.region.to_degrees();
        BasisFile {
            version: BASIS_FORMAT_VERSION,
            max_degree: self.max_degree,
            region_deg: RegionDegrees {
                az_min,
                az_max,
                el_min,
                el_max,
            },
            region_rad: self.region,
            shannon: self.shannon,
            eigenvalues: self.eigvals.clone(),
            cutoff_rank: self.cutoff_rank,
            rows,
            cols,
            eigvecs: flat,
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn from_file(file: BasisFile) -> Result<Self, SlepianError> {
        if file.version != BASIS_FORMAT_VERSION {
            return Err(SlepianError::File(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let region = AngularRegion::new(
            file.region_rad.az_min,
            file.region_rad.az_max,
            file.region_rad.el_min,
            file.region_rad.el_max,
        )?;
        let nh = harmonic_count(file.max_degree);
        if file.rows != nh
            || file.cols != file.cutoff_rank + 1
            || file.eigvecs.len() != file.rows * file.cols
            || file.eigenvalues.len() != nh
        {
            return Err(SlepianError::File("inconsistent matrix dimensions".into()));
        }
        let eigvecs = DMatrix::from_row_slice(file.rows, file.cols, &file.eigvecs);
        let basis = Self::assemble(
            file.max_degree,
            region,
            eigvecs,
            file.eigenvalues,
            file.cutoff_rank,
            file.shannon,
        );
        if basis.fingerprint != file.fingerprint {
            return Err(SlepianError::File(format!(
                "fingerprint mismatch: file says {}, content hashes to {}",
                file.fingerprint, basis.fingerprint
            )));
        }
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<(), SlepianError> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SlepianError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

fn fingerprint(
    max_degree: usize,
    region: &AngularRegion,
    eigvecs: &DMatrix<f64>,
    kept: &[f64],
) -> String {
    let mut h = Sha256::new();
    h.update((max_degree as u64).to_le_bytes());
    for v in [region.az_min, region.az_max, region.el_min, region.el_max] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update((eigvecs.ncols() as u64).to_le_bytes());
    for v in kept.iter().chain(eigvecs.iter()) {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// On-disk form of a [`SlepianBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    pub version: u32,
    pub max_degree: usize,
    pub region_deg: RegionDegrees,
    /// Exact radian bounds; degrees are informational.
    pub region_rad: AngularRegion,
    pub shannon: f64,
    pub eigenvalues: Vec<f64>,
    pub cutoff_rank: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` eigenvector matrix.
    pub eigvecs: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDegrees {
    pub az_min: f64,
    pub az_max: f64,
    pub el_min: f64,
    pub el_max: f64,
}

/// Builds the basis with the [`default_resolution`] quadrature.
pub fn build_slepian_basis(
    max_degree: usize,
    region: &AngularRegion,
) -> Result<SlepianBasis, SlepianError> {
    let (n_az, n_el) = default_resolution(max_degree);
    let rule = region_quadrature(region, n_az, n_el)?;
    build_slepian_basis_with_rule(max_degree, region, &rule)
}

pub fn build_slepian_basis_with_rule(
    max_degree: usize,
    region: &AngularRegion,
    rule: &QuadratureRule,
) -> Result<SlepianBasis, SlepianError> {
    let shannon = shannon_number(max_degree, region);
    if shannon < 1.0 {
        return Err(SlepianError::RegionTooSmall(shannon));
    }
    let d = build_localization_matrix(max_degree, region, rule)?;
    let n = d.nrows();
    let eig = SymmetricEigen::new(d);
    if eig.eigenvalues.iter().any(|v| !v.is_finite())
        || eig.eigenvectors.iter().any(|v| !v.is_finite())
    {
        return Err(SlepianError::EigenFailure);
    }

    // Stable sort: equal eigenvalues keep the solver's column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let keep = (shannon.round() as usize).min(n);
    let mut eigvecs = DMatrix::<f64>::zeros(n, keep);
    for (dst, &src) in order.iter().take(keep).enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        eigvecs.set_column(dst, &(col * sign));
    }

    Ok(SlepianBasis::assemble(
        max_degree,
        *region,
        eigvecs,
        eigvals,
        keep - 1,
        shannon,
    ))
}

/// Values of every retained function at `dir`.
pub fn eval_basis(basis: &SlepianBasis, dir: &Direction) -> Vec<f64> {
    basis.eval(dir)
}
