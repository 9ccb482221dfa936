//! Geometry on the unit sphere: directions, azimuth/elevation regions,
//! real orthonormal spherical harmonics, quadrature rules and Fibonacci
//! node sets.
//!
//! Directions are expressed as azimuth and elevation in radians. Harmonics
//! use colatitude `π/2 − elevation` and azimuth as longitude.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("harmonic order {q} is out of range for degree {p}")]
    OrderOutOfRange { p: usize, q: isize },
    #[error("elevation {0} rad is outside [-pi/2, pi/2]")]
    ElevationOutOfRange(f64),
    #[error("non-finite angle")]
    NonFinite,
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    #[error("quadrature needs at least one node per axis (got {n_az} x {n_el})")]
    EmptyQuadrature { n_az: usize, n_el: usize },
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    /// Azimuth in `(-pi, pi]`.
    pub azimuth: f64,
    /// Elevation in `[-pi/2, pi/2]`.
    pub elevation: f64,
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    if a <= -PI {
        a += TAU;
    }
    a
}

impl Direction {
    /// Builds a direction, wrapping the azimuth into `(-pi, pi]`.
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self, SphereError> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(SphereError::NonFinite);
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&elevation) {
            return Err(SphereError::ElevationOutOfRange(elevation));
        }
        Ok(Self {
            azimuth: wrap_angle(azimuth),
            elevation,
        })
    }

    pub fn from_degrees(azimuth: f64, elevation: f64) -> Result<Self, SphereError> {
        Self::new(azimuth.to_radians(), elevation.to_radians())
    }

    /// Clamps elevation rather than rejecting it. Only for values produced
    /// internally from trigonometric inverses, which can overshoot by an ulp.
    pub(crate) fn clamped(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
            elevation: elevation.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    pub fn colatitude(&self) -> f64 {
        FRAC_PI_2 - self.elevation
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(&self, other: &Direction) -> f64 {
        let (s1, c1) = self.elevation.sin_cos();
        let (s2, c2) = other.elevation.sin_cos();
        let dl = other.azimuth - self.azimuth;
        // Vincenty form stays accurate for both tiny and antipodal separations.
        let y = ((c2 * dl.sin()).powi(2) + (c1 * s2 - s1 * c2 * dl.cos()).powi(2)).sqrt();
        let x = s1 * s2 + c1 * c2 * dl.cos();
        y.atan2(x)
    }
}

/// Rectangular azimuth × elevation field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularRegion {
    pub az_min: f64,
    pub az_max: f64,
    pub el_min: f64,
    pub el_max: f64,
}

impl AngularRegion {
    pub fn new(az_min: f64, az_max: f64, el_min: f64, el_max: f64) -> Result<Self, SphereError> {
        if ![az_min, az_max, el_min, el_max].iter().all(|v| v.is_finite()) {
            return Err(SphereError::NonFinite);
        }
        if az_min >= az_max {
            return Err(SphereError::DegenerateRegion(format!(
                "azimuth bounds [{az_min}, {az_max}] are empty"
            )));
        }
        if az_max - az_min > TAU * (1.0 + 1e-12) {
            return Err(SphereError::DegenerateRegion(format!(
                "azimuth span {} exceeds 2*pi",
                az_max - az_min
            )));
        }
        if el_min >= el_max {
            return Err(SphereError::DegenerateRegion(format!(
                "elevation bounds [{el_min}, {el_max}] are empty"
            )));
        }
        if el_min < -FRAC_PI_2 || el_max > FRAC_PI_2 {
            return Err(SphereError::DegenerateRegion(format!(
                "elevation bounds [{el_min}, {el_max}] leave [-pi/2, pi/2]"
            )));
        }
        Ok(Self {
            az_min,
            az_max,
            el_min,
            el_max,
        })
    }

    pub fn from_degrees(
        az_min: f64,
        az_max: f64,
        el_min: f64,
        el_max: f64,
    ) -> Result<Self, SphereError> {
        Self::new(
            az_min.to_radians(),
            az_max.to_radians(),
            el_min.to_radians(),
            el_max.to_radians(),
        )
    }

    pub fn full_sphere() -> Self {
        Self {
            az_min: -PI,
            az_max: PI,
            el_min: -FRAC_PI_2,
            el_max: FRAC_PI_2,
        }
    }

    /// Bounds in degrees, `[az_min, az_max, el_min, el_max]`.
    pub fn to_degrees(&self) -> [f64; 4] {
        [
            self.az_min.to_degrees(),
            self.az_max.to_degrees(),
            self.el_min.to_degrees(),
            self.el_max.to_degrees(),
        ]
    }

    pub fn az_span(&self) -> f64 {
        self.az_max - self.az_min
    }

    pub fn covers_full_azimuth(&self) -> bool {
        self.az_span() >= TAU * (1.0 - 1e-12)
    }

    /// Area in steradians.
    pub fn area(&self) -> f64 {
        self.az_span() * (self.el_max.sin() - self.el_min.sin())
    }

    /// Azimuth offset of `azimuth` from `az_min`, measured modulo 2π.
    fn az_offset(&self, azimuth: f64) -> f64 {
        (azimuth - self.az_min).rem_euclid(TAU)
    }

    pub fn contains(&self, dir: &Direction) -> bool {
        const TOL: f64 = 1e-12;
        if dir.elevation < self.el_min - TOL || dir.elevation > self.el_max + TOL {
            return false;
        }
        if self.covers_full_azimuth() {
            return true;
        }
        let off = self.az_offset(dir.azimuth);
        off <= self.az_span() + TOL || off >= TAU - TOL
    }

    /// Maps unit-square coordinates to a direction with area-preserving
    /// scaling: `u` spans azimuth linearly, `v` spans sin(elevation).
    pub(crate) fn map_unit_square(&self, u: f64, v: f64) -> Direction {
        let s_lo = self.el_min.sin();
        let s_hi = self.el_max.sin();
        let az = self.az_min + u * self.az_span();
        let el = (s_lo + v * (s_hi - s_lo)).clamp(-1.0, 1.0).asin();
        Direction::clamped(az, el)
    }
}

/// Area of `region` in steradians.
pub fn region_area(region: &AngularRegion) -> f64 {
    region.area()
}

/// Nodes and weights of a cubature rule on a region. Weights include the
/// `cos(elevation)` area element, so `sum(weights) == area`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<Direction>,
    pub weights: Vec<f64>,
    pub n_az: usize,
    pub n_el: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(&Direction) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| w * f(d))
            .sum()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the three-term recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() <= 1e-16 * z.abs().max(1.0) {
                let (_, d) = legendre_and_derivative(n, z);
                dp = d;
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_and_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (z * p1 - p0) / (z * z - 1.0);
    (p1, dp)
}

/// Tensor-product rule over `region`.
///
/// Elevation uses Gauss–Legendre in `sin(elevation)`, which absorbs the
/// area element. Azimuth uses the equal-weight midpoint rule when the region
/// wraps the full circle (exact for trigonometric polynomials below degree
/// `n_az`) and Gauss–Legendre otherwise.
pub fn region_quadrature(
    region: &AngularRegion,
    n_az: usize,
    n_el: usize,
) -> Result<QuadratureRule, SphereError> {
    if n_az == 0 || n_el == 0 {
        return Err(SphereError::EmptyQuadrature { n_az, n_el });
    }
    if region.area() <= 0.0 {
        return Err(SphereError::DegenerateRegion("zero area".into()));
    }

    let s_lo = region.el_min.sin();
    let s_hi = region.el_max.sin();
    let (gx, gw) = gauss_legendre(n_el);
    let half_s = 0.5 * (s_hi - s_lo);
    let mid_s = 0.5 * (s_hi + s_lo);
    let el: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gw)
        .map(|(x, w)| ((mid_s + half_s * x).clamp(-1.0, 1.0).asin(), w * half_s))
        .collect();

    let span = region.az_span();
    let az: Vec<(f64, f64)> = if region.covers_full_azimuth() {
        let h = span / n_az as f64;
        (0..n_az)
            .map(|i| (region.az_min + (i as f64 + 0.5) * h, h))
            .collect()
    } else {
        let (ax, aw) = gauss_legendre(n_az);
        ax.iter()
            .zip(&aw)
            .map(|(x, w)| (region.az_min + 0.5 * span * (x + 1.0), 0.5 * span * w))
            .collect()
    };

    let mut nodes = Vec::with_capacity(n_az * n_el);
    let mut weights = Vec::with_capacity(n_az * n_el);
    for &(e, we) in &el {
        for &(a, wa) in &az {
            nodes.push(Direction::clamped(a, e));
            weights.push(we * wa);
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        n_az,
        n_el,
    })
}

/// Index of harmonic `(p, q)` in the degree-major row layout.
pub fn harmonic_index(p: usize, q: isize) -> usize {
    p * p + (q + p as isize) as usize
}

/// Inverse of [`harmonic_index`].
pub fn harmonic_degree_order(index: usize) -> (usize, isize) {
    let p = (index as f64).sqrt() as usize;
    // guard the float sqrt at perfect squares
    let p = if (p + 1) * (p + 1) <= index {
        p + 1
    } else if p * p > index {
        p - 1
    } else {
        p
    };
    (p, index as isize - (p * p) as isize - p as isize)
}

/// Number of harmonics up to and including degree `max_degree`.
pub fn harmonic_count(max_degree: usize) -> usize {
    (max_degree + 1) * (max_degree + 1)
}

/// Real orthonormal spherical harmonic of degree `p` and order `q`.
///
/// No Condon–Shortley phase; `q > 0` carries `√2 cos(qφ)`, `q < 0` carries
/// `√2 sin(|q|φ)`.
pub fn real_sph_harm(p: usize, q: isize, dir: &Direction) -> Result<f64, SphereError> {
    if q.unsigned_abs() > p {
        return Err(SphereError::OrderOutOfRange { p, q });
    }
    let m = q.unsigned_abs();
    let (s, x) = dir.colatitude().sin_cos();
    let leg = normalized_legendre_column(p, m, x, s);
    Ok(leg[p - m] * azimuthal_factor(q, dir.azimuth))
}

fn azimuthal_factor(q: isize, azimuth: f64) -> f64 {
    use std::f64::consts::SQRT_2;
    match q {
        0 => 1.0,
        q if q > 0 => SQRT_2 * (q as f64 * azimuth).cos(),
        q => SQRT_2 * ((-q) as f64 * azimuth).sin(),
    }
}

/// Fully normalised associated Legendre values for fixed order `m` and
/// degrees `m..=max_degree`. `x = cos(colatitude)`, `s = sin(colatitude)`.
fn normalized_legendre_column(max_degree: usize, m: usize, x: f64, s: f64) -> Vec<f64> {
    let mut pmm = (0.25 / PI).sqrt();
    for k in 1..=m {
        let kf = k as f64;
        pmm *= ((2.0 * kf + 1.0) / (2.0 * kf)).sqrt() * s;
    }
    let mut out = Vec::with_capacity(max_degree + 1 - m);
    out.push(pmm);
    if max_degree == m {
        return out;
    }
    let mf = m as f64;
    let mut prev2 = pmm;
    let mut prev1 = (2.0 * mf + 3.0).sqrt() * x * pmm;
    out.push(prev1);
    for p in (m + 2)..=max_degree {
        let pf = p as f64;
        let a = ((4.0 * pf * pf - 1.0) / (pf * pf - mf * mf)).sqrt();
        let b = (((pf - 1.0).powi(2) - mf * mf) / (4.0 * (pf - 1.0).powi(2) - 1.0)).sqrt();
        let cur = a * (x * prev1 - b * prev2);
        out.push(cur);
        prev2 = prev1;
        prev1 = cur;
    }
    out
}

/// All real harmonics up to `max_degree` at `dir`, in degree-major order
/// `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`.
pub fn sph_harm_row(max_degree: usize, dir: &Direction) -> Vec<f64> {
    let mut row = vec![0.0; harmonic_count(max_degree)];
    fill_sph_harm_row(max_degree, dir, &mut row);
    row
}

/// Like [`sph_harm_row`] but writes into a caller-provided buffer of length
/// `(max_degree + 1)^2`.
pub fn fill_sph_harm_row(max_degree: usize, dir: &Direction, row: &mut [f64]) {
    assert_eq!(row.len(), harmonic_count(max_degree));
    let (s, x) = dir.colatitude().sin_cos();
    for m in 0..=max_degree {
        let leg = normalized_legendre_column(max_degree, m, x, s);
        if m == 0 {
            for (k, v) in leg.iter().enumerate() {
                row[harmonic_index(k, 0)] = *v;
            }
        } else {
            let mi = m as isize;
            let c = azimuthal_factor(mi, dir.azimuth);
            let sn = azimuthal_factor(-mi, dir.azimuth);
            for (k, v) in leg.iter().enumerate() {
                let p = m + k;
                row[harmonic_index(p, mi)] = v * c;
                row[harmonic_index(p, -mi)] = v * sn;
            }
        }
    }
}

const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

/// `count` quasi-uniform directions inside `region`.
///
/// A rank-1 Fibonacci lattice on the unit square (golden-ratio azimuth
/// progression, equal-area elevation strata) mapped onto the region with
/// `sin(elevation)` as the vertical coordinate.
pub fn fibonacci_nodes(region: &AngularRegion, count: usize) -> Vec<Direction> {
    let inv_phi = 1.0 / GOLDEN_RATIO;
    (0..count)
        .map(|i| {
            let u = ((i as f64 + 0.5) * inv_phi).fract();
            let v = (i as f64 + 0.5) / count as f64;
            region.map_unit_square(u, v)
        })
        .collect()
}
