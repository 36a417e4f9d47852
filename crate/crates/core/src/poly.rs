//! Critically marked monic centered polynomials.
//!
//! A polynomial of degree `d` is stored through its marked critical points
//! `c_1, ..., c_{d-1}` (summing to zero) and the translation `a = f(0)`:
//!
//! ```text
//! f(z) = a + ∫_0^z d·∏(ζ - c_i) dζ
//! ```
//!
//! The expanded coefficients are computed once at construction and every
//! evaluation goes through Horner's scheme on the cached list.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on `Σ c_i` for a parameter to count as centered.
pub const CENTERING_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("critical points sum to {sum} (|sum| = {norm:e}); project onto the centered hyperplane first")]
    NonCenteredInput { sum: Complex64, norm: f64 },
    #[error("at least one critical point is required (degree >= 2)")]
    NoCriticalPoints,
    #[error("non-finite parameter")]
    NonFinite,
    #[error("degree field {declared} does not match {found} critical points")]
    DegreeMismatch { declared: usize, found: usize },
}

/// A degree-`d` monic centered polynomial with marked critical points.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedPolynomial {
    degree: usize,
    critical_points: Vec<Complex64>,
    translation: Complex64,
    /// Ascending powers; `coeffs[d] == 1` and `coeffs[d - 1] == 0` exactly.
    coeffs: Vec<Complex64>,
}

/// Expand `∏ (z - r_i)` into ascending coefficients.
pub(crate) fn expand_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut p = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); p.len() + 1];
        for (k, &pk) in p.iter().enumerate() {
            next[k + 1] += pk;
            next[k] -= r * pk;
        }
        p = next;
    }
    p
}

impl MarkedPolynomial {
    pub fn from_critical_data(c: &[Complex64], a: Complex64) -> Result<Self, PolyError> {
        if c.is_empty() {
            return Err(PolyError::NoCriticalPoints);
        }
        if c.iter().chain(std::iter::once(&a)).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(PolyError::NonFinite);
        }
        let sum: Complex64 = c.iter().sum();
        if sum.norm() > CENTERING_TOLERANCE {
            return Err(PolyError::NonCenteredInput { sum, norm: sum.norm() });
        }
        let d = c.len() + 1;
        let deriv = expand_roots(c);
        let mut coeffs = Vec::with_capacity(d + 1);
        coeffs.push(a);
        for (k, pk) in deriv.iter().enumerate() {
            coeffs.push(pk * (d as f64) / ((k + 1) as f64));
        }
        coeffs[d] = Complex64::new(1.0, 0.0);
        coeffs[d - 1] = Complex64::new(0.0, 0.0);
        Ok(Self { degree: d, critical_points: c.to_vec(), translation: a, coeffs })
    }

    /// `z^d + a`, all critical points at the origin.
    pub fn unicritical(d: usize, a: Complex64) -> Self {
        assert!(d >= 2, "degree must be at least 2");
        Self::from_critical_data(&vec![Complex64::new(0.0, 0.0); d - 1], a).expect("origin-centered critical data")
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn critical_points(&self) -> &[Complex64] {
        &self.critical_points
    }

    pub fn translation(&self) -> Complex64 {
        self.translation
    }

    /// Ascending coefficients `[a_0, ..., a_d]`.
    pub fn coefficients(&self) -> &[Complex64] {
        &self.coeffs
    }

    #[inline]
    pub fn evaluate(&self, z: Complex64) -> Complex64 {
        let mut acc = self.coeffs[self.degree];
        for k in (0..self.degree).rev() {
            acc = acc * z + self.coeffs[k];
        }
        acc
    }

    /// Value and derivative in one Horner pass.
    #[inline]
    pub fn evaluate_with_derivative(&self, z: Complex64) -> (Complex64, Complex64) {
        let mut p = self.coeffs[self.degree];
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..self.degree).rev() {
            dp = dp * z + p;
            p = p * z + self.coeffs[k];
        }
        (p, dp)
    }

    /// `f(z) / z^d` computed in powers of `1/z`, safe for huge `|z|`.
    #[inline]
    pub fn ratio_to_leading(&self, z: Complex64) -> Complex64 {
        let u = z.inv();
        let mut acc = self.coeffs[0];
        for k in 1..=self.degree {
            acc = acc * u + self.coeffs[k];
        }
        acc
    }

    /// `Σ |a_k|` over the non-leading coefficients.
    pub fn lower_coefficient_mass(&self) -> f64 {
        self.coeffs[..self.degree].iter().map(|c| c.norm()).sum()
    }

    /// `R = max(2, 2(1 + Σ|a_k|))`; `|z| > R` implies `|f(z)| >= 2|z|`.
    pub fn escape_radius(&self) -> f64 {
        (2.0 * (1.0 + self.lower_coefficient_mass())).max(2.0)
    }

    /// The n-th iterate `f^n(z)`.
    pub fn iterate(&self, z: Complex64, n: usize) -> Complex64 {
        (0..n).fold(z, |w, _| self.evaluate(w))
    }

    /// Conjugate by `z -> ζ z` with `ζ^{d-1} = 1`: returns `ζ^{-1} f(ζ z)`.
    pub fn rotate(&self, zeta: Complex64) -> Self {
        let inv = zeta.inv();
        let c: Vec<Complex64> = self.critical_points.iter().map(|c| c * inv).collect();
        let shift: Complex64 = c.iter().sum::<Complex64>() / c.len() as f64;
        let c: Vec<Complex64> = c.iter().map(|x| x - shift).collect();
        Self::from_critical_data(&c, self.translation * inv).expect("rotation preserves centering")
    }

    /// Largest coefficient-wise distance, a metric on unmarked polynomials.
    pub fn coefficient_distance(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }
}

/// `e^{2πik/(d-1)}` for `k = 0..d-1`: the rotations acting on centered monic maps.
pub fn rotation_group(d: usize) -> Vec<Complex64> {
    let m = d - 1;
    (0..m).map(|k| Complex64::from_polar(1.0, std::f64::consts::TAU * k as f64 / m as f64)).collect()
}

#[derive(Serialize, Deserialize)]
struct PolyWire {
    d: usize,
    c: Vec<[f64; 2]>,
    a: [f64; 2],
}

impl Serialize for MarkedPolynomial {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolyWire {
            d: self.degree,
            c: self.critical_points.iter().map(|z| [z.re, z.im]).collect(),
            a: [self.translation.re, self.translation.im],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MarkedPolynomial {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let w = PolyWire::deserialize(de)?;
        if w.d != w.c.len() + 1 {
            return Err(serde::de::Error::custom(PolyError::DegreeMismatch { declared: w.d, found: w.c.len() }));
        }
        let c: Vec<Complex64> = w.c.iter().map(|p| Complex64::new(p[0], p[1])).collect();
        MarkedPolynomial::from_critical_data(&c, Complex64::new(w.a[0], w.a[1])).map_err(serde::de::Error::custom)
    }
}

/// Real parameterization of `𝒫×_d` with the centering constraint removed.
///
/// The hyperplane `Σ c_i = 0` is spanned by the Gram–Schmidt orthonormalization
/// of `e_i - e_{i+1}`; a real coordinate vector of length `2(d-1)` is
/// `[Re α_1, Im α_1, ..., Re α_{d-2}, Im α_{d-2}, Re a, Im a]` with
/// `c = Σ α_k b_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneBasis {
    pub d: usize,
    /// `d - 2` orthonormal real vectors of length `d - 1`.
    pub vectors: Vec<Vec<f64>>,
}

impl HyperplaneBasis {
    pub fn new(d: usize) -> Self {
        assert!(d >= 2);
        let m = d - 1;
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(m.saturating_sub(1));
        for i in 0..m.saturating_sub(1) {
            let mut v = vec![0.0; m];
            v[i] = 1.0;
            v[i + 1] = -1.0;
            for b in &vectors {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            vectors.push(v);
        }
        Self { d, vectors }
    }

    pub fn real_dim(&self) -> usize {
        2 * (self.d - 1)
    }

    pub fn to_coordinates(&self, f: &MarkedPolynomial) -> Vec<f64> {
        let c = f.critical_points();
        let mut out = Vec::with_capacity(self.real_dim());
        for b in &self.vectors {
            let alpha: Complex64 = c.iter().zip(b).map(|(z, w)| z * w).sum();
            out.push(alpha.re);
            out.push(alpha.im);
        }
        out.push(f.translation().re);
        out.push(f.translation().im);
        out
    }

    pub fn from_coordinates(&self, p: &[f64]) -> Result<MarkedPolynomial, PolyError> {
        assert_eq!(p.len(), self.real_dim());
        let m = self.d - 1;
        let mut c = vec![Complex64::new(0.0, 0.0); m];
        for (k, b) in self.vectors.iter().enumerate() {
            let alpha = Complex64::new(p[2 * k], p[2 * k + 1]);
            c.iter_mut().zip(b).for_each(|(z, w)| *z += alpha * w);
        }
        // Remove the rounding drift so the centering check is exact to ulp level.
        let drift: Complex64 = c.iter().sum::<Complex64>() / m as f64;
        c.iter_mut().for_each(|z| *z -= drift);
        let a = Complex64::new(p[2 * m - 2], p[2 * m - 1]);
        MarkedPolynomial::from_critical_data(&c, a)
    }
}
