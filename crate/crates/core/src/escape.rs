//! Escape rate `G_f`, the critical heights map and its Jacobian.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{HyperplaneBasis, MarkedPolynomial};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Orbits are not followed past this modulus; the tail bound is already tiny there.
const OVERFLOW_GUARD: f64 = 1e60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EscapeError {
    #[error("NaN or infinite input point")]
    NanInput,
    #[error("invalid escape budget: {0}")]
    InvalidBudget(&'static str),
    #[error("polynomial is not in the shift locus (critical point {index} unresolved or at height 0)")]
    NotShiftLocus { index: usize },
    #[error("finite-difference step {step} leaves the shift locus in direction {column}")]
    StepTooLarge { step: f64, column: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeBudget {
    /// Lower bound on the escape radius; the polynomial's own bound is used when larger.
    pub escape_radius: f64,
    pub max_iterations: usize,
    pub target_tolerance: f64,
}

impl Default for EscapeBudget {
    fn default() -> Self {
        Self { escape_radius: 2.0, max_iterations: DEFAULT_MAX_ITERATIONS, target_tolerance: DEFAULT_TOLERANCE }
    }
}

impl EscapeBudget {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { target_tolerance: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EscapeError> {
        if !(self.escape_radius >= 2.0) {
            return Err(EscapeError::InvalidBudget("escape_radius must be >= 2"));
        }
        if self.max_iterations < 1 {
            return Err(EscapeError::InvalidBudget("max_iterations must be >= 1"));
        }
        if !(self.target_tolerance > 0.0) {
            return Err(EscapeError::InvalidBudget("target_tolerance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeValue {
    pub value: f64,
    pub iterations_used: usize,
    /// Truncation bound when escaped; otherwise an upper bound on `G` implied by
    /// the orbit staying inside the escape disk.
    pub error_bound: f64,
    pub escaped: bool,
}

/// Escape rate of `z` under `f`.
///
/// The orbit is followed until it leaves the escape disk at step `n`; the value
/// `d^{-n} log|z_n|` is then corrected by `d^{-(k+1)} log|f(z_k)/z_k^d|` until
/// the remaining tail, bounded by `4S / (d^{k+1} |z_k|)` with `S` the
/// non-leading coefficient mass, drops below the tolerance.
pub fn green(f: &MarkedPolynomial, z: Complex64, budget: &EscapeBudget) -> Result<EscapeValue, EscapeError> {
    if !z.re.is_finite() || !z.im.is_finite() {
        return Err(EscapeError::NanInput);
    }
    budget.validate()?;
    Ok(green_unchecked(f, z, budget))
}

pub(crate) fn green_unchecked(f: &MarkedPolynomial, z: Complex64, budget: &EscapeBudget) -> EscapeValue {
    let d = f.degree() as f64;
    let radius = budget.escape_radius.max(f.escape_radius());
    let mass = f.lower_coefficient_mass();
    let r2 = radius * radius;

    let mut w = z;
    let mut n = 0usize;
    while w.norm_sqr() <= r2 {
        if n >= budget.max_iterations {
            return EscapeValue {
                value: 0.0,
                iterations_used: n,
                error_bound: (radius.ln() + std::f64::consts::LN_2) / d.powi(n as i32),
                escaped: false,
            };
        }
        w = f.evaluate(w);
        n += 1;
    }

    let mut scale = d.powi(-(n as i32));
    let mut value = scale * w.norm().ln();
    let mut tail = 4.0 * mass * scale / (d * w.norm());
    while tail > budget.target_tolerance && w.norm() < OVERFLOW_GUARD && n < budget.max_iterations {
        let r = f.ratio_to_leading(w);
        value += scale / d * r.norm().ln();
        w = f.evaluate(w);
        scale /= d;
        n += 1;
        tail = 4.0 * mass * scale / (d * w.norm());
    }
    EscapeValue { value, iterations_used: n, error_bound: tail, escaped: true }
}

/// Sorted critical heights `h_1 >= h_2 >= ... >= h_{d-1} >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightsVector {
    pub d: usize,
    pub heights: Vec<f64>,
}

impl HeightsVector {
    /// Sorts the input descending; rejects negative or non-finite entries.
    pub fn new(d: usize, mut heights: Vec<f64>) -> Option<Self> {
        if d < 2 || heights.len() != d - 1 || heights.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return None;
        }
        heights.sort_by(|a, b| b.total_cmp(a));
        Some(Self { d, heights })
    }

    /// Maximal escape rate `M`.
    pub fn max(&self) -> f64 {
        self.heights[0]
    }

    pub fn min(&self) -> f64 {
        self.heights[self.heights.len() - 1]
    }

    pub fn is_shift_locus(&self) -> bool {
        self.min() > 0.0
    }

    /// Divide by `h_1`; `None` when `h_1 = 0`.
    pub fn normalized(&self) -> Option<Self> {
        let m = self.max();
        (m > 0.0).then(|| Self { d: self.d, heights: self.heights.iter().map(|h| h / m).collect() })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { d: self.d, heights: self.heights.iter().map(|h| h * s).collect() }
    }
}

/// Output of [`heights`]: the sorted vector plus per-slot bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalHeights {
    pub heights: HeightsVector,
    /// `escaped[k]` refers to sorted slot `k`.
    pub escaped: Vec<bool>,
    /// `order[k]` is the marked critical index occupying sorted slot `k`.
    pub order: Vec<usize>,
    /// Raw escape values in marked order.
    pub marked: Vec<EscapeValue>,
}

impl CriticalHeights {
    pub fn all_escaped(&self) -> bool {
        self.escaped.iter().all(|&e| e)
    }

    pub fn none_escaped(&self) -> bool {
        self.escaped.iter().all(|&e| !e)
    }
}

/// The marked heights map: `G_f(c_i)` in marking order.
pub fn marked_heights(f: &MarkedPolynomial, budget: &EscapeBudget) -> Vec<EscapeValue> {
    f.critical_points().iter().map(|&c| green_unchecked(f, c, budget)).collect()
}

pub fn heights(f: &MarkedPolynomial, budget: &EscapeBudget) -> CriticalHeights {
    let marked = marked_heights(f, budget);
    let mut order: Vec<usize> = (0..marked.len()).collect();
    order.sort_by(|&i, &j| marked[j].value.total_cmp(&marked[i].value).then(i.cmp(&j)));
    let values = order.iter().map(|&i| marked[i].value).collect();
    CriticalHeights {
        heights: HeightsVector { d: f.degree(), heights: values },
        escaped: order.iter().map(|&i| marked[i].escaped).collect(),
        order,
        marked,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightsJacobian {
    /// `(d-1) × 2(d-1)`; row `i` is the marked critical point `c_i`, columns
    /// follow [`HyperplaneBasis`] coordinates.
    pub matrix: DMatrix<f64>,
    pub basis: HyperplaneBasis,
    pub step: f64,
}

impl HeightsJacobian {
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.matrix.clone().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Count of singular values above `rel · σ_max`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        let s = self.singular_values();
        let top = s.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        s.iter().filter(|&&x| x > rel * top).count()
    }
}

fn jacobian_budget() -> EscapeBudget {
    EscapeBudget { target_tolerance: 1e-15, ..EscapeBudget::default() }
}

fn shift_heights(f: &MarkedPolynomial, budget: &EscapeBudget) -> Result<Vec<f64>, usize> {
    let vals = marked_heights(f, budget);
    match vals.iter().position(|v| !v.escaped || v.value <= 0.0) {
        Some(i) => Err(i),
        None => Ok(vals.iter().map(|v| v.value).collect()),
    }
}

/// Central finite differences of the marked heights in hyperplane coordinates.
pub fn heights_jacobian(f: &MarkedPolynomial, step: f64) -> Result<HeightsJacobian, EscapeError> {
    let budget = jacobian_budget();
    shift_heights(f, &budget).map_err(|index| EscapeError::NotShiftLocus { index })?;
    let basis = HyperplaneBasis::new(f.degree());
    let p0 = basis.to_coordinates(f);
    let rows = f.degree() - 1;
    let mut matrix = DMatrix::zeros(rows, p0.len());
    for col in 0..p0.len() {
        let mut plus = p0.clone();
        let mut minus = p0.clone();
        plus[col] += step;
        minus[col] -= step;
        let hp = basis
            .from_coordinates(&plus)
            .ok()
            .and_then(|g| shift_heights(&g, &budget).ok())
            .ok_or(EscapeError::StepTooLarge { step, column: col })?;
        let hm = basis
            .from_coordinates(&minus)
            .ok()
            .and_then(|g| shift_heights(&g, &budget).ok())
            .ok_or(EscapeError::StepTooLarge { step, column: col })?;
        for r in 0..rows {
            matrix[(r, col)] = (hp[r] - hm[r]) / (2.0 * step);
        }
    }
    Ok(HeightsJacobian { matrix, basis, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::green_brute_force;

    fn cx(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn cubic(c1: Complex64, a: Complex64) -> MarkedPolynomial {
        MarkedPolynomial::from_critical_data(&[c1, -c1], a).unwrap()
    }

    #[test]
    fn pure_power_is_log_modulus() {
        let f = MarkedPolynomial::unicritical(2, cx(0.0, 0.0));
        let g = green(&f, cx(2.0, 0.0), &EscapeBudget::default()).unwrap();
        assert!(g.escaped);
        assert!((g.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.error_bound <= 1e-12);
        let f3 = MarkedPolynomial::unicritical(3, cx(0.0, 0.0));
        for z in [cx(3.0, 4.0), cx(-10.0, 0.5), cx(0.0, 1e5)] {
            let g = green(&f3, z, &EscapeBudget::default()).unwrap();
            assert!((g.value - z.norm().ln()).abs() <= 1e-14 * z.norm().ln().abs().max(1.0));
            assert_eq!(g.error_bound, 0.0);
        }
    }

    #[test]
    fn bounded_critical_orbit() {
        let f = cubic(cx(1.0, 0.0), cx(0.0, 0.0));
        let g = green(&f, cx(1.0, 0.0), &EscapeBudget::default()).unwrap();
        assert!(!g.escaped);
        assert_eq!(g.value, 0.0);
        let h = heights(&f, &EscapeBudget::default());
        assert_eq!(h.heights.heights, vec![0.0, 0.0]);
        assert!(h.none_escaped());
    }

    #[test]
    fn power_map_heights_vanish() {
        for d in 2..6 {
            let f = MarkedPolynomial::unicritical(d, cx(0.0, 0.0));
            let h = heights(&f, &EscapeBudget { max_iterations: 50, ..Default::default() });
            assert!(h.heights.heights.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_nan() {
        let f = MarkedPolynomial::unicritical(2, cx(0.0, 0.0));
        assert_eq!(green(&f, cx(f64::NAN, 0.0), &EscapeBudget::default()), Err(EscapeError::NanInput));
        let bad = EscapeBudget { target_tolerance: 0.0, ..Default::default() };
        assert!(green(&f, cx(1.0, 0.0), &bad).is_err());
    }

    #[test]
    fn matches_multiprecision_brute_force() {
        // Frozen oracle: 200-bit, 60 iterations of z^2 + 2 from 0.
        let f = MarkedPolynomial::unicritical(2, cx(2.0, 0.0));
        let oracle = green_brute_force(&f, cx(0.0, 0.0), 200, 60);
        assert!((oracle - 0.454_784_805_061_117_8).abs() < 1e-15);
        let g = green(&f, cx(0.0, 0.0), &EscapeBudget::default()).unwrap();
        assert!((g.value - oracle).abs() < 1e-10, "{} vs {}", g.value, oracle);
    }

    #[test]
    fn large_parameter_quadratic() {
        let f = MarkedPolynomial::unicritical(2, cx(100.0, 0.0));
        let h = heights(&f, &EscapeBudget::default());
        let g0 = h.heights.max();
        let oracle = green_brute_force(&f, cx(0.0, 0.0), 200, 40);
        assert!((g0 - oracle).abs() < 1e-10);
        let delta = g0 - 0.5 * 100f64.ln();
        // G(0) = ½ log 100 + ¼ log(1 + 1/100) + O(10^{-8}).
        assert!((delta - 0.25 * 1.01f64.ln()).abs() < 1e-6, "delta = {delta}");
        let g1 = green(&f, cx(100.0, 0.0), &EscapeBudget::default()).unwrap().value;
        assert!((g1 - 2.0 * g0).abs() < 1e-9);
    }

    #[test]
    fn heights_sorted_with_order() {
        let f = cubic(cx(0.2, 0.1), cx(3.0, 1.0));
        let h = heights(&f, &EscapeBudget::default());
        assert!(h.heights.heights[0] >= h.heights.heights[1]);
        let crit = f.critical_points();
        for (slot, &i) in h.order.iter().enumerate() {
            let g = green(&f, crit[i], &EscapeBudget::default()).unwrap().value;
            assert_eq!(g, h.heights.heights[slot]);
        }
    }

    #[test]
    fn quadratic_jacobian_matches_log_gradient() {
        let f = MarkedPolynomial::unicritical(2, cx(100.0, 0.0));
        let j = heights_jacobian(&f, 1e-3).unwrap();
        assert_eq!(j.matrix.shape(), (1, 2));
        // ∇(½ log|a|) = a / (2|a|²).
        let expect = [0.5 / 100.0, 0.0];
        assert!((j.matrix[(0, 0)] - expect[0]).abs() < 0.05 * expect[0]);
        assert!(j.matrix[(0, 1)].abs() < 0.05 * expect[0]);
        assert_eq!(j.numerical_rank(1e-6), 1);
    }

    #[test]
    fn jacobian_central_difference_order() {
        let f = cubic(cx(0.4, -0.3), cx(2.5, 1.5));
        let h = 4e-2;
        let j1 = heights_jacobian(&f, h).unwrap().matrix;
        let j2 = heights_jacobian(&f, h / 2.0).unwrap().matrix;
        let j4 = heights_jacobian(&f, h / 4.0).unwrap().matrix;
        let num = (&j1 - &j2).norm();
        let den = (&j2 - &j4).norm();
        let ratio = num / den;
        assert!((ratio - 4.0).abs() < 0.5, "Richardson ratio {ratio}");
    }

    #[test]
    fn jacobian_requires_shift_locus() {
        let f = cubic(cx(1.0, 0.0), cx(0.0, 0.0));
        assert!(matches!(heights_jacobian(&f, 1e-4), Err(EscapeError::NotShiftLocus { .. })));
    }

    #[test]
    fn continuity_first_order() {
        let f = cubic(cx(0.3, 0.2), cx(2.0, -1.0));
        let h0 = heights(&f, &EscapeBudget::with_tolerance(1e-14)).heights;
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let eps = 1e-2 / 2f64.powi(k);
            let g = cubic(cx(0.3 + eps, 0.2), cx(2.0, -1.0 + eps));
            let h = heights(&g, &EscapeBudget::with_tolerance(1e-14)).heights;
            let err = h.heights.iter().zip(&h0.heights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if k > 1 {
                let ratio = prev / err;
                assert!(ratio > 1.6 && ratio < 2.4, "halving ratio {ratio}");
            }
            prev = err;
        }
    }
}
