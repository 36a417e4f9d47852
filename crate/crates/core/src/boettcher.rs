//! Böttcher coordinates above the maximal critical level, external rays, and
//! the maps `Φ_n` on the marked shift locus together with a Newton inverse.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escape::{green_unchecked, marked_heights, EscapeBudget};
use crate::poly::{HyperplaneBasis, MarkedPolynomial};

const OVERFLOW_GUARD: f64 = 1e60;
/// Largest modulus at which a forward iterate is still used directly in `Φ_n`.
const ITERATE_CEILING: f64 = 1e100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoettcherError {
    #[error("G(z) = {green} is not above the maximal critical height {max}")]
    BelowCriticalLevel { green: f64, max: f64 },
    #[error("product factor {index} has non-positive real part; start from a higher iterate")]
    BranchAmbiguity { index: usize },
    #[error("critical point {index} is not above the maximal critical level after n iterates")]
    NotInDomain { index: usize },
    #[error("non-finite input")]
    NanInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoettcherValue {
    pub w: Complex64,
    /// `|log|w| - G(z)|`.
    pub modulus_check: f64,
    /// `|φ(f(z)) - φ(z)^d| / |φ(z)^d|`.
    pub conjugacy_defect: f64,
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// `log φ(z)` and `d log φ / dz` by the principal-branch product.
///
/// Every factor `f(z_k)/z_k^d` must lie in the right half-plane; the product
/// is truncated once the remaining tail is below `tol`.
pub fn log_phi_raw(f: &MarkedPolynomial, z: Complex64, tol: f64) -> Result<(Complex64, Complex64), BoettcherError> {
    product(f, z, tol, true)
}

fn product(
    f: &MarkedPolynomial,
    z: Complex64,
    tol: f64,
    strict: bool,
) -> Result<(Complex64, Complex64), BoettcherError> {
    if !z.re.is_finite() || !z.im.is_finite() {
        return Err(BoettcherError::NanInput);
    }
    let d = f.degree();
    let df = d as f64;
    let coeffs = f.coefficients();
    let mass = f.lower_coefficient_mass();

    let mut log = z.ln();
    let mut dlog = z.inv();
    let mut w = z;
    // D_k = d^{-k} (f^k)'(z).
    let mut dk = Complex64::new(1.0, 0.0);
    let mut scale = 1.0 / df;
    let mut k = 0usize;
    loop {
        let u = w.inv();
        let r = f.ratio_to_leading(w);
        if strict && r.re <= 0.0 {
            return Err(BoettcherError::BranchAmbiguity { index: k });
        }
        log += r.ln() * scale;
        // (w f'(w) - d f(w)) / w^d  =  Σ_{j<d} (j - d) a_j u^{d-j}
        let mut q = Complex64::new(0.0, 0.0);
        for (j, a) in coeffs[..d].iter().enumerate() {
            q += a * (j as f64 - df) * u.powu((d - j) as u32);
        }
        let (fw, dfw) = f.evaluate_with_derivative(w);
        dlog += dk * q / (w * r) * scale;
        dk *= dfw / df;
        w = fw;
        k += 1;
        let tail = 4.0 * mass * scale / (df * w.norm());
        if tail < tol || w.norm() > OVERFLOW_GUARD || !w.re.is_finite() {
            break;
        }
        scale /= df;
        if k > 10_000 {
            break;
        }
    }
    Ok((log, dlog))
}

const MAX_PULLBACKS: usize = 12;

/// `log φ(z)` and `d log φ / dz` anywhere above the maximal critical level.
///
/// Where the principal product is ambiguous, `log φ(z)` is one of the `d`
/// values `(log φ(f(z)) + 2πij) / d`; the branch is picked by integrating
/// `d log φ` along the external ray from `z` out to where the product is safe.
pub fn log_phi(f: &MarkedPolynomial, z: Complex64, tol: f64) -> Result<(Complex64, Complex64), BoettcherError> {
    log_phi_at_depth(f, z, tol, 0)
}

fn log_phi_at_depth(
    f: &MarkedPolynomial,
    z: Complex64,
    tol: f64,
    depth: usize,
) -> Result<(Complex64, Complex64), BoettcherError> {
    match log_phi_raw(f, z, tol) {
        Err(BoettcherError::BranchAmbiguity { .. }) if depth < MAX_PULLBACKS => {}
        other => return other,
    }
    let df = f.degree() as f64;
    let (outer, _) = log_phi_at_depth(f, f.evaluate(z), tol, depth + 1)?;
    let (_, dlog) = product(f, z, tol, false)?;
    let estimate = trace_outward(f, z)?;
    let base = outer / df;
    let best = (0..f.degree())
        .map(|j| base + Complex64::new(0.0, TAU * j as f64 / df))
        .min_by(|a, b| wrap_pi(a.im - estimate.im).abs().total_cmp(&wrap_pi(b.im - estimate.im).abs()))
        .expect("degree is at least 2");
    Ok((best, dlog))
}

/// Rough `log φ(z)`: Simpson integration of `d log φ` along the external ray
/// through `z` until the principal product becomes unambiguous.
fn trace_outward(f: &MarkedPolynomial, z: Complex64) -> Result<Complex64, BoettcherError> {
    let dlog = |w: Complex64| product(f, w, 1e-10, false).map(|(_, dl)| dl);
    let step = 0.05;
    let mut w = z;
    let mut acc = Complex64::new(0.0, 0.0);
    for _ in 0..4000 {
        if let Ok((log, _)) = log_phi_raw(f, w, 1e-12) {
            return Ok(log - acc);
        }
        let d0 = dlog(w)?;
        let half = d0.conj() / d0.norm_sqr() * (0.5 * step);
        let dm = dlog(w + half)?;
        let delta = dm.conj() / dm.norm_sqr() * step;
        let (mid, end) = (dlog(w + delta * 0.5)?, dlog(w + delta)?);
        acc += (d0 + mid * 4.0 + end) / 6.0 * delta;
        w += delta;
        if !w.re.is_finite() || !w.im.is_finite() {
            return Err(BoettcherError::NanInput);
        }
    }
    Err(BoettcherError::BranchAmbiguity { index: 0 })
}

/// Cached data for repeated Böttcher evaluations of one polynomial.
#[derive(Debug, Clone)]
pub struct BoettcherMap<'a> {
    pub f: &'a MarkedPolynomial,
    pub max_height: f64,
    pub tol: f64,
    budget: EscapeBudget,
}

impl<'a> BoettcherMap<'a> {
    pub fn new(f: &'a MarkedPolynomial, tol: f64) -> Self {
        let budget = EscapeBudget::with_tolerance(tol.min(1e-12));
        let max_height = marked_heights(f, &budget).iter().map(|v| v.value).fold(0.0, f64::max);
        Self { f, max_height, tol, budget }
    }

    pub fn green(&self, z: Complex64) -> f64 {
        green_unchecked(self.f, z, &self.budget).value
    }

    pub fn eval(&self, z: Complex64) -> Result<BoettcherValue, BoettcherError> {
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(BoettcherError::NanInput);
        }
        let g = self.green(z);
        if g <= self.max_height {
            return Err(BoettcherError::BelowCriticalLevel { green: g, max: self.max_height });
        }
        let (log, _) = log_phi(self.f, z, self.tol)?;
        let w = log.exp();
        let fz = self.f.evaluate(z);
        let conjugacy_defect = match log_phi(self.f, fz, self.tol) {
            Ok((log_fz, _)) => {
                let diff = log_fz - log * self.f.degree() as f64;
                let diff = Complex64::new(diff.re, wrap_pi(diff.im));
                (diff.exp() - 1.0).norm()
            }
            Err(_) => f64::INFINITY,
        };
        Ok(BoettcherValue { w, modulus_check: (log.re - g).abs(), conjugacy_defect })
    }
}

pub fn boettcher(f: &MarkedPolynomial, z: Complex64, tol: f64) -> Result<BoettcherValue, BoettcherError> {
    BoettcherMap::new(f, tol).eval(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayPoint {
    pub height: f64,
    /// In `[0, 2π)`.
    pub angle: f64,
    pub z: Complex64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RayError {
    #[error("invalid ray request: {0}")]
    InvalidRange(String),
    #[error("ray obstructed at height {failure_height} after {} points", partial.len())]
    RayObstructed { partial: Vec<RayPoint>, failure_height: f64 },
}

const RAY_NEWTON_TOL: f64 = 1e-12;
const RAY_MAX_HALVINGS: usize = 40;

fn newton_on_ray(f: &MarkedPolynomial, guess: Complex64, target: Complex64, min_height: f64) -> Option<Complex64> {
    let mut z = guess;
    for _ in 0..30 {
        let (log, dlog) = log_phi(f, z, 1e-15).ok()?;
        let res = Complex64::new(log.re - target.re, wrap_pi(log.im - target.im));
        if res.norm() < RAY_NEWTON_TOL {
            return (log.re > min_height).then_some(z);
        }
        let step = res / dlog;
        if !step.re.is_finite() {
            return None;
        }
        z -= step;
    }
    None
}

/// Continue an external ray from `start` to height `h_target` in `steps` equal
/// increments, halving the increment whenever Newton fails.
pub fn continue_ray(
    f: &MarkedPolynomial,
    start: RayPoint,
    h_target: f64,
    steps: usize,
) -> Result<Vec<RayPoint>, RayError> {
    let bmap = BoettcherMap::new(f, 1e-14);
    let floor = bmap.max_height;
    if h_target <= floor {
        return Err(RayError::InvalidRange(format!(
            "target height {h_target} is not above the maximal critical height {floor}"
        )));
    }
    let steps = steps.max(1);
    let mut path = vec![start];
    let mut cur = start;
    let full = (h_target - start.height) / steps as f64;
    for k in 1..=steps {
        let goal = if k == steps { h_target } else { start.height + full * k as f64 };
        let mut dh = goal - cur.height;
        let mut halvings: usize = 0;
        while (goal - cur.height).abs() > 0.0 {
            if (cur.height + dh - goal) * dh.signum() > 0.0 {
                dh = goal - cur.height;
            }
            let h_next = cur.height + dh;
            let dlog = log_phi(f, cur.z, 1e-15).map(|(_, dl)| dl).ok();
            let guess = dlog.map(|dl| cur.z + dh / dl).unwrap_or(cur.z);
            let target = Complex64::new(h_next, start.angle);
            match newton_on_ray(f, guess, target, floor) {
                Some(z) => {
                    cur = RayPoint { height: h_next, angle: start.angle, z };
                    dh *= 2.0;
                    halvings = halvings.saturating_sub(1);
                }
                None => {
                    dh /= 2.0;
                    halvings += 1;
                    if halvings > RAY_MAX_HALVINGS {
                        return Err(RayError::RayObstructed { partial: path, failure_height: h_next });
                    }
                }
            }
        }
        path.push(cur);
    }
    Ok(path)
}

/// External ray of angle `θ` traced down from `h_start` to `h_end`.
pub fn trace_ray(
    f: &MarkedPolynomial,
    angle: f64,
    h_start: f64,
    h_end: f64,
    steps: usize,
) -> Result<Vec<RayPoint>, RayError> {
    let bmap = BoettcherMap::new(f, 1e-14);
    if !(h_start > h_end && h_end > bmap.max_height) {
        return Err(RayError::InvalidRange(format!(
            "need h_start > h_end > M = {}; got {h_start}, {h_end}",
            bmap.max_height
        )));
    }
    let angle = angle.rem_euclid(TAU);
    let guess = Complex64::from_polar(h_start.exp(), angle);
    if guess.norm() <= f.escape_radius() {
        return Err(RayError::InvalidRange(format!(
            "starting point e^{h_start} is inside the escape radius {}",
            f.escape_radius()
        )));
    }
    let target = Complex64::new(h_start, angle);
    let z = newton_on_ray(f, guess, target, bmap.max_height)
        .ok_or_else(|| RayError::RayObstructed { partial: vec![], failure_height: h_start })?;
    continue_ray(f, RayPoint { height: h_start, angle, z }, h_end, steps)
}

/// Image of `Φ_n`, stored through logarithms so that `d^n`-fold growth never overflows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiImage {
    pub n: u32,
    /// `log w_i`: real part `log|w_i|`, imaginary part `arg w_i ∈ [0, 2π)`.
    pub log_w: Vec<Complex64>,
}

impl PhiImage {
    pub fn from_heights_and_angles(n: u32, d: usize, heights: &[f64], angles: &[f64]) -> Self {
        let scale = (d as f64).powi(n as i32);
        Self {
            n,
            log_w: heights.iter().zip(angles).map(|(h, t)| Complex64::new(scale * h, t.rem_euclid(TAU))).collect(),
        }
    }

    /// `w_i` itself; entries overflow to infinity for very large heights.
    pub fn w(&self) -> Vec<Complex64> {
        self.log_w.iter().map(|l| Complex64::from_polar(l.re.exp(), l.im)).collect()
    }

    /// `Λ_n`: coordinate-wise log-modulus.
    pub fn log_moduli(&self) -> Vec<f64> {
        self.log_w.iter().map(|l| l.re).collect()
    }

    /// `d^n log|w_i| > max_j log|w_j|` for every `i`.
    pub fn in_domain(&self, d: usize) -> bool {
        let scale = (d as f64).powi(self.n as i32);
        let top = self.log_w.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        self.log_w.iter().all(|l| l.re > 0.0 && scale * l.re > top)
    }
}

/// `w_i = φ_f(f^n(c_i))` in marking order.
pub fn phi_n_map(f: &MarkedPolynomial, n: u32) -> Result<PhiImage, BoettcherError> {
    let tol = 1e-15;
    let budget = EscapeBudget::with_tolerance(tol);
    let marked = marked_heights(f, &budget);
    let max = marked.iter().map(|v| v.value).fold(0.0, f64::max);
    let d = f.degree();
    let df = d as f64;
    let mut log_w = Vec::with_capacity(marked.len());
    for (i, (&c, v)) in f.critical_points().iter().zip(&marked).enumerate() {
        if !v.escaped || df.powi(n as i32) * v.value <= max {
            return Err(BoettcherError::NotInDomain { index: i });
        }
        // Push forward as far as is numerically safe, then use φ(f^n c) = φ(f^m c)^{d^{n-m}}.
        let mut z = c;
        let mut m = 0u32;
        let mut best: Option<(u32, Complex64)> = None;
        while m < n {
            let next = f.evaluate(z);
            if !(next.norm() < ITERATE_CEILING) {
                break;
            }
            z = next;
            m += 1;
            if df.powi(m as i32) * v.value > max {
                best = Some((m, z));
            }
        }
        let (m, z) = best.ok_or(BoettcherError::NotInDomain { index: i })?;
        let (mut log, _) = log_phi(f, z, tol)?;
        let lift = df.powi((n - m) as i32);
        log = Complex64::new(log.re * lift, (log.im.rem_euclid(TAU) * lift).rem_euclid(TAU));
        log_w.push(log);
    }
    Ok(PhiImage { n, log_w })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvertError {
    #[error("Newton did not converge (residual {residual:e})")]
    NewtonDiverged { best: Box<MarkedPolynomial>, residual: f64 },
    #[error("iterate left the domain of Φ_n")]
    LeftDomain { last: Box<MarkedPolynomial> },
    #[error("seed is not in the domain of Φ_n: {0}")]
    SeedOutsideDomain(BoettcherError),
    #[error("target has {found} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

fn residual(image: &PhiImage, target: &PhiImage) -> DVector<f64> {
    let mut r = DVector::zeros(2 * image.log_w.len());
    for (i, (a, b)) in image.log_w.iter().zip(&target.log_w).enumerate() {
        r[2 * i] = a.re - b.re;
        r[2 * i + 1] = wrap_pi(a.im - b.im);
    }
    r
}

/// Solve `Φ_n(f) = target` by damped Newton from `seed`.
pub fn invert_phi_n(
    d: usize,
    n: u32,
    target: &PhiImage,
    seed: &MarkedPolynomial,
    tol: f64,
) -> Result<MarkedPolynomial, InvertError> {
    if target.log_w.len() != d - 1 || seed.degree() != d {
        return Err(InvertError::DimensionMismatch { expected: d - 1, found: target.log_w.len() });
    }
    let basis = HyperplaneBasis::new(d);
    let eval = |p: &[f64]| -> Option<(MarkedPolynomial, DVector<f64>)> {
        let f = basis.from_coordinates(p).ok()?;
        let img = phi_n_map(&f, n).ok()?;
        let r = residual(&img, target);
        Some((f, r))
    };
    let mut p = basis.to_coordinates(seed);
    let (mut cur_f, mut cur_r) = {
        let img = phi_n_map(seed, n).map_err(InvertError::SeedOutsideDomain)?;
        (seed.clone(), residual(&img, target))
    };
    let dim = p.len();
    for _ in 0..60 {
        let norm = cur_r.norm();
        if norm < tol {
            return Ok(cur_f);
        }
        let scale = p.iter().map(|x| x.abs()).fold(1.0, f64::max);
        let h = 1e-7 * scale;
        let mut jac = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[col] += h;
            pm[col] -= h;
            // One-sided differences when one neighbour falls outside the domain.
            let (rp, rm, denom) = match (eval(&pp), eval(&pm)) {
                (Some((_, rp)), Some((_, rm))) => (rp, rm, 2.0 * h),
                (Some((_, rp)), None) => (rp, cur_r.clone(), h),
                (None, Some((_, rm))) => (cur_r.clone(), rm, h),
                (None, None) => return Err(InvertError::LeftDomain { last: Box::new(cur_f) }),
            };
            for row in 0..dim {
                let mut diff = rp[row] - rm[row];
                if row % 2 == 1 {
                    diff = wrap_pi(diff);
                }
                jac[(row, col)] = diff / denom;
            }
        }
        let step = match jac.lu().solve(&(-&cur_r)) {
            Some(s) => s,
            None => return Err(InvertError::NewtonDiverged { best: Box::new(cur_f), residual: norm }),
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut saw_domain_exit = false;
        for _ in 0..30 {
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(x, s)| x + lambda * s).collect();
            match eval(&trial) {
                Some((f, r)) if r.norm() < norm => {
                    p = trial;
                    cur_f = f;
                    cur_r = r;
                    accepted = true;
                    break;
                }
                Some(_) => {}
                None => saw_domain_exit = true,
            }
            lambda *= 0.5;
        }
        if !accepted {
            if cur_r.norm() < tol.max(1e-13) * 10.0 {
                return Ok(cur_f);
            }
            return Err(if saw_domain_exit {
                InvertError::LeftDomain { last: Box::new(cur_f) }
            } else {
                InvertError::NewtonDiverged { best: Box::new(cur_f), residual: norm }
            });
        }
    }
    let residual = cur_r.norm();
    if residual < tol {
        Ok(cur_f)
    } else {
        Err(InvertError::NewtonDiverged { best: Box::new(cur_f), residual })
    }
}
