//! Multi-precision arithmetic used to cross-check the double-precision paths.
//!
//! Nothing in the main computation depends on this module. It provides a
//! brute-force escape rate (no tail corrections, many iterations, huge
//! exponents are fine) and a brute-force Böttcher product built only from
//! field operations and Newton d-th roots.

use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;
use num_complex::Complex64;

use crate::poly::MarkedPolynomial;

type Real = FBig<HalfEven>;

fn real(x: f64, bits: usize) -> Real {
    Real::try_from(x).expect("finite").with_precision(bits).value()
}

#[derive(Clone, Debug)]
pub struct HpComplex {
    pub re: Real,
    pub im: Real,
}

impl HpComplex {
    pub fn from_c64(z: Complex64, bits: usize) -> Self {
        Self { re: real(z.re, bits), im: real(z.im, bits) }
    }

    pub fn to_c64(&self) -> Complex64 {
        Complex64::new(self.re.to_f64().value(), self.im.to_f64().value())
    }

    fn add(&self, o: &Self) -> Self {
        Self { re: &self.re + &o.re, im: &self.im + &o.im }
    }

    fn sub(&self, o: &Self) -> Self {
        Self { re: &self.re - &o.re, im: &self.im - &o.im }
    }

    fn mul(&self, o: &Self) -> Self {
        Self { re: &self.re * &o.re - &self.im * &o.im, im: &self.re * &o.im + &self.im * &o.re }
    }

    fn div(&self, o: &Self) -> Self {
        let den = &o.re * &o.re + &o.im * &o.im;
        Self { re: (&self.re * &o.re + &self.im * &o.im) / &den, im: (&self.im * &o.re - &self.re * &o.im) / &den }
    }

    fn scale(&self, s: &Real) -> Self {
        Self { re: &self.re * s, im: &self.im * s }
    }

    fn powu(&self, n: usize, bits: usize) -> Self {
        let mut acc = Self::from_c64(Complex64::new(1.0, 0.0), bits);
        for _ in 0..n {
            acc = acc.mul(self);
        }
        acc
    }

    pub fn norm_sqr(&self) -> Real {
        &self.re * &self.re + &self.im * &self.im
    }
}

fn hp_coefficients(f: &MarkedPolynomial, bits: usize) -> Vec<HpComplex> {
    // Re-expand from the critical data so the oracle does not reuse the
    // double-precision coefficient list.
    let d = f.degree();
    let mut p = vec![HpComplex::from_c64(Complex64::new(1.0, 0.0), bits)];
    for &c in f.critical_points() {
        let c = HpComplex::from_c64(c, bits);
        let zero = HpComplex::from_c64(Complex64::new(0.0, 0.0), bits);
        let mut next = vec![zero; p.len() + 1];
        for (k, pk) in p.iter().enumerate() {
            next[k + 1] = next[k + 1].add(pk);
            next[k] = next[k].sub(&c.mul(pk));
        }
        p = next;
    }
    let mut coeffs = vec![HpComplex::from_c64(f.translation(), bits)];
    for (k, pk) in p.iter().enumerate() {
        coeffs.push(pk.scale(&(real(d as f64, bits) / real((k + 1) as f64, bits))));
    }
    coeffs
}

fn hp_eval(coeffs: &[HpComplex], z: &HpComplex) -> HpComplex {
    let mut acc = coeffs[coeffs.len() - 1].clone();
    for c in coeffs[..coeffs.len() - 1].iter().rev() {
        acc = acc.mul(z).add(c);
    }
    acc
}

/// `d^{-n} log|f^n(z)|` evaluated with `bits` of mantissa.
pub fn green_brute_force(f: &MarkedPolynomial, z: Complex64, bits: usize, iterations: usize) -> f64 {
    let coeffs = hp_coefficients(f, bits);
    let mut w = HpComplex::from_c64(z, bits);
    for _ in 0..iterations {
        w = hp_eval(&coeffs, &w);
    }
    let log_norm = w.norm_sqr().ln();
    let d = f.degree() as f64;
    let denom = real(2.0, bits) * real(d, bits).powi(iterations.into());
    (log_norm / denom).to_f64().value()
}

/// Principal d-th root of `r` by Newton iteration from 1; `r` must be close to 1.
fn root_near_one(r: &HpComplex, d: usize, bits: usize) -> HpComplex {
    let one = HpComplex::from_c64(Complex64::new(1.0, 0.0), bits);
    let dd = real(d as f64, bits);
    let mut y = one;
    for _ in 0..(bits.ilog2() as usize + 8) {
        let yd1 = y.powu(d - 1, bits);
        let num = y.mul(&yd1).sub(r);
        let den = yd1.scale(&dd);
        y = y.sub(&num.div(&den));
    }
    y
}

/// `z·∏_{k<terms} (f(z_k)/z_k^d)^{1/d^{k+1}}` with nested principal roots.
///
/// Valid where every factor is close to 1, i.e. `|z|` well above the escape radius.
pub fn boettcher_product(f: &MarkedPolynomial, z: Complex64, bits: usize, terms: usize) -> Complex64 {
    let d = f.degree();
    let coeffs = hp_coefficients(f, bits);
    let mut zk = HpComplex::from_c64(z, bits);
    let mut phi = zk.clone();
    for k in 0..terms {
        let next = hp_eval(&coeffs, &zk);
        let mut factor = next.div(&zk.powu(d, bits));
        for _ in 0..=k {
            factor = root_near_one(&factor, d, bits);
        }
        phi = phi.mul(&factor);
        zk = next;
    }
    phi.to_c64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_power_brute_force_is_log_modulus() {
        let f = MarkedPolynomial::unicritical(3, Complex64::new(0.0, 0.0));
        let g = green_brute_force(&f, Complex64::new(1.5, 2.0), 128, 20);
        assert!((g - 2.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn newton_root_is_principal() {
        let r = HpComplex::from_c64(Complex64::new(1.1, -0.2), 128);
        let y = root_near_one(&r, 3, 128).to_c64();
        let expect = Complex64::new(1.1, -0.2).powf(1.0 / 3.0);
        assert!((y - expect).norm() < 1e-14);
    }
}
