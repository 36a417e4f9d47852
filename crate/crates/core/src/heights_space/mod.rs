//! Arithmetic of the heights sector: independence classes, fundamental
//! subannuli, the wring action, and the simplicial complex on normalized
//! shift-locus heights.

mod complex;

pub use complex::{
    build_height_complex, chart, classify, edge_param, facets, Cell, CellLabel, HeightComplex, LabelEntry,
};

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escape::HeightsVector;

pub const DEFAULT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeightsError {
    #[error("height coordinate {index} is zero; independence is only defined in the shift locus")]
    ZeroHeight { index: usize },
    #[error("lifted heights of classes {first} and {second} coincide; the classes should have merged")]
    DegenerateLift { first: usize, second: usize },
    #[error("maximal height is {max}, expected 1")]
    NotNormalized { max: f64 },
    #[error("cell of dimension {dim} cannot be parameterized as an edge")]
    NotAnEdge { dim: usize },
    #[error("barycentric coordinates must be {expected} non-negative numbers summing to 1")]
    BadBarycentric { expected: usize },
}

/// Partition of the sorted coordinate indices `0..d-1` into independence classes.
///
/// Classes are ordered by their smallest index, so class 0 holds coordinate 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub classes: Vec<Vec<usize>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, index: usize) -> usize {
        self.classes.iter().position(|c| c.contains(&index)).expect("index in partition")
    }
}

/// Exponent `n` with `x ≈ d^n y` at relative tolerance `rel_tol`, searching `|n| <= bound`.
pub fn dependence_exponent(x: f64, y: f64, d: usize, rel_tol: f64, bound: i32) -> Option<i32> {
    let df = d as f64;
    let guess = ((x / y).ln() / df.ln()).round() as i32;
    (guess - 1..=guess + 1).filter(|n| n.abs() <= bound).find(|&n| (x - df.powi(n) * y).abs() <= rel_tol * x)
}

fn exponent_bound(h: &HeightsVector) -> i32 {
    let ratio = h.max() / h.min();
    (ratio.ln() / (h.d as f64).ln()).ceil() as i32 + 2
}

fn check_positive(h: &HeightsVector) -> Result<(), HeightsError> {
    match h.heights.iter().position(|&x| !(x > 0.0)) {
        Some(index) => Err(HeightsError::ZeroHeight { index }),
        None => Ok(()),
    }
}

/// `i ~ j` iff `h_i = d^n h_j` for an integer `n`, at relative tolerance `rel_tol`.
pub fn independence_classes(h: &HeightsVector, rel_tol: f64) -> Result<Partition, HeightsError> {
    check_positive(h)?;
    let bound = exponent_bound(h);
    let k = h.heights.len();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..k {
        for j in i + 1..k {
            if dependence_exponent(h.heights[i], h.heights[j], h.d, rel_tol, bound).is_some() {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut root_slot: Vec<Option<usize>> = vec![None; k];
    for i in 0..k {
        let r = find(&mut parent, i);
        match root_slot[r] {
            Some(s) => classes[s].push(i),
            None => {
                root_slot[r] = Some(classes.len());
                classes.push(vec![i]);
            }
        }
    }
    Ok(Partition { classes })
}

/// Fundamental subannuli of the annulus `{M < G < dM}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubannuliDecomposition {
    pub d: usize,
    /// Independence classes, reordered so that `lifted` increases.
    pub partition: Partition,
    pub representatives: Vec<f64>,
    /// `l(c_j)`: least integer with `d^l h_j >= M`.
    pub levels: Vec<i32>,
    /// `d^{l_j} h_j ∈ [M, dM)`, strictly increasing; `lifted[0] = M`.
    pub lifted: Vec<f64>,
    pub moduli: Vec<f64>,
    pub max: f64,
    /// Per sorted coordinate `i`: `h_i = lifted[class(i)] · d^{-exponents[i]}`.
    pub exponents: Vec<i32>,
}

impl SubannuliDecomposition {
    pub fn n_classes(&self) -> usize {
        self.lifted.len()
    }
}

/// The `N × N` integer matrix taking sorted lifted heights to `2π ×` moduli:
/// `-1` on the diagonal, `+1` on the superdiagonal, `d` added in the bottom-left corner.
pub fn moduli_matrix(d: usize, n: usize) -> Vec<Vec<i64>> {
    let mut k = vec![vec![0i64; n]; n];
    for j in 0..n {
        k[j][j] = -1;
        if j + 1 < n {
            k[j][j + 1] = 1;
        }
    }
    k[n - 1][0] += d as i64;
    k
}

/// Exact determinant by fraction-free (Bareiss) elimination.
pub fn integer_determinant(m: &[Vec<i64>]) -> i128 {
    let n = m.len();
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&x| x as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n {
        if a[k][k] == 0 {
            match (k + 1..n).find(|&r| a[r][k] != 0) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

pub fn subannuli(h: &HeightsVector, rel_tol: f64) -> Result<SubannuliDecomposition, HeightsError> {
    let partition = independence_classes(h, rel_tol)?;
    let d = h.d;
    let df = d as f64;
    let max = h.max();
    let mut rows: Vec<(f64, i32, f64, Vec<usize>)> = partition
        .classes
        .iter()
        .enumerate()
        .map(|(ci, class)| {
            let rep = h.heights[class[0]];
            if ci == 0 {
                return (rep, 0, max, class.clone());
            }
            let mut l = ((max / rep).ln() / df.ln()).floor() as i32;
            while df.powi(l) * rep < max {
                l += 1;
            }
            while df.powi(l - 1) * rep >= max {
                l -= 1;
            }
            (rep, l, df.powi(l) * rep, class.clone())
        })
        .collect();
    rows.sort_by(|a, b| a.2.total_cmp(&b.2));
    for j in 0..rows.len() {
        let next = if j + 1 < rows.len() { rows[j + 1].2 } else { df * rows[0].2 };
        if (next - rows[j].2).abs() <= rel_tol * next {
            return Err(HeightsError::DegenerateLift { first: j, second: (j + 1) % rows.len() });
        }
    }
    let lifted: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut exponents = vec![0i32; h.heights.len()];
    for row in &rows {
        for &i in &row.3 {
            exponents[i] = ((row.2 / h.heights[i]).ln() / df.ln()).round() as i32;
        }
    }
    let n = lifted.len();
    let k = moduli_matrix(d, n);
    let moduli = k.iter().map(|row| row.iter().zip(&lifted).map(|(&a, g)| a as f64 * g).sum::<f64>() / TAU).collect();
    Ok(SubannuliDecomposition {
        d,
        partition: Partition { classes: rows.iter().map(|r| r.3.clone()).collect() },
        representatives: rows.iter().map(|r| r.0).collect(),
        levels: rows.iter().map(|r| r.1).collect(),
        lifted,
        moduli,
        max,
        exponents,
    })
}

pub fn stretch(h: &HeightsVector, s: f64) -> HeightsVector {
    assert!(s > 0.0, "stretch factor must be positive");
    h.scaled(s)
}

/// `τ = t + is` in the upper half-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WringParameter {
    pub t: f64,
    pub s: f64,
}

impl WringParameter {
    pub fn new(t: f64, s: f64) -> Option<Self> {
        (s > 0.0).then_some(Self { t, s })
    }
}

/// Per-subannulus wring parameters `2π m_j t / ((d-1) M) + is`.
pub fn wring_vector(dec: &SubannuliDecomposition, tau: WringParameter) -> Vec<Complex64> {
    let denom = (dec.d as f64 - 1.0) * dec.max;
    dec.moduli.iter().map(|m| Complex64::new(TAU * m * tau.t / denom, tau.s)).collect()
}

/// Barycentric coordinates `x_j = 2π m_j / (d-1)` of a normalized decomposition.
pub fn simplex_coords(dec: &SubannuliDecomposition) -> Result<Vec<f64>, HeightsError> {
    if (dec.max - 1.0).abs() > 1e-12 {
        return Err(HeightsError::NotNormalized { max: dec.max });
    }
    let scale = TAU / (dec.d as f64 - 1.0);
    Ok(dec.moduli.iter().map(|m| m * scale).collect())
}

/// Heights on the stretch orbit of `dec` with barycentric coordinates `x`
/// (maximal height kept at `dec.max`).
pub fn heights_from_simplex(dec: &SubannuliDecomposition, x: &[f64]) -> Result<HeightsVector, HeightsError> {
    let n = dec.n_classes();
    if x.len() != n || x.iter().any(|v| !(*v >= 0.0)) || (x.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(HeightsError::BadBarycentric { expected: n });
    }
    let df = dec.d as f64;
    let mut g = vec![1.0; n];
    for j in 1..n {
        g[j] = g[j - 1] + (df - 1.0) * x[j - 1];
    }
    let mut out = vec![0.0; dec.d - 1];
    for (j, class) in dec.partition.classes.iter().enumerate() {
        for &i in class {
            out[i] = dec.max * g[j] * df.powi(-dec.exponents[i]);
        }
    }
    Ok(HeightsVector::new(dec.d, out).expect("positive heights"))
}
