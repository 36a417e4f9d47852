//! Cell structure on normalized shift-locus heights.
//!
//! A normalized height vector `1 = h_1 >= h_2 >= ... >= h_{d-1} > 0` with `N`
//! independence classes is written as `h_i = g_{j(i)} d^{-n_i}` with anchors
//! `1 = g_0 < g_1 < ... < g_{N-1} < d`. The integer data `(j(i), n_i)` of the
//! coordinates `i >= 2` is the cell label; the anchors range over an open
//! simplex through `g_{j+1} = g_j + (d-1) x_j`.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{subannuli, HeightsError};
use crate::escape::HeightsVector;

/// Class index and exponent of one non-leading coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelEntry {
    pub class: usize,
    pub exponent: u32,
}

impl LabelEntry {
    /// Coordinates sort by decreasing height: exponent up, then class down.
    fn key(&self) -> (u32, std::cmp::Reverse<usize>) {
        (self.exponent, std::cmp::Reverse(self.class))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellLabel {
    pub d: usize,
    /// One entry per coordinate `h_2..h_{d-1}`, in decreasing height order.
    pub entries: Vec<LabelEntry>,
}

impl CellLabel {
    /// Canonicalizes entry order; `None` unless the classes in use are `0..N`
    /// and every non-anchor class sits strictly below the leading height.
    pub fn new(d: usize, mut entries: Vec<LabelEntry>) -> Option<Self> {
        if d < 2 || entries.len() != d - 2 {
            return None;
        }
        entries.sort_by_key(LabelEntry::key);
        let used: BTreeSet<usize> = entries.iter().map(|e| e.class).chain([0]).collect();
        let contiguous = used.iter().enumerate().all(|(i, &c)| i == c);
        let valid = entries.iter().all(|e| e.class == 0 || e.exponent >= 1) && contiguous && used.len() < d;
        valid.then_some(Self { d, entries })
    }

    pub fn n_classes(&self) -> usize {
        1 + self.entries.iter().map(|e| e.class).max().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.n_classes() - 1
    }

    pub fn max_exponent(&self) -> u32 {
        self.entries.iter().map(|e| e.exponent).max().unwrap_or(0)
    }

    /// Coordinate indices (0-based, sorted order) grouped by class.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0]; 1];
        out.resize(self.n_classes(), Vec::new());
        for (i, e) in self.entries.iter().enumerate() {
            out[e.class].push(i + 1);
        }
        out
    }
}

/// Heights at barycentric point `x` (length `N`, non-negative, summing to 1).
pub fn chart(label: &CellLabel, x: &[f64]) -> Result<HeightsVector, HeightsError> {
    let n = label.n_classes();
    if x.len() != n || x.iter().any(|v| !(*v >= 0.0)) || (x.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(HeightsError::BadBarycentric { expected: n });
    }
    let df = label.d as f64;
    let mut g = vec![1.0; n];
    for j in 1..n {
        g[j] = g[j - 1] + (df - 1.0) * x[j - 1];
    }
    let mut h = vec![1.0];
    h.extend(label.entries.iter().map(|e| g[e.class] * df.powi(-(e.exponent as i32))));
    Ok(HeightsVector::new(label.d, h).expect("positive heights"))
}

/// The cell containing `h` (after normalization) and its barycentric coordinates.
pub fn classify(h: &HeightsVector, rel_tol: f64) -> Result<(CellLabel, Vec<f64>), HeightsError> {
    let max = h.max();
    if !(max > 0.0) {
        return Err(HeightsError::ZeroHeight { index: 0 });
    }
    let h = h.scaled(1.0 / max);
    let dec = subannuli(&h, rel_tol)?;
    let mut entries = Vec::with_capacity(h.d - 2);
    for (class, members) in dec.partition.classes.iter().enumerate() {
        for &i in members.iter().filter(|&&i| i != 0) {
            entries.push(LabelEntry { class, exponent: dec.exponents[i].max(0) as u32 });
        }
    }
    let label = CellLabel::new(h.d, entries).expect("decomposition yields a valid label");
    let x = super::simplex_coords(&dec)?;
    Ok((label, x))
}

/// Codimension-one faces, one per barycentric coordinate sent to zero.
pub fn facets(label: &CellLabel) -> Vec<CellLabel> {
    let n = label.n_classes();
    if n == 1 {
        return Vec::new();
    }
    (0..n)
        .map(|k| {
            let entries = label
                .entries
                .iter()
                .map(|e| {
                    if k + 1 < n {
                        // g_{k+1} meets g_k: fold class k+1 down.
                        let class = if e.class > k { e.class - 1 } else { e.class };
                        LabelEntry { class, exponent: e.exponent }
                    } else if e.class == n - 1 {
                        // g_{N-1} meets d g_0.
                        LabelEntry { class: 0, exponent: e.exponent - 1 }
                    } else {
                        *e
                    }
                })
                .collect();
            CellLabel::new(label.d, entries).expect("facet label is valid")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub dim: usize,
    pub label: CellLabel,
    /// Ids of the codimension-one faces, in barycentric-coordinate order.
    pub faces: Vec<usize>,
    /// Heights at the barycenter.
    pub sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightComplex {
    pub d: usize,
    pub depth: u32,
    pub cells: Vec<Cell>,
}

impl HeightComplex {
    pub fn count_by_dim(&self) -> Vec<usize> {
        let top = self.cells.iter().map(|c| c.dim).max().unwrap_or(0);
        let mut out = vec![0; top + 1];
        for c in &self.cells {
            out[c.dim] += 1;
        }
        out
    }

    pub fn cells_of_dim(&self, dim: usize) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(move |c| c.dim == dim)
    }

    pub fn find(&self, label: &CellLabel) -> Option<&Cell> {
        self.cells.iter().find(|c| &c.label == label)
    }
}

fn extend_labels(d: usize, prefix: Vec<LabelEntry>, options: &[LabelEntry], out: &mut Vec<Vec<LabelEntry>>) {
    if prefix.len() == d - 2 {
        out.push(prefix);
        return;
    }
    let start = prefix.last().map(|last| options.iter().position(|o| o == last).unwrap()).unwrap_or(0);
    for o in &options[start..] {
        let mut next = prefix.clone();
        next.push(*o);
        extend_labels(d, next, options, out);
    }
}

/// All cells whose exponents are at most `depth`, with their face incidences.
pub fn build_height_complex(d: usize, depth: u32) -> HeightComplex {
    assert!(d >= 2, "degree must be at least 2");
    let mut options: Vec<LabelEntry> = (0..=depth)
        .flat_map(|exponent| (0..d - 1).map(move |class| LabelEntry { class, exponent }))
        .filter(|e| e.class == 0 || e.exponent >= 1)
        .collect();
    options.sort_by_key(LabelEntry::key);

    // Split by first entry so the enumeration runs in parallel; results are sorted afterwards.
    let mut labels: Vec<CellLabel> = if d == 2 {
        vec![CellLabel::new(2, Vec::new()).unwrap()]
    } else {
        (0..options.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut raw = Vec::new();
                extend_labels(d, vec![options[i]], &options[i..], &mut raw);
                raw.into_iter().filter_map(|e| CellLabel::new(d, e)).collect::<Vec<_>>()
            })
            .collect()
    };
    labels.sort_by(|a, b| (a.dim(), &a.entries).cmp(&(b.dim(), &b.entries)));
    let index: HashMap<&CellLabel, usize> = labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let cells = labels
        .iter()
        .enumerate()
        .map(|(id, label)| {
            let n = label.n_classes();
            let faces = facets(label).iter().map(|f| index[f]).collect();
            let sample = chart(label, &vec![1.0 / n as f64; n]).expect("barycenter").heights;
            Cell { id, dim: n - 1, label: label.clone(), faces, sample }
        })
        .collect();
    HeightComplex { d, depth, cells }
}

/// Heights along an edge: class-1 coordinates are `(1 + (d-1)x) d^{-n}`.
pub fn edge_param(cell: &Cell, x: f64) -> Result<HeightsVector, HeightsError> {
    if cell.dim != 1 {
        return Err(HeightsError::NotAnEdge { dim: cell.dim });
    }
    chart(&cell.label, &[x, 1.0 - x])
}
