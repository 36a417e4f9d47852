//! Finite truncations of the polynomial tree.
//!
//! Vertices are the connected components of level sets `{G = t}` at heights
//! `t` in the grand-orbit lattice of the escaping critical heights, plus
//! leaves at the truncation floor. Components are found by flood fill on
//! sampled grids: one grid over the whole escape box for the root, and for
//! every vertex a fresh grid over its bounding box in which its children are
//! labeled. Each vertex is identified with a component of `{G < t + η}`, with
//! `η` half the distance to the next vertex height above. `G` has no critical
//! values in `(t, t + η]`, so this is the closed sublevel component of `t`
//! (lobes of a critical level curve glued at the saddle) thickened enough for
//! the neck at the saddle to show up on a grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escape::{green_unchecked, marked_heights, EscapeBudget};
use crate::heights_space::dependence_exponent;
use crate::poly::MarkedPolynomial;

const CLASS_TOL: f64 = 1e-9;
const MAX_VERTICES: usize = 4000;
const NONE: u32 = u32::MAX;

#[derive(Debug, Error, Clone)]
pub enum TreeError {
    #[error("floor must be a positive finite number, got {0}")]
    InvalidFloor(f64),
    #[error("grid resolution must be a power of two >= 8, got {0}")]
    InvalidGrid(usize),
    #[error("tree changed between the two finest resolutions (last at {resolution})")]
    UnstableAtResolution { tree: Box<PolyTree>, resolution: usize },
    #[error("grid extraction failed at every resolution up to {resolution}: {reason}")]
    GridFailure { resolution: usize, reason: String },
    #[error("trees are truncated at different levels ({0:?} vs {1:?})")]
    LevelMismatch(Option<u32>, Option<u32>),
    #[error("floor {floor} lies above the lowest critical height {lowest}")]
    InsufficientDepth { floor: f64, lowest: f64 },
    #[error("twist periods need a tree in the shift locus")]
    NotShiftLocus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per side of every sampled grid; a power of two.
    pub resolution: usize,
    /// Number of doublings allowed while looking for a stable tree.
    pub refinement_limit: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { resolution: 64, refinement_limit: 3 }
    }
}

/// Exact name of a vertex height: `class_lifts[class] · d^{-exponent}`, or the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeightLabel {
    Lattice { class: usize, exponent: i32 },
    Floor,
}

impl HeightLabel {
    /// Label of `d · height`, when it is a lattice height.
    pub fn image(&self) -> Option<HeightLabel> {
        match *self {
            HeightLabel::Lattice { class, exponent } => Some(HeightLabel::Lattice { class, exponent: exponent - 1 }),
            HeightLabel::Floor => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeVertex {
    pub id: usize,
    pub height: f64,
    pub label: HeightLabel,
    pub local_degree: usize,
    pub level: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub child: usize,
    pub parent: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTree {
    pub d: usize,
    pub vertices: Vec<TreeVertex>,
    pub edges: Vec<TreeEdge>,
    pub dynamics: BTreeMap<usize, usize>,
    pub base_height: f64,
    /// Maximal critical height `M` (0 for the trivial tree).
    pub max_height: f64,
    pub trivial: bool,
    /// Lattice anchors: one lifted height in `[M, dM)` per independence class.
    pub class_lifts: Vec<f64>,
    /// Lattice label of each marked critical point, `None` if it does not escape.
    pub critical_labels: Vec<Option<HeightLabel>>,
    pub truncation: Option<u32>,
    pub resolution: usize,
    pub unstable: bool,
}

impl PolyTree {
    pub fn vertex(&self, id: usize) -> Option<&TreeVertex> {
        self.vertices.binary_search_by_key(&id, |v| v.id).ok().map(|i| &self.vertices[i])
    }

    pub fn parent_edge(&self, id: usize) -> Option<&TreeEdge> {
        self.edges.iter().find(|e| e.child == id)
    }

    pub fn children(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.parent == id).map(|e| e.child).collect()
    }

    pub fn root(&self) -> Option<usize> {
        self.vertices.iter().map(|v| v.id).find(|&id| self.parent_edge(id).is_none())
    }

    /// Lowest positive critical height, if any critical point escapes.
    pub fn lowest_critical_height(&self) -> Option<f64> {
        self.critical_labels.iter().flatten().map(|l| self.label_height(l)).min_by(f64::total_cmp)
    }

    pub fn label_height(&self, label: &HeightLabel) -> f64 {
        match *label {
            HeightLabel::Lattice { class, exponent } => lattice_height(self.class_lifts[class], self.d, exponent),
            HeightLabel::Floor => self.base_height,
        }
    }

    /// Graphviz description with heights and degrees as attributes.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tree {\n  rankdir=BT;\n");
        for v in &self.vertices {
            let _ = writeln!(
                s,
                "  v{} [label=\"{:.6}\", height={:.12}, level={}, local_degree={}];",
                v.id, v.height, v.height, v.level, v.local_degree
            );
        }
        for e in &self.edges {
            let _ = writeln!(s, "  v{} -> v{} [degree={}, label=\"{}\"];", e.child, e.parent, e.degree, e.degree);
        }
        for (a, b) in &self.dynamics {
            let _ = writeln!(s, "  v{a} -> v{b} [style=dashed, constraint=false, color=gray];");
        }
        s.push_str("}\n");
        s
    }
}

fn lattice_height(lift: f64, d: usize, exponent: i32) -> f64 {
    lift * (d as f64).powi(-exponent)
}

/// Independence classes of the positive critical heights, anchored in `[M, dM)`.
struct Lattice {
    d: usize,
    lifts: Vec<f64>,
    labels: Vec<Option<HeightLabel>>,
    max: f64,
}

impl Lattice {
    fn new(d: usize, heights: &[Option<f64>]) -> Self {
        let df = d as f64;
        let max = heights.iter().flatten().cloned().fold(0.0, f64::max);
        let min = heights.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let bound = ((max / min).ln() / df.ln()).ceil() as i32 + 2;
        let mut lifts: Vec<f64> = Vec::new();
        let mut class_of = vec![None; heights.len()];
        let mut order: Vec<usize> = (0..heights.len()).filter(|&i| heights[i].is_some()).collect();
        order.sort_by(|&a, &b| heights[b].unwrap().total_cmp(&heights[a].unwrap()));
        for i in order {
            let h = heights[i].unwrap();
            let found = lifts.iter().position(|&g| dependence_exponent(g, h, d, CLASS_TOL, bound + 1).is_some());
            class_of[i] = Some(match found {
                Some(k) => k,
                None => {
                    let mut l = ((max / h).ln() / df.ln()).floor() as i32;
                    while h * df.powi(l) < max {
                        l += 1;
                    }
                    while l > 0 && h * df.powi(l - 1) >= max {
                        l -= 1;
                    }
                    lifts.push(h * df.powi(l));
                    lifts.len() - 1
                }
            });
        }
        let mut perm: Vec<usize> = (0..lifts.len()).collect();
        perm.sort_by(|&a, &b| lifts[a].total_cmp(&lifts[b]));
        let mut rank = vec![0; lifts.len()];
        for (r, &k) in perm.iter().enumerate() {
            rank[k] = r;
        }
        let sorted: Vec<f64> = perm.iter().map(|&k| lifts[k]).collect();
        let labels = heights
            .iter()
            .zip(&class_of)
            .map(|(h, c)| {
                let (h, c) = ((*h)?, (*c)?);
                let class = rank[c];
                let exponent = ((sorted[class] / h).ln() / df.ln()).round() as i32;
                Some(HeightLabel::Lattice { class, exponent })
            })
            .collect();
        Self { d, lifts: sorted, labels, max }
    }

    fn height(&self, label: &HeightLabel, floor: f64) -> f64 {
        match *label {
            HeightLabel::Lattice { class, exponent } => lattice_height(self.lifts[class], self.d, exponent),
            HeightLabel::Floor => floor,
        }
    }

    /// Vertex heights from `dM` down to the floor, highest first.
    fn levels(&self, floor: f64) -> Vec<HeightLabel> {
        let mut out = vec![];
        for (class, &g) in self.lifts.iter().enumerate() {
            let mut exponent = if class == 0 { -1 } else { 0 };
            while lattice_height(g, self.d, exponent) >= floor * (1.0 - 1e-12) {
                out.push(HeightLabel::Lattice { class, exponent });
                exponent += 1;
            }
        }
        out.sort_by(|a, b| self.height(b, floor).total_cmp(&self.height(a, floor)));
        let lowest = out.last().map(|l| self.height(l, floor)).unwrap_or(f64::INFINITY);
        if floor < lowest * (1.0 - 1e-9) {
            out.push(HeightLabel::Floor);
        }
        out
    }

    fn level_of(&self, label: &HeightLabel, floor: f64) -> i32 {
        match *label {
            HeightLabel::Lattice { exponent, .. } => exponent,
            HeightLabel::Floor => {
                let df = self.d as f64;
                let mut l = ((self.max / floor).ln() / df.ln()).floor() as i32 - 1;
                while floor * df.powi(l) < self.max {
                    l += 1;
                }
                l
            }
        }
    }
}

/// `G` sampled at the centers of a square grid, with component labels.
struct Grid {
    x0: f64,
    y0: f64,
    step: f64,
    res: usize,
    values: Vec<f64>,
    labels: Vec<u32>,
    pixels: Vec<Vec<usize>>,
    /// Tree vertex owning each component, `usize::MAX` for discarded ones.
    owners: Vec<usize>,
}

impl Grid {
    fn sample(f: &MarkedPolynomial, center: Complex64, half: f64, res: usize, budget: &EscapeBudget) -> Self {
        let step = 2.0 * half / res as f64;
        let (x0, y0) = (center.re - half, center.im - half);
        let values = (0..res * res)
            .into_par_iter()
            .map(|k| {
                let z = Complex64::new(x0 + ((k % res) as f64 + 0.5) * step, y0 + ((k / res) as f64 + 0.5) * step);
                green_unchecked(f, z, budget).value
            })
            .collect();
        Self { x0, y0, step, res, values, labels: vec![], pixels: vec![], owners: vec![] }
    }

    fn point(&self, k: usize) -> Complex64 {
        Complex64::new(
            self.x0 + ((k % self.res) as f64 + 0.5) * self.step,
            self.y0 + ((k / self.res) as f64 + 0.5) * self.step,
        )
    }

    fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j, r) = (k % self.res, k / self.res, self.res);
        [(i > 0).then(|| k - 1), (i + 1 < r).then(|| k + 1), (j > 0).then(|| k - r), (j + 1 < r).then(|| k + r)]
            .into_iter()
            .flatten()
    }

    /// Labels components of `{G < threshold}`; those touching the border are dropped.
    fn label_components(&mut self, threshold: f64) {
        let r = self.res;
        self.labels = vec![NONE; r * r];
        self.pixels.clear();
        let mut seen = vec![false; r * r];
        let mut stack = Vec::new();
        for start in 0..r * r {
            if seen[start] || self.values[start] >= threshold {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut members = Vec::new();
            let mut touches = false;
            while let Some(k) = stack.pop() {
                members.push(k);
                let (i, j) = (k % r, k / r);
                touches |= i == 0 || j == 0 || i + 1 == r || j + 1 == r;
                for n in self.neighbors(k).collect::<Vec<_>>() {
                    if !seen[n] && self.values[n] < threshold {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
            if !touches {
                let id = self.pixels.len() as u32;
                for &k in &members {
                    self.labels[k] = id;
                }
                self.pixels.push(members);
            }
        }
        self.owners = vec![usize::MAX; self.pixels.len()];
    }

    /// Component containing `z`; nearby pixels vote when `z`'s own pixel is unlabeled.
    fn lookup(&self, z: Complex64) -> Option<u32> {
        let fi = ((z.re - self.x0) / self.step).floor();
        let fj = ((z.im - self.y0) / self.step).floor();
        let r = self.res as isize;
        if !(fi >= -2.0 && fj >= -2.0 && fi < (r + 2) as f64 && fj < (r + 2) as f64) {
            return None;
        }
        let (i, j) = (fi as isize, fj as isize);
        if (0..r).contains(&i) && (0..r).contains(&j) {
            let own = self.labels[(j * r + i) as usize];
            if own != NONE {
                return Some(own);
            }
        }
        let mut found = None;
        for dj in -2..=2 {
            for di in -2..=2 {
                let (a, b) = (i + di, j + dj);
                if !(0..r).contains(&a) || !(0..r).contains(&b) {
                    continue;
                }
                let l = self.labels[(b * r + a) as usize];
                if l == NONE {
                    continue;
                }
                match found {
                    None => found = Some(l),
                    Some(prev) if prev != l => return None,
                    _ => {}
                }
            }
        }
        found
    }

    fn bounding_square(&self, comp: u32) -> (Complex64, f64) {
        let px = &self.pixels[comp as usize];
        let (mut imin, mut imax, mut jmin, mut jmax) = (usize::MAX, 0, usize::MAX, 0);
        for &k in px {
            let (i, j) = (k % self.res, k / self.res);
            imin = imin.min(i);
            imax = imax.max(i);
            jmin = jmin.min(j);
            jmax = jmax.max(j);
        }
        let lo = self.point(jmin * self.res + imin);
        let hi = self.point(jmax * self.res + imax);
        let half = 0.5 * (hi.re - lo.re).max(hi.im - lo.im) + 2.5 * self.step;
        (0.5 * (lo + hi), half)
    }
}

struct Node {
    label: HeightLabel,
    level_index: usize,
    parent: Option<usize>,
    grid: usize,
    comp: u32,
    child_grid: Option<usize>,
}

struct Extraction {
    grids: Vec<Grid>,
    nodes: Vec<Node>,
}

impl Extraction {
    /// Deepest vertex at level index `<= target` whose region contains `z`.
    fn locate(&self, z: Complex64, target: usize) -> Option<usize> {
        let root = &self.nodes[0];
        if self.grids[root.grid].lookup(z)? != root.comp {
            return None;
        }
        let mut u = 0;
        while self.nodes[u].level_index < target {
            let g = &self.grids[self.nodes[u].child_grid?];
            let owner = g.owners[g.lookup(z)? as usize];
            if owner == usize::MAX {
                return None;
            }
            u = owner;
        }
        Some(u)
    }
}

fn budget_for(f: &MarkedPolynomial) -> EscapeBudget {
    EscapeBudget { escape_radius: f.escape_radius().max(2.0), max_iterations: 400, target_tolerance: 1e-12 }
}

fn trivial_tree(d: usize, floor: f64, n_crit: usize) -> PolyTree {
    let vertices = (0..3)
        .map(|k| TreeVertex {
            id: k,
            height: lattice_height(floor, d, -(k as i32)),
            label: HeightLabel::Lattice { class: 0, exponent: -(k as i32) },
            local_degree: 1,
            level: -(k as i32),
        })
        .collect();
    let edges = (0..2).map(|k| TreeEdge { child: k, parent: k + 1, degree: d }).collect();
    PolyTree {
        d,
        vertices,
        edges,
        dynamics: [(0, 1), (1, 2)].into_iter().collect(),
        base_height: floor,
        max_height: 0.0,
        trivial: true,
        class_lifts: vec![floor],
        critical_labels: vec![None; n_crit],
        truncation: None,
        resolution: 0,
        unstable: false,
    }
}

fn extract(f: &MarkedPolynomial, lattice: &Lattice, floor: f64, res: usize) -> Result<PolyTree, String> {
    let d = f.degree();
    let df = d as f64;
    let budget = budget_for(f);
    let levels = lattice.levels(floor);
    let heights: Vec<f64> = levels.iter().map(|l| lattice.height(l, floor)).collect();
    let top = heights[0];

    // G has no critical values above M, so any margin works for the root.
    let root_threshold = top + 0.1 * (top - heights.get(1).copied().unwrap_or(0.0));
    // Outside |z| = B the escape rate exceeds log|z| - log 2 > root_threshold.
    let half = f.escape_radius().max(2.2 * root_threshold.exp());
    let mut root_grid = Grid::sample(f, Complex64::new(0.0, 0.0), half, res, &budget);
    root_grid.label_components(root_threshold);
    if root_grid.pixels.len() != 1 {
        return Err(format!("{} components at the root level", root_grid.pixels.len()));
    }
    root_grid.owners[0] = 0;
    let mut ex = Extraction {
        grids: vec![root_grid],
        nodes: vec![Node { label: levels[0], level_index: 0, parent: None, grid: 0, comp: 0, child_grid: None }],
    };

    let mut frontier = vec![0usize];
    for li in 1..levels.len() {
        let level = heights[li];
        let gap = heights[li - 1] - level;
        let mut next = Vec::new();
        for &v in &frontier {
            let (center, half) = {
                let n = &ex.nodes[v];
                ex.grids[n.grid].bounding_square(n.comp)
            };
            let mut grid = Grid::sample(f, center, half, res, &budget);
            grid.label_components(level + 0.5 * gap);
            let gi = ex.grids.len();
            let parent_grid = &ex.grids[ex.nodes[v].grid];
            let parent_comp = ex.nodes[v].comp;
            for c in 0..grid.pixels.len() {
                let deepest =
                    *grid.pixels[c].iter().min_by(|&&a, &&b| grid.values[a].total_cmp(&grid.values[b])).unwrap();
                if parent_grid.lookup(grid.point(deepest)) != Some(parent_comp) {
                    continue;
                }
                let id = ex.nodes.len();
                grid.owners[c] = id;
                ex.nodes.push(Node {
                    label: levels[li],
                    level_index: li,
                    parent: Some(v),
                    grid: gi,
                    comp: c as u32,
                    child_grid: None,
                });
                next.push(id);
            }
            if !next.iter().any(|&c| ex.nodes[c].parent == Some(v)) {
                return Err(format!("vertex at height {} has no children", heights[li - 1]));
            }
            ex.nodes[v].child_grid = Some(gi);
            ex.grids.push(grid);
            if ex.nodes.len() > MAX_VERTICES {
                return Err("too many vertices".into());
            }
        }
        frontier = next;
    }

    // Where each critical point sits.
    let bottom = levels.len() - 1;
    let mut crit_vertex = Vec::new();
    for (i, &c) in f.critical_points().iter().enumerate() {
        let target = match lattice.labels[i] {
            Some(l) => levels.iter().position(|x| *x == l).unwrap_or(bottom),
            None => bottom,
        };
        let v = ex.locate(c, target).ok_or_else(|| format!("critical point {i} not located"))?;
        if ex.nodes[v].level_index != target {
            return Err(format!("critical point {i} stopped above its level"));
        }
        crit_vertex.push(v);
    }
    let n = ex.nodes.len();
    let mut on_vertex = vec![0usize; n];
    let mut below = vec![0usize; n];
    for (i, &v) in crit_vertex.iter().enumerate() {
        if lattice.labels[i].is_some() && lattice.labels[i] == Some(ex.nodes[v].label) {
            on_vertex[v] += 1;
        }
        let mut u = Some(v);
        while let Some(w) = u {
            below[w] += 1;
            u = ex.nodes[w].parent;
        }
    }
    let edge_degree: Vec<usize> = below.iter().map(|b| b + 1).collect();

    // Dynamics from three deep samples per vertex.
    let mut dynamics = BTreeMap::new();
    for v in 1..n {
        let Some(image_label) = ex.nodes[v].label.image() else { continue };
        let Some(target) = levels.iter().position(|x| *x == image_label) else { continue };
        let grid = &ex.grids[ex.nodes[v].grid];
        let px = &grid.pixels[ex.nodes[v].comp as usize];
        let lowest = px.iter().map(|&k| grid.values[k]).fold(f64::INFINITY, f64::min);
        let cut = lowest + 0.5 * (heights[ex.nodes[v].level_index] - lowest).max(0.0);
        let deep: Vec<usize> = px.iter().cloned().filter(|&k| grid.values[k] <= cut).collect();
        let first = *deep.iter().min_by(|&&a, &&b| grid.values[a].total_cmp(&grid.values[b])).unwrap();
        let p0 = grid.point(first);
        let far = *deep
            .iter()
            .max_by(|&&a, &&b| (grid.point(a) - p0).norm().total_cmp(&(grid.point(b) - p0).norm()))
            .unwrap();
        let mut image = None;
        for k in [first, far, deep[deep.len() / 2]] {
            let w = ex
                .locate(f.evaluate(grid.point(k)), target)
                .ok_or_else(|| format!("image of vertex {v} not located"))?;
            if ex.nodes[w].label != image_label || image.is_some_and(|i| i != w) {
                return Err(format!("inconsistent image for vertex {v}"));
            }
            image = Some(w);
        }
        dynamics.insert(v, image.unwrap());
    }

    let children: Vec<Vec<usize>> = {
        let mut ch = vec![vec![]; n];
        for v in 1..n {
            ch[ex.nodes[v].parent.unwrap()].push(v);
        }
        ch
    };
    // Children of v cover the children of F(v) with total degree deg(v).
    for (&v, &w) in &dynamics {
        if children[v].iter().any(|c| !dynamics.contains_key(c)) {
            continue;
        }
        let mut cover: HashMap<usize, usize> = HashMap::new();
        for &c in &children[v] {
            let fc = dynamics[&c];
            if ex.nodes[fc].parent != Some(w) {
                return Err(format!("dynamics of vertex {v} does not commute with the parent map"));
            }
            *cover.entry(fc).or_default() += edge_degree[c];
        }
        if cover.len() != children[w].len() || cover.values().any(|&s| s != edge_degree[v]) {
            return Err(format!("degree bookkeeping fails below vertex {v}"));
        }
    }
    // Full preimages carry total degree d.
    for w in 0..n {
        let Some(HeightLabel::Lattice { class, exponent }) = Some(ex.nodes[w].label) else { continue };
        let pre = HeightLabel::Lattice { class, exponent: exponent + 1 };
        if !levels.contains(&pre) {
            continue;
        }
        let total: usize = dynamics.iter().filter(|(_, &x)| x == w).map(|(&v, _)| edge_degree[v]).sum();
        if total != d {
            return Err(format!("preimages of vertex {w} carry degree {total}"));
        }
    }

    let vertices = (0..n)
        .map(|v| TreeVertex {
            id: v,
            height: heights[ex.nodes[v].level_index],
            label: ex.nodes[v].label,
            local_degree: 1 + on_vertex[v],
            level: lattice.level_of(&ex.nodes[v].label, floor),
        })
        .collect();
    let edges =
        (1..n).map(|v| TreeEdge { child: v, parent: ex.nodes[v].parent.unwrap(), degree: edge_degree[v] }).collect();
    let _ = df;
    Ok(PolyTree {
        d,
        vertices,
        edges,
        dynamics,
        base_height: floor,
        max_height: lattice.max,
        trivial: false,
        class_lifts: lattice.lifts.clone(),
        critical_labels: lattice.labels.clone(),
        truncation: None,
        resolution: res,
        unstable: false,
    })
}

/// Tree of `f` down to `floor`, refined until two successive resolutions agree.
pub fn build_tree(f: &MarkedPolynomial, floor: f64, grid: GridSpec) -> Result<PolyTree, TreeError> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(TreeError::InvalidFloor(floor));
    }
    if grid.resolution < 8 || !grid.resolution.is_power_of_two() {
        return Err(TreeError::InvalidGrid(grid.resolution));
    }
    let budget = EscapeBudget { target_tolerance: 1e-13, ..EscapeBudget::default() };
    let raw = marked_heights(f, &budget);
    let heights: Vec<Option<f64>> = raw.iter().map(|e| (e.escaped && e.value > 0.0).then_some(e.value)).collect();
    if heights.iter().all(Option::is_none) {
        return Ok(trivial_tree(f.degree(), floor, heights.len()));
    }
    let lattice = Lattice::new(f.degree(), &heights);

    let mut previous: Option<PolyTree> = None;
    let mut last_reason = String::new();
    let mut res = grid.resolution;
    for _ in 0..=grid.refinement_limit {
        match extract(f, &lattice, floor, res) {
            Ok(t) => {
                if let Some(p) = &previous {
                    if iso_test(p, &t, 0.0).unwrap_or(false) {
                        return Ok(t);
                    }
                }
                log::debug!("tree at resolution {res}: {} vertices", t.vertices.len());
                previous = Some(t);
            }
            Err(reason) => {
                log::debug!("tree extraction at resolution {res} failed: {reason}");
                last_reason = reason;
                previous = None;
            }
        }
        res *= 2;
    }
    match previous {
        Some(mut t) => {
            t.unstable = true;
            let resolution = t.resolution;
            Err(TreeError::UnstableAtResolution { tree: Box::new(t), resolution })
        }
        None => Err(TreeError::GridFailure { resolution: res / 2, reason: last_reason }),
    }
}

/// Restriction to the vertices with `|level| < n`.
pub fn truncate(t: &PolyTree, n: u32) -> PolyTree {
    let keep = |id: usize| t.vertex(id).is_some_and(|v| v.level.unsigned_abs() < n);
    PolyTree {
        vertices: t.vertices.iter().filter(|v| keep(v.id)).cloned().collect(),
        edges: t.edges.iter().filter(|e| keep(e.child) && keep(e.parent)).cloned().collect(),
        dynamics: t.dynamics.iter().filter(|(&a, &b)| keep(a) && keep(b)).map(|(&a, &b)| (a, b)).collect(),
        truncation: Some(t.truncation.map_or(n, |m| m.min(n))),
        ..t.clone()
    }
}

fn signatures(t: &PolyTree) -> HashMap<usize, u64> {
    let mut order: Vec<&TreeVertex> = t.vertices.iter().collect();
    order.sort_by(|a, b| a.height.total_cmp(&b.height));
    let mut sig: HashMap<usize, u64> = HashMap::new();
    for v in order {
        let mut child: Vec<u64> = t.children(v.id).iter().map(|c| sig[c]).collect();
        child.sort_unstable();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (v.local_degree, v.level, t.parent_edge(v.id).map(|e| e.degree), t.dynamics.contains_key(&v.id), child)
            .hash(&mut h);
        sig.insert(v.id, h.finish());
    }
    sig
}

/// Whether some isomorphism of rooted trees respects local and edge degrees,
/// levels and dynamics, and moves every height by at most `eps`.
pub fn iso_test(t1: &PolyTree, t2: &PolyTree, eps: f64) -> Result<bool, TreeError> {
    if t1.truncation != t2.truncation {
        return Err(TreeError::LevelMismatch(t1.truncation, t2.truncation));
    }
    if t1.d != t2.d
        || t1.trivial != t2.trivial
        || t1.vertices.len() != t2.vertices.len()
        || t1.edges.len() != t2.edges.len()
        || t1.dynamics.len() != t2.dynamics.len()
    {
        return Ok(false);
    }
    let (s1, s2) = (signatures(t1), signatures(t2));
    let mut a: Vec<u64> = s1.values().cloned().collect();
    let mut b: Vec<u64> = s2.values().cloned().collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Ok(false);
    }
    let mut order: Vec<usize> = t1.vertices.iter().map(|v| v.id).collect();
    order.sort_by(|&x, &y| t2_height(t1, y).total_cmp(&t2_height(t1, x)).then(x.cmp(&y)));
    let parent1: HashMap<usize, usize> = t1.edges.iter().map(|e| (e.child, e.parent)).collect();
    let parent2: HashMap<usize, usize> = t2.edges.iter().map(|e| (e.child, e.parent)).collect();
    let roots2: Vec<usize> = t2.vertices.iter().map(|v| v.id).filter(|id| !parent2.contains_key(id)).collect();
    let mut children2: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in &t2.edges {
        children2.entry(e.parent).or_default().push(e.child);
    }

    struct Search<'a> {
        t1: &'a PolyTree,
        t2: &'a PolyTree,
        s1: &'a HashMap<usize, u64>,
        s2: &'a HashMap<usize, u64>,
        order: &'a [usize],
        parent1: &'a HashMap<usize, usize>,
        roots2: &'a [usize],
        children2: &'a HashMap<usize, Vec<usize>>,
        eps: f64,
        map: HashMap<usize, usize>,
        used: std::collections::HashSet<usize>,
    }
    impl Search<'_> {
        fn run(&mut self, k: usize) -> bool {
            let Some(&v) = self.order.get(k) else { return true };
            let candidates: Vec<usize> = match self.parent1.get(&v) {
                Some(p) => self.children2.get(&self.map[p]).cloned().unwrap_or_default(),
                None => self.roots2.to_vec(),
            };
            let h1 = self.t1.vertex(v).unwrap().height;
            for w in candidates {
                if self.used.contains(&w) || self.s1[&v] != self.s2[&w] {
                    continue;
                }
                if (self.t2.vertex(w).unwrap().height - h1).abs() > self.eps {
                    continue;
                }
                let consistent = match (self.t1.dynamics.get(&v), self.t2.dynamics.get(&w)) {
                    (Some(fv), Some(fw)) => self.map.get(fv) == Some(fw),
                    (None, None) => true,
                    _ => false,
                };
                if !consistent {
                    continue;
                }
                self.map.insert(v, w);
                self.used.insert(w);
                if self.run(k + 1) {
                    return true;
                }
                self.map.remove(&v);
                self.used.remove(&w);
            }
            false
        }
    }
    let mut search = Search {
        t1,
        t2,
        s1: &s1,
        s2: &s2,
        order: &order,
        parent1: &parent1,
        roots2: &roots2,
        children2: &children2,
        eps,
        map: HashMap::new(),
        used: Default::default(),
    };
    Ok(search.run(0))
}

fn t2_height(t: &PolyTree, id: usize) -> f64 {
    t.vertex(id).unwrap().height
}

fn lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Per independence class `j`: the lcm, over vertices `v` of class `j` at
/// level `m >= 0`, of the degree of `F^{m+1}` on the edge above `v`.
pub fn twist_periods(t: &PolyTree) -> Result<Vec<u64>, TreeError> {
    if t.trivial {
        return Err(TreeError::NotShiftLocus);
    }
    let lowest = t.lowest_critical_height().ok_or(TreeError::NotShiftLocus)?;
    if t.base_height > lowest * (1.0 + 1e-12) {
        return Err(TreeError::InsufficientDepth { floor: t.base_height, lowest });
    }
    let degree: HashMap<usize, usize> = t.edges.iter().map(|e| (e.child, e.degree)).collect();
    let mut out = vec![1u64; t.class_lifts.len()];
    for v in &t.vertices {
        let HeightLabel::Lattice { class, exponent } = v.label else { continue };
        if exponent < 0 {
            continue;
        }
        let mut product = 1u64;
        let mut u = Some(v.id);
        for _ in 0..=exponent {
            let Some(id) = u else { break };
            product *= degree.get(&id).copied().unwrap_or(1) as u64;
            u = t.dynamics.get(&id).copied();
        }
        out[class] = lcm(out[class], product);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn quadratic_tree() -> (MarkedPolynomial, PolyTree) {
        let f = MarkedPolynomial::unicritical(2, c(100.0, 0.0));
        let g0 = green_unchecked(&f, c(0.0, 0.0), &EscapeBudget::with_tolerance(1e-14)).value;
        let t = build_tree(&f, 0.9 * g0, GridSpec::default()).unwrap();
        (f, t)
    }

    #[test]
    fn connected_julia_set_gives_trivial_path() {
        let f = MarkedPolynomial::from_critical_data(&[c(1.0, 0.0), c(-1.0, 0.0)], c(0.0, 0.0)).unwrap();
        let t = build_tree(&f, 0.1, GridSpec::default()).unwrap();
        assert!(t.trivial);
        assert_eq!(t.vertices.len(), 3);
        assert_eq!(t.edges.len(), 2);
        assert!(t.edges.iter().all(|e| e.degree == 3));
    }

    #[test]
    fn quadratic_tree_shape() {
        let (_, t) = quadratic_tree();
        assert!(!t.trivial);
        // root at 2M, critical vertex at M, two floor leaves.
        assert_eq!(t.vertices.len(), 4);
        let crit = t.vertices.iter().find(|v| v.label == HeightLabel::Lattice { class: 0, exponent: 0 }).unwrap();
        assert_eq!(crit.local_degree, 2);
        assert_eq!(t.parent_edge(crit.id).unwrap().degree, 2);
        let kids = t.children(crit.id);
        assert_eq!(kids.len(), 2);
        for k in kids {
            assert_eq!(t.parent_edge(k).unwrap().degree, 1);
            assert_eq!(t.vertex(k).unwrap().label, HeightLabel::Floor);
        }
        let root = t.root().unwrap();
        assert_eq!(t.dynamics[&crit.id], root);
        assert!((t.vertex(root).unwrap().height - 2.0 * crit.height).abs() < 1e-12);
        assert_eq!(twist_periods(&t).unwrap(), vec![2]);
    }

    #[test]
    fn truncation_laws() {
        let (_, t) = quadratic_tree();
        let big = truncate(&t, 1000);
        assert_eq!(big.vertices, t.vertices);
        assert_eq!(big.edges, t.edges);
        for (n, m) in [(1, 2), (2, 1), (3, 3), (2, 5)] {
            assert_eq!(truncate(&truncate(&t, n), m), truncate(&t, n.min(m)));
        }
        // Level 0 is the window [M, 2M): only the critical vertex.
        let one = truncate(&t, 1);
        assert_eq!(one.vertices.len(), 1);
        assert!(one.vertices[0].height >= t.max_height && one.vertices[0].height < 2.0 * t.max_height);
    }

    #[test]
    fn iso_test_basics() {
        let (_, t) = quadratic_tree();
        assert!(iso_test(&t, &t, 0.0).unwrap());
        let mut fewer = t.clone();
        fewer.vertices.pop();
        assert!(!iso_test(&t, &fewer, f64::INFINITY).unwrap());
        assert!(matches!(iso_test(&t, &truncate(&t, 2), 1.0), Err(TreeError::LevelMismatch(..))));
    }

    #[test]
    fn generic_cubic_tree() {
        // Critical points ±1, translation chosen so both escape at different rates.
        let f = MarkedPolynomial::from_critical_data(&[c(1.0, 0.0), c(-1.0, 0.0)], c(2.0, 2.0)).unwrap();
        let h: Vec<f64> = marked_heights(&f, &EscapeBudget::with_tolerance(1e-14)).iter().map(|e| e.value).collect();
        let (hi, lo) = (h[0].max(h[1]), h[0].min(h[1]));
        assert!(lo / hi > 1.0 / 3.0 && lo / hi < 1.0);
        let t = build_tree(&f, 0.8 * lo, GridSpec::default()).unwrap();
        // Exactly one branch vertex at each critical height.
        let branch: Vec<_> = t.vertices.iter().filter(|v| v.local_degree > 1).collect();
        assert_eq!(branch.len(), 2);
        // Above height M the tree is a path.
        for v in t.vertices.iter().filter(|v| v.height > hi * (1.0 + 1e-9)) {
            assert_eq!(t.children(v.id).len(), 1, "{v:?}");
        }
        let periods = twist_periods(&t).unwrap();
        assert_eq!(periods.len(), 2);
        assert!(periods.iter().all(|&p| p >= 1));
        let finer = build_tree(&f, 0.8 * lo, GridSpec { resolution: 128, ..GridSpec::default() }).unwrap();
        assert!(iso_test(&t, &finer, 0.0).unwrap());
        assert_eq!(twist_periods(&finer).unwrap(), periods);
    }

    #[test]
    fn insufficient_depth_is_reported() {
        let f = MarkedPolynomial::unicritical(2, c(100.0, 0.0));
        let t = build_tree(&f, 3.0, GridSpec::default()).unwrap();
        assert!(matches!(twist_periods(&t), Err(TreeError::InsufficientDepth { .. })));
    }

    #[test]
    fn dot_and_json_outputs() {
        let (_, t) = quadratic_tree();
        let dot = t.to_dot();
        assert!(dot.starts_with("digraph") && dot.contains("degree=2"));
        let json = serde_json::to_string(&t).unwrap();
        let back: PolyTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn invalid_inputs() {
        let f = MarkedPolynomial::unicritical(2, c(100.0, 0.0));
        assert!(matches!(build_tree(&f, -1.0, GridSpec::default()), Err(TreeError::InvalidFloor(_))));
        assert!(matches!(
            build_tree(&f, 1.0, GridSpec { resolution: 100, refinement_limit: 1 }),
            Err(TreeError::InvalidGrid(100))
        ));
    }
}
