//! Numerical census of fibers of the critical heights map.
//!
//! Over a target heights vector `h` the fiber, intersected with the domain of
//! `Φ_n`, is `Φ_n^{-1}` of the torus `{log|w_i| = d^n h_i}`. The census samples
//! that torus on a uniform grid of w-angles `ψ`, solves for every preimage in a
//! base cell from random seeds, and carries the solutions to all other cells by
//! continuation. Continuation links are checked in both directions; connected
//! components of the link graph, after identifying solutions related by the
//! rotation `z -> ζz` and by relabeling critical points of equal height, are
//! the points of the fiber of `𝒯*_d -> ℋ_d`.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boettcher::{invert_phi_n, phi_n_map, wrap_pi, PhiImage};
use crate::escape::{heights, heights_jacobian, EscapeBudget, HeightsVector};
use crate::heights_space::independence_classes;
use crate::poly::{rotation_group, HyperplaneBasis, MarkedPolynomial};
use crate::tree::{build_tree, iso_test, GridSpec, PolyTree};

/// Bumped whenever stored censuses would change.
pub const CENSUS_VERSION: u32 = 1;

const MAX_ANGLE_STEP: f64 = 0.2;
const NEWTON_TOL: f64 = 1e-12;
const MATCH_TOL: f64 = 1e-7;
const BRANCH_BUMP: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CensusError {
    #[error("target is outside the domain of Φ_{n}: {reason}")]
    TargetOutsideDomain { n: u32, reason: String },
    #[error("angle grid must have at least 4 cells per coordinate, got {0}")]
    InvalidGrid(usize),
    #[error("no seed reached the target fiber")]
    NoSolutions,
    #[error("{} angle cells are missing solutions after continuation", census.coverage_gaps.len())]
    InsufficientSeeds { census: Box<FiberCensus> },
    #[error("census needs about {per_cell} solutions per angle cell, over the budget of {limit} grid solutions")]
    BudgetExceeded {
        limit: usize,
        /// Solutions per cell: counted, or estimated from seed repeats when seeding did not saturate.
        per_cell: usize,
    },
    #[error("census store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusOptions {
    pub rng_seed: u64,
    /// Random seeds are drawn in batches until a batch adds nothing and at least this many were tried.
    pub min_seeds: usize,
    pub max_seeds: usize,
    /// Upper bound on solutions summed over all cells.
    pub max_solutions: usize,
    pub build_trees: bool,
    pub tree_grid: GridSpec,
}

impl Default for CensusOptions {
    fn default() -> Self {
        Self {
            rng_seed: 0x5eed,
            min_seeds: 96,
            max_seeds: 2000,
            max_solutions: 2_000_000,
            build_trees: true,
            tree_grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusSolution {
    pub poly: MarkedPolynomial,
    /// Norm of `Φ_n(f) - target` in log coordinates.
    pub residual: f64,
    /// W-angles `ψ_i = arg w_i` of the cell.
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monodromy {
    pub generator: usize,
    /// Cycle length, under one ψ-loop, of each base solution in the component.
    pub psi_loop_orders: Vec<usize>,
    /// Whether the lift of the ψ-loop closes up: one circuit permutes the component's base
    /// solutions (`None` if a link along the loop is missing).
    pub closes: Option<bool>,
    /// Whether `d^n` ψ-loops (one circuit of `θ = ψ / d^n`) return every solution to itself.
    pub theta_closes: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusComponent {
    pub id: usize,
    /// Indices into `FiberCensus::solutions` (the base cell).
    pub solutions: Vec<usize>,
    pub representative: MarkedPolynomial,
    pub monodromy: Vec<Monodromy>,
    pub tree: Option<PolyTree>,
    pub tree_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberCensus {
    pub d: usize,
    pub n: u32,
    pub target: HeightsVector,
    pub angle_grid: usize,
    pub generic: bool,
    /// Number of independence classes of the target.
    pub classes: usize,
    /// Solutions in the base cell `ψ = 0`; every component has at least one.
    pub solutions: Vec<CensusSolution>,
    /// Components before identifying rotations and relabelings.
    pub raw_components: usize,
    pub components: Vec<CensusComponent>,
    pub cell_counts: Vec<usize>,
    /// Flat indices of cells with fewer solutions than the fullest cell.
    pub coverage_gaps: Vec<usize>,
    pub failed_links: usize,
    /// Links across the branch locus of a non-generic target, accepted without the reverse check.
    pub branch_links: usize,
    pub seeds_tried: usize,
}

impl FiberCensus {
    pub fn accepted(&self) -> bool {
        self.coverage_gaps.is_empty() && self.failed_links == 0
    }

    /// Whether every component closes under every angle generator (`None` for non-generic targets).
    pub fn torus_check(&self) -> Option<bool> {
        if !self.generic {
            return None;
        }
        Some(self.components.iter().all(|c| c.monodromy.iter().all(|m| m.closes == Some(true))))
    }
}

/// Least `n` with `d^n h_min > M`.
pub fn minimal_depth(target: &HeightsVector) -> u32 {
    let d = target.d as f64;
    let mut n = 1u32;
    while d.powi(n as i32) * target.min() <= target.max() {
        n += 1;
    }
    n
}

/// Target heights equal up to an integer power of `d` (or equal) make the target non-generic.
pub fn is_generic(target: &HeightsVector) -> bool {
    independence_classes(target, 1e-9).map(|p| p.len() == target.heights.len()).unwrap_or(false)
}

fn check_target(target: &HeightsVector, n: u32) -> Result<(), CensusError> {
    if !target.is_shift_locus() {
        return Err(CensusError::TargetOutsideDomain { n, reason: "some target height is not positive".into() });
    }
    let d = target.d as f64;
    if d.powi(n as i32) * target.min() <= target.max() {
        return Err(CensusError::TargetOutsideDomain {
            n,
            reason: format!("d^n h_min = {} does not exceed M = {}", d.powi(n as i32) * target.min(), target.max()),
        });
    }
    Ok(())
}

/// Axis `k` is offset by `k / dims` of a cell so that no sample satisfies `ψ_i = d^k ψ_j`.
fn cell_angles(index: usize, grid: usize, dims: usize) -> Vec<f64> {
    let mut k = index;
    (0..dims)
        .map(|axis| {
            let a = ((k % grid) as f64 + axis as f64 / dims as f64) * TAU / grid as f64;
            k /= grid;
            a
        })
        .collect()
}

fn neighbor(index: usize, axis: usize, grid: usize) -> usize {
    let stride = grid.pow(axis as u32);
    let coord = (index / stride) % grid;
    if coord + 1 == grid {
        index - coord * stride
    } else {
        index + stride
    }
}

fn interpolate(a: &PhiImage, b: &PhiImage, t: f64) -> PhiImage {
    PhiImage {
        n: a.n,
        log_w: a
            .log_w
            .iter()
            .zip(&b.log_w)
            .map(|(x, y)| Complex64::new(x.re + t * (y.re - x.re), x.im + t * wrap_pi(y.im - x.im)))
            .collect(),
    }
}

fn image_distance(a: &PhiImage, b: &PhiImage) -> f64 {
    a.log_w.iter().zip(&b.log_w).map(|(x, y)| (x.re - y.re).abs().max(wrap_pi(x.im - y.im).abs())).fold(0.0, f64::max)
}

/// Newton continuation of `f` (solving `from`) along the straight path to `to`.
fn continue_solution(
    f: &MarkedPolynomial,
    from: &PhiImage,
    to: &PhiImage,
    substeps: usize,
) -> Option<MarkedPolynomial> {
    continue_bumped(f, from, to, substeps, 0.0)
}

/// As [`continue_solution`], with log-moduli raised by `bump * sqrt(i + 2) * sin(πt)` mid-path.
///
/// Off the fixed moduli, relations `w_i = w_j^{d^k}` cut out a set of real
/// codimension two, so the bumped path avoids the branch locus of a
/// non-generic target while staying inside the domain.
fn continue_bumped(
    f: &MarkedPolynomial,
    from: &PhiImage,
    to: &PhiImage,
    substeps: usize,
    bump: f64,
) -> Option<MarkedPolynomial> {
    let d = f.degree();
    let mut cur = f.clone();
    for k in 1..=substeps {
        let t = k as f64 / substeps as f64;
        let tol = if k == substeps { NEWTON_TOL } else { 1e-9 };
        let mut point = interpolate(from, to, t);
        let lift = bump * (std::f64::consts::PI * t).sin();
        for (i, l) in point.log_w.iter_mut().enumerate() {
            l.re += lift * ((i + 2) as f64).sqrt();
        }
        cur = invert_phi_n(d, from.n, &point, &cur, tol).ok()?;
    }
    Some(cur)
}

/// Continue any polynomial with a Φ_n image onto `target`.
pub fn homotopy_to(f: &MarkedPolynomial, target: &PhiImage) -> Option<MarkedPolynomial> {
    let start = phi_n_map(f, target.n).ok()?;
    let steps = ((image_distance(&start, target) / 0.15).ceil() as usize).clamp(12, 600);
    continue_solution(f, &start, target, steps)
}

fn residual_norm(f: &MarkedPolynomial, target: &PhiImage) -> f64 {
    match phi_n_map(f, target.n) {
        Ok(img) => img
            .log_w
            .iter()
            .zip(&target.log_w)
            .map(|(x, y)| (x.re - y.re).powi(2) + wrap_pi(x.im - y.im).powi(2))
            .sum::<f64>()
            .sqrt(),
        Err(_) => f64::INFINITY,
    }
}

struct Matcher {
    basis: HyperplaneBasis,
}

impl Matcher {
    fn coords(&self, f: &MarkedPolynomial) -> Vec<f64> {
        self.basis.to_coordinates(f)
    }

    fn same(p: &[f64], q: &[f64]) -> bool {
        let scale = p.iter().map(|x| x.abs()).fold(1.0, f64::max);
        p.iter().zip(q).all(|(x, y)| (x - y).abs() <= MATCH_TOL * scale)
    }
}

fn random_seed(d: usize, max_height: f64, rng: &mut ChaCha8Rng) -> MarkedPolynomial {
    let spread = 0.75 * max_height.exp();
    let mut c: Vec<Complex64> =
        (0..d - 1).map(|_| Complex64::from_polar(spread * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..TAU))).collect();
    let mean = c.iter().sum::<Complex64>() / (d - 1) as f64;
    c.iter_mut().for_each(|x| *x -= mean);
    let big = (d as f64 * max_height).exp();
    let a = Complex64::from_polar(rng.gen_range(big / 30.0..2.0 * big), rng.gen_range(0.0..TAU));
    MarkedPolynomial::from_critical_data(&c, a).expect("centered by construction")
}

/// Solutions of `Φ_n(f) = target` reached from `seeds` and from random seeds.
///
/// Random seeds are drawn in parallel batches until a batch adds no new
/// solution and at least `opts.min_seeds` have been tried.
pub fn solve_target(
    d: usize,
    target: &PhiImage,
    seeds: &[MarkedPolynomial],
    max_height: f64,
    opts: &CensusOptions,
) -> (Vec<MarkedPolynomial>, usize) {
    let s = sample_target(d, target, seeds, max_height, opts);
    (s.found.into_iter().map(|(f, _, _)| f).collect(), s.tried)
}

struct Sample {
    /// Distinct solutions, their matching coordinates, and how many random seeds reached each.
    found: Vec<(MarkedPolynomial, Vec<f64>, usize)>,
    tried: usize,
    saturated: bool,
}

impl Sample {
    /// Bias-corrected Chao1 estimate of the number of solutions the random seeds can reach.
    fn estimated_total(&self) -> f64 {
        let f1 = self.found.iter().filter(|x| x.2 == 1).count() as f64;
        let f2 = self.found.iter().filter(|x| x.2 == 2).count() as f64;
        self.found.len() as f64 + f1 * (f1 - 1.0).max(0.0) / (2.0 * (f2 + 1.0))
    }
}

fn sample_target(
    d: usize,
    target: &PhiImage,
    seeds: &[MarkedPolynomial],
    max_height: f64,
    opts: &CensusOptions,
) -> Sample {
    let matcher = Matcher { basis: HyperplaneBasis::new(d) };
    let mut found: Vec<(MarkedPolynomial, Vec<f64>, usize)> = Vec::new();
    let absorb =
        |list: Vec<Option<MarkedPolynomial>>, hit: usize, found: &mut Vec<(MarkedPolynomial, Vec<f64>, usize)>| {
            let before = found.len();
            for f in list.into_iter().flatten() {
                let p = matcher.coords(&f);
                match found.iter_mut().find(|(_, q, _)| Matcher::same(&p, q)) {
                    Some(entry) => entry.2 += hit,
                    None => found.push((f, p, hit)),
                }
            }
            found.len() - before
        };
    let user: Vec<Option<MarkedPolynomial>> = seeds.par_iter().map(|s| homotopy_to(s, target)).collect();
    absorb(user, 0, &mut found);
    let batch = 32;
    let mut tried = 0;
    let mut saturated = false;
    while tried < opts.max_seeds {
        let results: Vec<Option<MarkedPolynomial>> = (tried..tried + batch)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let seed = random_seed(d, max_height, &mut rng);
                homotopy_to(&seed, target)
            })
            .collect();
        tried += batch;
        let added = absorb(results, 1, &mut found);
        if added == 0 && tried >= opts.min_seeds && !found.is_empty() {
            saturated = true;
            break;
        }
    }
    Sample { found, tried, saturated }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn add(&mut self) -> usize {
        self.0.push(self.0.len());
        self.0.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

struct Node {
    cell: usize,
    poly: MarkedPolynomial,
    coords: Vec<f64>,
    next: Vec<Option<usize>>,
}

/// Permutations of `0..k` preserving the (equal-height) groups of `heights`.
fn tie_permutations(heights: &[f64]) -> Vec<Vec<usize>> {
    let k = heights.len();
    let mut out = vec![vec![]];
    for _ in 0..k {
        let mut next = Vec::new();
        for p in &out {
            for i in 0..k {
                let ties = (heights[i] - heights[p.len()]).abs() <= 1e-12 * heights[i].abs().max(1e-300);
                if !p.contains(&i) && ties {
                    let mut q = p.clone();
                    q.push(i);
                    next.push(q);
                }
            }
        }
        out = next;
    }
    out
}

fn relabel(f: &MarkedPolynomial, perm: &[usize]) -> MarkedPolynomial {
    let c: Vec<Complex64> = perm.iter().map(|&i| f.critical_points()[i]).collect();
    MarkedPolynomial::from_critical_data(&c, f.translation()).expect("same critical set")
}

/// Sample the fiber over `target` and group it into components.
pub fn fiber_census(
    d: usize,
    target: &HeightsVector,
    n: Option<u32>,
    grid: usize,
    seeds: &[MarkedPolynomial],
    opts: &CensusOptions,
) -> Result<FiberCensus, CensusError> {
    assert_eq!(target.d, d, "target degree");
    let n = n.unwrap_or_else(|| minimal_depth(target));
    check_target(target, n)?;
    if grid < 4 {
        return Err(CensusError::InvalidGrid(grid));
    }
    let dims = d - 1;
    let cells = grid.pow(dims as u32);
    let images: Vec<PhiImage> = (0..cells)
        .map(|k| PhiImage::from_heights_and_angles(n, d, &target.heights, &cell_angles(k, grid, dims)))
        .collect();

    let sample = sample_target(d, &images[0], seeds, target.max(), opts);
    if sample.found.is_empty() {
        return Err(CensusError::NoSolutions);
    }
    // An unsaturated seed run only bounds the fiber from below; use the repeat statistics to fail early.
    let per_cell = if sample.saturated { sample.found.len() } else { sample.estimated_total().ceil() as usize };
    if per_cell * cells > opts.max_solutions {
        return Err(CensusError::BudgetExceeded { limit: opts.max_solutions, per_cell });
    }
    let seeds_tried = sample.tried;
    let base: Vec<MarkedPolynomial> = sample.found.into_iter().map(|(f, _, _)| f).collect();
    log::info!("census d={d} n={n} grid={grid}: {} base solutions from {seeds_tried} seeds", base.len());

    let matcher = Matcher { basis: HyperplaneBasis::new(d) };
    let mut nodes: Vec<Node> = Vec::new();
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); cells];
    let mut uf = UnionFind(Vec::new());
    let insert = |nodes: &mut Vec<Node>,
                  per_cell: &mut Vec<Vec<usize>>,
                  uf: &mut UnionFind,
                  cell: usize,
                  f: MarkedPolynomial| {
        let coords = matcher.coords(&f);
        if let Some(&id) = per_cell[cell].iter().find(|&&id| Matcher::same(&nodes[id].coords, &coords)) {
            return (id, false);
        }
        let id = uf.add();
        nodes.push(Node { cell, poly: f, coords, next: vec![None; dims] });
        per_cell[cell].push(id);
        (id, true)
    };
    let mut frontier: Vec<usize> = Vec::new();
    for f in base {
        let (id, new) = insert(&mut nodes, &mut per_cell, &mut uf, 0, f);
        if new {
            frontier.push(id);
        }
    }

    let base_steps = ((TAU / grid as f64) / MAX_ANGLE_STEP).ceil() as usize;
    let mut failed_links = 0;
    let mut branch_links = 0;
    let singular = !is_generic(target);
    let bump = if singular { BRANCH_BUMP } else { 0.0 };
    while !frontier.is_empty() {
        if nodes.len() > opts.max_solutions {
            return Err(CensusError::BudgetExceeded { limit: opts.max_solutions, per_cell: per_cell[0].len() });
        }
        let jobs: Vec<(usize, usize)> = frontier.iter().flat_map(|&id| (0..dims).map(move |ax| (id, ax))).collect();
        let results: Vec<Option<(MarkedPolynomial, bool)>> = jobs
            .par_iter()
            .map(|&(id, ax)| {
                let node = &nodes[id];
                let (from, to) = (&images[node.cell], &images[neighbor(node.cell, ax, grid)]);
                let mut steps = base_steps;
                for _ in 0..4 {
                    if let Some(g) = continue_bumped(&node.poly, from, to, steps, bump) {
                        if let Some(back) = continue_bumped(&g, to, from, steps, bump) {
                            if Matcher::same(&matcher.coords(&back), &node.coords) {
                                return Some((g, true));
                            }
                        }
                    }
                    steps *= 2;
                }
                // Over a non-generic target, angle relations such as `ψ_i = d^k ψ_j` (critical
                // orbit relations) form a branch locus where sheets meet.
                if singular {
                    return continue_bumped(&node.poly, from, to, steps, bump).map(|g| (g, false));
                }
                None
            })
            .collect();
        let mut next_frontier = Vec::new();
        for ((id, ax), result) in jobs.into_iter().zip(results) {
            let Some((g, verified)) = result else {
                failed_links += 1;
                continue;
            };
            if !verified {
                branch_links += 1;
            }
            let cell = neighbor(nodes[id].cell, ax, grid);
            let (gid, new) = insert(&mut nodes, &mut per_cell, &mut uf, cell, g);
            nodes[id].next[ax] = Some(gid);
            uf.union(id, gid);
            if new {
                next_frontier.push(gid);
            }
        }
        frontier = next_frontier;
    }
    let raw_roots: std::collections::BTreeSet<usize> = (0..nodes.len()).map(|i| uf.find(i)).collect();
    let raw_components = raw_roots.len();

    // Identify images under rotation and relabeling by carrying them back to the base cell.
    let base_ids = per_cell[0].clone();
    let perms = tie_permutations(&target.heights);
    let symmetries: Vec<(Complex64, Vec<usize>)> = rotation_group(d)
        .into_iter()
        .flat_map(|z| perms.iter().map(move |p| (z, p.clone())))
        .filter(|(z, p)| (z - Complex64::new(1.0, 0.0)).norm() > 1e-12 || p.iter().enumerate().any(|(i, &j)| i != j))
        .collect();
    let images_of: Vec<Vec<Option<Vec<f64>>>> = base_ids
        .par_iter()
        .map(|&id| {
            symmetries
                .iter()
                .map(|(z, p)| {
                    let g = relabel(&nodes[id].poly.rotate(*z), p);
                    homotopy_to(&g, &images[0]).map(|h| matcher.coords(&h))
                })
                .collect()
        })
        .collect();
    for (&id, imgs) in base_ids.iter().zip(&images_of) {
        for coords in imgs.iter().flatten() {
            match base_ids.iter().find(|&&b| Matcher::same(&nodes[b].coords, coords)) {
                Some(&b) => uf.union(id, b),
                None => failed_links += 1,
            }
        }
    }

    let pow = (d as u64).pow(n);
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, &id) in base_ids.iter().enumerate() {
        let root = uf.find(id);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, g)) => g.push(k),
            None => groups.push((root, vec![k])),
        }
    }
    let target_image = &images[0];
    let solutions: Vec<CensusSolution> = base_ids
        .iter()
        .map(|&id| CensusSolution {
            poly: nodes[id].poly.clone(),
            residual: residual_norm(&nodes[id].poly, target_image),
            angles: cell_angles(0, grid, dims),
        })
        .collect();
    let floor = 0.8 * target.min();
    let components: Vec<CensusComponent> = groups
        .par_iter()
        .enumerate()
        .map(|(cid, (_, members))| {
            let monodromy = (0..dims)
                .map(|ax| {
                    let circuit = |start: usize| {
                        let mut cur = Some(start);
                        for _ in 0..grid {
                            cur = cur.and_then(|c| nodes[c].next[ax]);
                        }
                        cur
                    };
                    let images: Vec<Option<usize>> = members.iter().map(|&k| circuit(base_ids[k])).collect();
                    if images.iter().any(Option::is_none) {
                        return Monodromy {
                            generator: ax,
                            psi_loop_orders: vec![0; members.len()],
                            closes: None,
                            theta_closes: None,
                        };
                    }
                    let ids: Vec<usize> = members.iter().map(|&k| base_ids[k]).collect();
                    let image_of = |id: usize| images[ids.iter().position(|&x| x == id).unwrap()].unwrap();
                    let mut distinct: Vec<usize> = images.iter().flatten().copied().collect();
                    distinct.sort_unstable();
                    distinct.dedup();
                    let permutes = distinct.len() == ids.len() && distinct.iter().all(|x| ids.contains(x));
                    let orders: Vec<usize> = ids
                        .iter()
                        .map(|&start| {
                            if !permutes {
                                return 0;
                            }
                            let mut cur = image_of(start);
                            let mut order = 1;
                            while cur != start {
                                cur = image_of(cur);
                                order += 1;
                            }
                            order
                        })
                        .collect();
                    let theta_closes = permutes.then(|| orders.iter().all(|&o| pow.is_multiple_of(o as u64)));
                    Monodromy { generator: ax, psi_loop_orders: orders, closes: Some(permutes), theta_closes }
                })
                .collect();
            let representative = nodes[base_ids[members[0]]].poly.clone();
            let (tree, tree_error) = if opts.build_trees {
                match build_tree(&representative, floor, opts.tree_grid) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            } else {
                (None, None)
            };
            CensusComponent { id: cid, solutions: members.clone(), representative, monodromy, tree, tree_error }
        })
        .collect();

    let cell_counts: Vec<usize> = per_cell.iter().map(Vec::len).collect();
    let full = cell_counts.iter().copied().max().unwrap_or(0);
    let coverage_gaps = (0..cells).filter(|&k| cell_counts[k] < full).collect();
    let census = FiberCensus {
        d,
        n,
        target: target.clone(),
        angle_grid: grid,
        generic: is_generic(target),
        classes: independence_classes(target, 1e-9).map(|p| p.len()).unwrap_or(0),
        solutions,
        raw_components,
        components,
        cell_counts,
        coverage_gaps,
        failed_links,
        branch_links,
        seeds_tried,
    };
    if census.coverage_gaps.is_empty() {
        Ok(census)
    } else {
        Err(CensusError::InsufficientSeeds { census: Box::new(census) })
    }
}

/// Component of `census` containing `f`, found by continuing `f` to the base cell.
pub fn locate(census: &FiberCensus, f: &MarkedPolynomial) -> Option<usize> {
    let dims = census.d - 1;
    let base = PhiImage::from_heights_and_angles(
        census.n,
        census.d,
        &census.target.heights,
        &cell_angles(0, census.angle_grid, dims),
    );
    let g = homotopy_to(f, &base)?;
    let basis = HyperplaneBasis::new(census.d);
    let p = basis.to_coordinates(&g);
    let k = census.solutions.iter().position(|s| Matcher::same(&basis.to_coordinates(&s.poly), &p))?;
    census.components.iter().find(|c| c.solutions.contains(&k)).map(|c| c.id)
}

/// `(count_Tstar, count_T)`: components, and classes of their trees up to ε-conjugacy.
pub fn compare_projections(census: &FiberCensus, eps: f64) -> (usize, usize) {
    let mut classes: Vec<&PolyTree> = Vec::new();
    let mut untreed = 0;
    for c in &census.components {
        match &c.tree {
            Some(t) => {
                if !classes.iter().any(|r| iso_test(r, t, eps).unwrap_or(false)) {
                    classes.push(t);
                }
            }
            None => untreed += 1,
        }
    }
    (census.components.len(), classes.len() + untreed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub required: usize,
    pub min_rank: usize,
    /// `(solution index, rank)` for every solution below the required rank.
    pub violations: Vec<(usize, usize)>,
    pub checked: usize,
}

/// Numerical rank of the heights Jacobian at every base solution against the number of classes.
pub fn rank_probe(census: &FiberCensus) -> RankReport {
    let ranks: Vec<Option<usize>> = census
        .solutions
        .par_iter()
        .map(|s| heights_jacobian(&s.poly, 1e-6).ok().map(|j| j.numerical_rank(1e-6)))
        .collect();
    let required = census.classes;
    let mut violations = Vec::new();
    let mut min_rank = usize::MAX;
    for (i, r) in ranks.iter().enumerate() {
        let r = r.unwrap_or(0);
        min_rank = min_rank.min(r);
        if r < required {
            violations.push((i, r));
        }
    }
    RankReport { required, min_rank: if ranks.is_empty() { 0 } else { min_rank }, violations, checked: ranks.len() }
}

/// Relative error of the sorted critical heights of `f` against `target`.
pub fn height_error(f: &MarkedPolynomial, target: &HeightsVector) -> f64 {
    let h = heights(f, &EscapeBudget::with_tolerance(1e-14)).heights;
    h.heights.iter().zip(&target.heights).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max)
}

#[derive(Serialize)]
struct CensusKey<'a> {
    version: u32,
    d: usize,
    target_bits: Vec<u64>,
    n: Option<u32>,
    grid: usize,
    seeds: &'a [MarkedPolynomial],
    options: &'a CensusOptions,
}

/// Content-addressed store of finished censuses: one JSON file per key.
#[derive(Debug, Clone)]
pub struct CensusStore {
    pub root: PathBuf,
}

impl CensusStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(
        d: usize,
        target: &HeightsVector,
        n: Option<u32>,
        grid: usize,
        seeds: &[MarkedPolynomial],
        options: &CensusOptions,
    ) -> String {
        let key = CensusKey {
            version: CENSUS_VERSION,
            d,
            target_bits: target.heights.iter().map(|h| h.to_bits()).collect(),
            n,
            grid,
            seeds,
            options,
        };
        let bytes = serde_json::to_vec(&key).expect("key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<FiberCensus> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Writes atomically (temporary file, then rename) while holding `<key>.lock`.
    pub fn put(&self, key: &str, census: &FiberCensus) -> Result<(), CensusError> {
        let err = |e: std::io::Error| CensusError::Store(e.to_string());
        fs::create_dir_all(&self.root).map_err(err)?;
        let lock = self.root.join(format!("{key}.lock"));
        let _guard = LockGuard::acquire(&lock).map_err(err)?;
        let tmp = self.root.join(format!("{key}.tmp{}", std::process::id()));
        let mut file = fs::File::create(&tmp).map_err(err)?;
        file.write_all(&serde_json::to_vec(census).expect("census serializes")).map_err(err)?;
        file.sync_all().map_err(err)?;
        fs::rename(&tmp, self.path(key)).map_err(err)
    }

    /// Cached census for these parameters, computing and storing it on a miss.
    pub fn get_or_compute(
        &self,
        d: usize,
        target: &HeightsVector,
        n: Option<u32>,
        grid: usize,
        seeds: &[MarkedPolynomial],
        options: &CensusOptions,
    ) -> Result<(FiberCensus, bool), CensusError> {
        let key = Self::key(d, target, n, grid, seeds, options);
        if let Some(c) = self.get(&key) {
            return Ok((c, true));
        }
        let census = fiber_census(d, target, n, grid, seeds, options)?;
        self.put(&key, &census)?;
        Ok((census, false))
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: &Path) -> std::io::Result<Self> {
        fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                std::io::Error::new(e.kind(), format!("another writer holds {}", path.display()))
            } else {
                e
            }
        })?;
        Ok(Self(path.to_path_buf()))
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Tally of base solutions by component size, handy for summaries.
pub fn component_sizes(census: &FiberCensus) -> HashMap<usize, usize> {
    let mut out = HashMap::new();
    for c in &census.components {
        *out.entry(c.solutions.len()).or_default() += 1;
    }
    out
}
