//! Fast invariant suite behind the `selftest` command, and the random
//! shift-locus sampler it shares with the test suites.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boettcher::{boettcher, wrap_pi};
use crate::census::{compare_projections, fiber_census, CensusOptions};
use crate::escape::{green, heights, heights_jacobian, EscapeBudget, HeightsVector};
use crate::heights_space::{build_height_complex, integer_determinant, moduli_matrix, subannuli, DEFAULT_REL_TOL};
use crate::poly::MarkedPolynomial;
use crate::tree::{build_tree, iso_test, GridSpec, HeightLabel, PolyTree};

/// Random polynomial of degree `d` with every critical height at least `min_height`.
///
/// Critical points are uniform in `[-1.5, 1.5]^2` (then centered) and the
/// translation uniform in `[-3, 3]^2`; draws outside the shift locus are
/// rejected. With `separated`, draws whose height ratios lie within 0.05 of
/// an integer power of `d` (but not on it) are rejected too, so that tree
/// levels stay resolvable on a grid.
pub fn random_shift_polynomial(d: usize, rng: &mut impl Rng, min_height: f64, separated: bool) -> MarkedPolynomial {
    let budget = EscapeBudget::with_tolerance(1e-13);
    loop {
        let mut c: Vec<Complex64> =
            (0..d - 1).map(|_| Complex64::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5))).collect();
        let mean = c.iter().sum::<Complex64>() / (d - 1) as f64;
        c.iter_mut().for_each(|x| *x -= mean);
        let a = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let Ok(f) = MarkedPolynomial::from_critical_data(&c, a) else { continue };
        let h = heights(&f, &budget).heights;
        if h.min() < min_height {
            continue;
        }
        if separated && !lattice_separated(&h, 0.05) {
            continue;
        }
        return f;
    }
}

fn lattice_separated(h: &HeightsVector, margin: f64) -> bool {
    let ld = (h.d as f64).ln();
    h.heights.iter().enumerate().all(|(i, &x)| {
        h.heights[..i].iter().all(|&y| {
            let r = (y / x).ln() / ld;
            let off = (r - r.round()).abs();
            off < 1e-9 || off > margin
        })
    })
}

/// Structural checks on a tree against independently computed critical heights.
///
/// - every dynamics pair `v -> F(v)` has `label(F(v)) = label(v)` one exponent up,
///   and `h(F(v)) = d · h(v)` to rounding;
/// - at any height `t` strictly between vertex heights, the edges crossing `t`
///   carry `Σ (degree - 1)` equal to the number of critical points below `t`;
/// - the preimages of every vertex in the image of `F` have upper-edge degrees summing to `d`.
pub fn tree_invariants(t: &PolyTree, critical_heights: &[f64]) -> Result<(), String> {
    let df = t.d as f64;
    for (&v, &w) in &t.dynamics {
        let (a, b) = (t.vertex(v).ok_or("missing vertex")?, t.vertex(w).ok_or("missing vertex")?);
        if a.label.image() != Some(b.label) {
            return Err(format!("F({v}) = {w} has label {:?}, expected image of {:?}", b.label, a.label));
        }
        if (b.height - df * a.height).abs() > 1e-12 * b.height {
            return Err(format!("h(F({v})) = {} but d·h({v}) = {}", b.height, df * a.height));
        }
    }
    if t.trivial {
        return Ok(());
    }
    let mut levels: Vec<f64> = t.vertices.iter().map(|v| v.height).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    for pair in levels.windows(2) {
        let mid = 0.5 * (pair[0] + pair[1]);
        let crossing: usize = t
            .edges
            .iter()
            .filter(|e| {
                let (lo, hi) = (t.vertex(e.child).unwrap().height, t.vertex(e.parent).unwrap().height);
                lo < mid && mid < hi
            })
            .map(|e| e.degree - 1)
            .sum();
        let below = critical_heights.iter().filter(|&&h| h < mid).count();
        if crossing != below {
            return Err(format!("at height {mid}: edges carry {crossing} critical points, {below} lie below"));
        }
    }
    let mut preimage_degree = std::collections::BTreeMap::<usize, usize>::new();
    for (&v, &w) in &t.dynamics {
        if let Some(HeightLabel::Lattice { .. }) = t.vertex(v).map(|x| x.label) {
            *preimage_degree.entry(w).or_default() += t.parent_edge(v).map(|e| e.degree).unwrap_or(0);
        }
    }
    for (&w, &total) in &preimage_degree {
        // Preimages of w can be cut off by the floor; only vertices whose whole preimage is present count.
        let lowest_pre = t.vertex(w).unwrap().height / df;
        if lowest_pre > t.base_height && total != t.d {
            return Err(format!("preimages of vertex {w} have edge degrees summing to {total}"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(s) => (true, s),
        Err(s) => (false, s),
    };
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Runs a scaled-down version of the full invariant suite (a few seconds).
pub fn run(seed: u64) -> Vec<CheckResult> {
    let budget = EscapeBudget::default();
    vec![
        check("moduli matrix determinant", || {
            for d in 2..=12usize {
                for n in 2..=8usize {
                    let det = integer_determinant(&moduli_matrix(d, n));
                    let expect = if n % 2 == 1 { d as i128 - 1 } else { 1 - d as i128 };
                    if det != expect {
                        return Err(format!("d={d} N={n}: det {det}, expected {expect}"));
                    }
                }
            }
            Ok("d = 2..12, N = 2..8".into())
        }),
        check("subannuli moduli sum", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let d = rng.gen_range(2..7usize);
                let h = HeightsVector::new(d, (0..d - 1).map(|_| rng.gen_range(0.01..3.0)).collect()).unwrap();
                let dec = subannuli(&h, DEFAULT_REL_TOL).map_err(|e| e.to_string())?;
                let sum: f64 = dec.moduli.iter().sum();
                let expect = (d as f64 - 1.0) * h.max() / std::f64::consts::TAU;
                if (sum - expect).abs() > 1e-12 * expect.max(1.0) {
                    return Err(format!("{h:?}: Σm = {sum}, expected {expect}"));
                }
            }
            Ok("200 random vectors".into())
        }),
        check("escape-rate functional equation", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut worst: f64 = 0.0;
            for _ in 0..500 {
                let d = rng.gen_range(2..5usize);
                let f = random_shift_polynomial(d, &mut rng, 0.0, false);
                let z = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                let g = green(&f, z, &budget).map_err(|e| e.to_string())?.value;
                let gf = green(&f, f.evaluate(z), &budget).map_err(|e| e.to_string())?.value;
                worst = worst.max((gf - d as f64 * g).abs());
            }
            if worst <= 1e-9 {
                Ok(format!("max defect {worst:.1e}"))
            } else {
                Err(format!("max defect {worst:.1e}"))
            }
        }),
        check("Böttcher conjugacy and normalization", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            for _ in 0..50 {
                let f = random_shift_polynomial(3, &mut rng, 0.05, false);
                let m = heights(&f, &budget).heights.max();
                let z = Complex64::from_polar((2.0 * m).exp() + 3.0, rng.gen_range(0.0..std::f64::consts::TAU));
                let v = boettcher(&f, z, 1e-14).map_err(|e| e.to_string())?;
                if v.conjugacy_defect > 1e-8 || v.modulus_check > 1e-9 {
                    return Err(format!("defect {:e}, modulus {:e}", v.conjugacy_defect, v.modulus_check));
                }
                let far = Complex64::new(1e6, 0.0);
                let w = boettcher(&f, far, 1e-14).map_err(|e| e.to_string())?.w;
                if (w / far - 1.0).norm() > 1e-4 || wrap_pi((w / far).arg()).abs() > 1e-4 {
                    return Err(format!("φ(z)/z = {} at 10^6", w / far));
                }
            }
            Ok("50 random cubics".into())
        }),
        check("degree-3 heights complex", || {
            let c = build_height_complex(3, 5);
            match c.count_by_dim().as_slice() {
                [6, 5] => Ok("6 vertices, 5 edges".into()),
                other => Err(format!("counts {other:?}")),
            }
        }),
        check("degree-4 heights complex counts", || {
            for depth in 1..=3u32 {
                let k = depth as usize;
                let expect = vec![(k + 1) * (k + 2) / 2, 3 * k * (k + 1) / 2, k * k];
                let got = build_height_complex(4, depth).count_by_dim();
                if got != expect {
                    return Err(format!("depth {depth}: {got:?}, expected {expect:?}"));
                }
            }
            Ok("depth 1..3".into())
        }),
        check("heights rank", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
            for _ in 0..20 {
                let f = random_shift_polynomial(3, &mut rng, 0.1, true);
                let rank = heights_jacobian(&f, 1e-6).map_err(|e| e.to_string())?.numerical_rank(1e-6);
                if rank < 2 {
                    return Err(format!("rank {rank} at {f:?}"));
                }
            }
            Ok("20 generic cubics".into())
        }),
        check("quadratic fiber census", || {
            let opts = CensusOptions { min_seeds: 32, ..CensusOptions::default() };
            let census = fiber_census(2, &HeightsVector::new(2, vec![1.0]).unwrap(), None, 8, &[], &opts)
                .map_err(|e| e.to_string())?;
            let counts = compare_projections(&census, 1e-6);
            if census.components.len() == 1 && census.torus_check() == Some(true) && counts == (1, 1) {
                Ok("one closed loop".into())
            } else {
                Err(format!(
                    "{} components, torus {:?}, counts {counts:?}",
                    census.components.len(),
                    census.torus_check()
                ))
            }
        }),
        check("tree invariants", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
            for _ in 0..8 {
                let f = random_shift_polynomial(3, &mut rng, 0.15, true);
                let crit = heights(&f, &budget).heights;
                let spec = GridSpec::default();
                let t = build_tree(&f, 0.8 * crit.min(), spec).map_err(|e| e.to_string())?;
                tree_invariants(&t, &crit.heights)?;
                let finer = build_tree(&f, 0.8 * crit.min(), GridSpec { resolution: 2 * spec.resolution, ..spec })
                    .map_err(|e| e.to_string())?;
                if !iso_test(&t, &finer, 1e-9).map_err(|e| e.to_string())? {
                    return Err("tree changed under one grid refinement".into());
                }
            }
            Ok("8 random cubics".into())
        }),
    ]
}
