//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 10 (the depth-6 cubic census) is a stretch goal: its line is
//! printed but does not fail the run. `CRITHEIGHTS_STRETCH_BUDGET` and
//! `CRITHEIGHTS_STRETCH_GRID` raise its solution budget and angle grid.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::io::Write;
use std::process::Command;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use critheights::boettcher::{boettcher, wrap_pi, PhiImage};
use critheights::census::{
    compare_projections, fiber_census, height_error, minimal_depth, solve_target, CensusError, CensusOptions,
};
use critheights::escape::{green, heights, heights_jacobian};
use critheights::heights_space::{
    build_height_complex, independence_classes, integer_determinant, moduli_matrix, subannuli, DEFAULT_REL_TOL,
};
use critheights::selftest::{random_shift_polynomial, tree_invariants};
use critheights::tree::{build_tree, iso_test, GridSpec};
use critheights::{EscapeBudget, HeightsVector};

type Outcome = Result<String, String>;

/// Id, name, check, and whether a failure fails the run.
type Criterion = (u32, &'static str, fn() -> Outcome, bool);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn budget() -> EscapeBudget {
    EscapeBudget::default()
}

fn moduli_identities() -> Outcome {
    for d in 2..=12usize {
        for n in 2..=8usize {
            let det = integer_determinant(&moduli_matrix(d, n));
            let expect = if n % 2 == 1 { d as i128 - 1 } else { 1 - d as i128 };
            ensure(det == expect, || format!("d={d} N={n}: det {det}, expected {expect}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut vectors = 0;
    for d in 2..=12usize {
        for classes in 1..=(d - 1).min(8) {
            for _ in 0..1000 {
                let h = random_heights_with_classes(d, classes, &mut rng);
                let got = independence_classes(&h, DEFAULT_REL_TOL).map_err(|e| e.to_string())?.len();
                ensure(got == classes, || format!("{h:?}: {got} classes, built with {classes}"))?;
                let dec = subannuli(&h, DEFAULT_REL_TOL).map_err(|e| e.to_string())?;
                let sum: f64 = dec.moduli.iter().sum();
                let expect = (d as f64 - 1.0) * h.max() / TAU;
                let err = (sum - expect).abs() / expect.max(1.0);
                worst = worst.max(err);
                ensure(err <= 1e-12, || format!("{h:?}: Σm = {sum}, expected {expect}"))?;
                vectors += 1;
            }
        }
    }
    Ok(format!("determinants for d=2..12, N=2..8; {vectors} vectors, worst relative error {worst:.1e}"))
}

/// Heights with exactly `classes` independence classes: free anchors, the rest
/// tied to a random anchor by a power of `d`.
fn random_heights_with_classes(d: usize, classes: usize, rng: &mut impl Rng) -> HeightsVector {
    let scale = rng.gen_range(0.1..5.0);
    let df = d as f64;
    loop {
        let anchors: Vec<f64> = (0..classes).map(|_| scale * rng.gen_range(0.05..1.0)).collect();
        let mut h = anchors.clone();
        while h.len() < d - 1 {
            let k = rng.gen_range(0..4);
            h.push(anchors[rng.gen_range(0..classes)] * df.powi(-k));
        }
        let h = HeightsVector::new(d, h).unwrap();
        // Random anchors are independent unless a ratio lands near a power of d.
        if independence_classes(&h, DEFAULT_REL_TOL).map(|p| p.len() == classes).unwrap_or(false) {
            return h;
        }
    }
}

fn escape_functional_equation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let b = budget();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let d = rng.gen_range(2..5usize);
        let f = random_shift_polynomial(d, &mut rng, 0.0, false);
        let z = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let g = green(&f, z, &b).map_err(|e| e.to_string())?.value;
        let gf = green(&f, f.evaluate(z), &b).map_err(|e| e.to_string())?.value;
        let defect = (gf - d as f64 * g).abs();
        worst = worst.max(defect);
        ensure(defect <= 1e-9, || format!("defect {defect:.1e} at z={z} for {f:?}"))?;
    }
    Ok(format!("10000 pairs, worst defect {worst:.1e}"))
}

fn boettcher_coordinate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let b = budget();
    let (mut conj, mut modulus, mut far_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let f = random_shift_polynomial(3, &mut rng, 0.01, false);
        let m = heights(&f, &b).heights.max();
        let mut checked = 0;
        while checked < 3 {
            let z = Complex64::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let g = green(&f, z, &b).map_err(|e| e.to_string())?.value;
            if g <= m * (1.0 + 1e-3) {
                continue;
            }
            let v = boettcher(&f, z, 1e-14).map_err(|e| format!("z={z}: {e}"))?;
            conj = conj.max(v.conjugacy_defect);
            modulus = modulus.max(v.modulus_check);
            ensure(v.conjugacy_defect <= 1e-8 && v.modulus_check <= 1e-9, || {
                format!("z={z}: defect {:.1e}, modulus {:.1e}", v.conjugacy_defect, v.modulus_check)
            })?;
            checked += 1;
        }
        let far = Complex64::from_polar(1e6, rng.gen_range(0.0..TAU));
        let ratio = boettcher(&f, far, 1e-14).map_err(|e| e.to_string())?.w / far;
        let err = (ratio - 1.0).norm().max(wrap_pi(ratio.arg()).abs());
        far_err = far_err.max(err);
        ensure(err <= 1e-4, || format!("φ(z)/z = {ratio} at |z| = 1e6"))?;
    }
    Ok(format!("1000 cubics: conjugacy {conj:.1e}, modulus {modulus:.1e}, |φ(z)/z - 1| {far_err:.1e}"))
}

fn cli_degree_three_complex() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_critheights"))
        .args(["complex", "--d", "3", "--depth", "5"])
        .env("CRITHEIGHTS_CACHE", dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let cells = v["complex"]["cells"].as_array().ok_or("no cells")?;
    let dims: Vec<u64> = cells.iter().map(|c| c["dim"].as_u64().unwrap()).collect();
    let nv = dims.iter().filter(|&&x| x == 0).count();
    let ne = dims.iter().filter(|&&x| x == 1).count();
    ensure(nv == 6 && ne == 5 && dims.len() == 11, || format!("{nv} vertices, {ne} edges, {} cells", dims.len()))?;
    let mut degree = vec![0usize; cells.len()];
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for c in cells.iter().filter(|c| c["dim"] == 1) {
        let faces: Vec<usize> = c["faces"].as_array().unwrap().iter().map(|f| f.as_u64().unwrap() as usize).collect();
        ensure(faces.len() == 2, || format!("edge with faces {faces:?}"))?;
        for &f in &faces {
            degree[f] += 1;
        }
        adjacency[faces[0]].push(faces[1]);
        adjacency[faces[1]].push(faces[0]);
    }
    let vertices: Vec<usize> = (0..cells.len()).filter(|&i| dims[i] == 0).collect();
    let ends = vertices.iter().filter(|&&v| degree[v] == 1).count();
    ensure(ends == 2 && vertices.iter().all(|&v| degree[v] <= 2), || format!("degrees {degree:?}"))?;
    let mut seen = BTreeSet::from([vertices[0]]);
    let mut stack = vec![vertices[0]];
    while let Some(v) = stack.pop() {
        for &w in &adjacency[v] {
            if seen.insert(w) {
                stack.push(w);
            }
        }
    }
    ensure(seen.len() == 6, || "vertices not connected".into())?;
    let mut exponents = BTreeSet::new();
    for c in cells.iter().filter(|c| c["dim"] == 0) {
        let s: Vec<f64> = c["sample"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let k = -(s[1].ln() / 3f64.ln());
        ensure(s[0] == 1.0 && (k - k.round()).abs() < 1e-12, || format!("vertex sample {s:?}"))?;
        exponents.insert(k.round() as i64);
    }
    ensure(exponents == (0..=5).collect(), || format!("vertex exponents {exponents:?}"))?;
    Ok("6 vertices (1, 3^-n) for n = 0..5 joined by 5 edges into a path".into())
}

/// Arrangement of the lines `u = k`, `v = k`, `v - u = k` (`k = 0..depth`) inside
/// the triangle `0 <= u <= v <= depth`, where `(u, v)` are the base-4 log heights.
struct Arrangement {
    vertices: BTreeSet<(i64, i64)>,
    edges: usize,
    faces: usize,
}

fn line_arrangement(depth: i64) -> Arrangement {
    let inside = |(u, v): (i64, i64)| 0 <= u && u <= v && v <= depth;
    let mut lines: Vec<(i64, i64, i64)> = Vec::new(); // a·u + b·v = c
    for k in 0..=depth {
        lines.extend([(1, 0, k), (0, 1, k), (-1, 1, k)]);
    }
    let mut vertices = BTreeSet::new();
    for (i, &(a1, b1, c1)) in lines.iter().enumerate() {
        for &(a2, b2, c2) in &lines[i + 1..] {
            let det = a1 * b2 - a2 * b1;
            if det == 0 {
                continue;
            }
            let (un, vn) = (c1 * b2 - c2 * b1, a1 * c2 - a2 * c1);
            if un % det == 0 && vn % det == 0 && inside((un / det, vn / det)) {
                vertices.insert((un / det, vn / det));
            }
        }
    }
    let edges: usize = lines
        .iter()
        .map(|&(a, b, c)| vertices.iter().filter(|&&(u, v)| a * u + b * v == c).count().saturating_sub(1))
        .sum();
    let faces = edges + 1 - vertices.len();
    Arrangement { vertices, edges, faces }
}

fn degree_four_complex() -> Outcome {
    let log4 = |h: f64| -h.ln() / 4f64.ln();
    for depth in 1..=3u32 {
        let oracle = line_arrangement(depth as i64);
        let c = build_height_complex(4, depth);
        let counts = c.count_by_dim();
        let expect = vec![oracle.vertices.len(), oracle.edges, oracle.faces];
        ensure(counts == expect, || format!("depth {depth}: complex {counts:?}, arrangement {expect:?}"))?;
        let samples: BTreeSet<(i64, i64)> =
            c.cells_of_dim(0).map(|v| (log4(v.sample[1]).round() as i64, log4(v.sample[2]).round() as i64)).collect();
        ensure(samples == oracle.vertices, || format!("depth {depth}: vertex samples {samples:?}"))?;
        for e in c.cells_of_dim(1) {
            let (u, v) = (log4(e.sample[1]), log4(e.sample[2]));
            let on = [u, v, v - u].iter().filter(|x| (*x - x.round()).abs() < 1e-9).count();
            ensure(on == 1, || format!("edge sample ({u}, {v}) lies on {on} arrangement lines"))?;
        }
        for f in c.cells_of_dim(2) {
            let (u, v) = (log4(f.sample[1]), log4(f.sample[2]));
            let on = [u, v, v - u].iter().any(|x| (*x - x.round()).abs() < 1e-9);
            ensure(!on, || format!("2-cell sample ({u}, {v}) lies on an arrangement line"))?;
        }
    }
    Ok("depth 1..3 matches the log-coordinate line arrangement".into())
}

fn heights_rank() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut tied = 0;
    let opts = CensusOptions { min_seeds: 32, max_seeds: 32, ..CensusOptions::default() };
    let mut round = 0;
    while tied < 100 {
        round += 1;
        ensure(round <= 60, || format!("only {tied} tied cubics after 60 targets"))?;
        let s = rng.gen_range(0.3..2.0);
        let k = rng.gen_range(0..3);
        let target = HeightsVector::new(3, vec![s, s * 3f64.powi(-k)]).unwrap();
        let n = minimal_depth(&target);
        let angles: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..TAU)).collect();
        let image = PhiImage::from_heights_and_angles(n, 3, &target.heights, &angles);
        let (sols, _) = solve_target(3, &image, &[], target.max(), &opts);
        for f in sols {
            let h = heights(&f, &budget()).heights;
            let classes = independence_classes(&h, 1e-6).map_err(|e| e.to_string())?.len();
            ensure(classes == 1, || format!("{h:?} from target {target:?} has {classes} classes"))?;
            let rank = heights_jacobian(&f, 1e-6).map_err(|e| e.to_string())?.numerical_rank(1e-6);
            ensure(rank >= 1, || format!("rank {rank} at {f:?}"))?;
            tied += 1;
        }
    }
    for _ in 0..100 {
        let f = random_shift_polynomial(3, &mut rng, 0.05, true);
        let rank = heights_jacobian(&f, 1e-6).map_err(|e| e.to_string())?.numerical_rank(1e-6);
        ensure(rank >= 2, || format!("rank {rank} at {f:?}"))?;
    }
    Ok(format!("{tied} cubics with N = 1 have rank >= 1; 100 with N = 2 have rank 2"))
}

fn quadratic_census() -> Outcome {
    let opts = CensusOptions { min_seeds: 32, ..CensusOptions::default() };
    for h in [0.2, 0.5, 1.0, 2.0, 5.0] {
        let c = fiber_census(2, &HeightsVector::new(2, vec![h]).unwrap(), None, 16, &[], &opts)
            .map_err(|e| format!("h={h}: {e}"))?;
        ensure(c.components.len() == 1 && c.torus_check() == Some(true), || {
            format!("h={h}: {} components, torus {:?}", c.components.len(), c.torus_check())
        })?;
    }
    Ok("h = 0.2, 0.5, 1, 2, 5: one closed loop each".into())
}

fn cubic_census() -> Outcome {
    let opts = CensusOptions { build_trees: true, ..CensusOptions::default() };
    let mut report = Vec::new();
    for h in [[1.0, 0.52], [1.0, 0.37], [1.0, 0.2]] {
        let target = HeightsVector::new(3, h.to_vec()).unwrap();
        let coarse = fiber_census(3, &target, None, 8, &[], &opts).map_err(|e| format!("{h:?}: {e}"))?;
        let fine = fiber_census(3, &target, None, 16, &[], &opts).map_err(|e| format!("{h:?}: {e}"))?;
        for c in [&coarse, &fine] {
            ensure(c.accepted() && c.torus_check() == Some(true), || {
                format!("{h:?} grid {}: accepted {}, torus {:?}", c.angle_grid, c.accepted(), c.torus_check())
            })?;
            let worst = c.solutions.iter().map(|s| height_error(&s.poly, &target)).fold(0.0, f64::max);
            ensure(worst <= 1e-6, || format!("{h:?}: height error {worst:.1e}"))?;
        }
        ensure(coarse.components.len() == fine.components.len(), || {
            format!("{h:?}: {} components at grid 8, {} at grid 16", coarse.components.len(), fine.components.len())
        })?;
        let (tstar, t) = compare_projections(&fine, 1e-6);
        ensure(t <= tstar, || format!("{h:?}: T = {t} > T* = {tstar}"))?;
        report.push(format!("{h:?}: {} components, T*={tstar}, T={t}", fine.components.len()));
    }
    Ok(report.join("; "))
}

fn random_targets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let opts = CensusOptions { min_seeds: 32, max_seeds: 32, ..CensusOptions::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let h1 = rng.gen_range(0.3..2.5);
        let target = HeightsVector::new(3, vec![h1, h1 * rng.gen_range(0.02..1.0)]).unwrap();
        let n = minimal_depth(&target);
        let angles: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..TAU)).collect();
        let image = PhiImage::from_heights_and_angles(n, 3, &target.heights, &angles);
        let (sols, _) = solve_target(3, &image, &[], target.max(), &opts);
        let best = sols.iter().map(|f| height_error(f, &target)).fold(f64::INFINITY, f64::min);
        ensure(best <= 1e-6, || {
            format!("{target:?} (n = {n}): best height error {best:.1e} over {} solutions", sols.len())
        })?;
        worst = worst.max(best);
    }
    Ok(format!("20 targets solved, worst height error {worst:.1e}"))
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn deep_census() -> Outcome {
    let target = HeightsVector::new(3, vec![1.0, 3f64.powi(-5)]).unwrap();
    let grid = env_usize("CRITHEIGHTS_STRETCH_GRID", 4);
    let opts = CensusOptions {
        max_seeds: 256,
        max_solutions: env_usize("CRITHEIGHTS_STRETCH_BUDGET", 20_000),
        build_trees: true,
        ..CensusOptions::default()
    };
    match fiber_census(3, &target, None, grid, &[], &opts) {
        Ok(c) => {
            let (tstar, t) = compare_projections(&c, 1e-6);
            ensure(c.accepted() && tstar == t + 1, || {
                format!("n={}: accepted {}, T* = {tstar}, T = {t}", c.n, c.accepted())
            })?;
            Ok(format!("n={}: T* = {tstar} = T + 1", c.n))
        }
        Err(CensusError::BudgetExceeded { limit, per_cell }) => Err(format!(
            "budget exceeded: about {per_cell} solutions per cell over {} cells, budget {limit}",
            grid * grid
        )),
        Err(e) => Err(e.to_string()),
    }
}

fn tree_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let spec = GridSpec { resolution: 64, ..GridSpec::default() };
    let finer = GridSpec { resolution: 128, ..spec };
    let mut sizes = BTreeMap::<usize, usize>::new();
    for i in 0..200 {
        let f = random_shift_polynomial(3, &mut rng, 0.15, true);
        let crit = heights(&f, &budget()).heights;
        let floor = 0.8 * crit.min();
        let t = build_tree(&f, floor, spec).map_err(|e| format!("cubic {i}: {e}"))?;
        tree_invariants(&t, &crit.heights).map_err(|e| format!("cubic {i}: {e}"))?;
        let t2 = build_tree(&f, floor, finer).map_err(|e| format!("cubic {i}: {e}"))?;
        ensure(iso_test(&t, &t2, 1e-9).map_err(|e| e.to_string())?, || {
            format!("cubic {i}: tree changed from 64 to 128")
        })?;
        *sizes.entry(t.vertices.len()).or_default() += 1;
    }
    Ok(format!("200 cubics, vertex counts {sizes:?}"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        (1, "moduli matrix determinant and moduli sum", moduli_identities, true),
        (2, "escape-rate functional equation", escape_functional_equation, true),
        (3, "Böttcher coordinate", boettcher_coordinate, true),
        (4, "degree-3 heights complex from the CLI", cli_degree_three_complex, true),
        (5, "degree-4 heights complex", degree_four_complex, true),
        (6, "heights rank", heights_rank, true),
        (7, "quadratic census", quadratic_census, true),
        (8, "cubic census", cubic_census, true),
        (9, "random targets", random_targets, true),
        (10, "depth-6 cubic census (stretch)", deep_census, false),
        (11, "tree invariants", tree_checks, true),
    ];
    let mut failed = Vec::new();
    for (id, name, run, required) in criteria {
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("criterion {id}: PASS: {name}: {detail} ({secs:.1}s)"),
            Err(detail) => format!("criterion {id}: FAIL: {name}: {detail} ({secs:.1}s)"),
        };
        // Written past the test harness's output capture so the report shows in every run.
        writeln!(std::io::stdout(), "{line}").unwrap();
        if result.is_err() && required {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
