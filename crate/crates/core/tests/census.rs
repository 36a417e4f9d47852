use critheights::census::{compare_projections, fiber_census, height_error, locate, rank_probe, CensusOptions};
use critheights::HeightsVector;

fn target(h: &[f64]) -> HeightsVector {
    HeightsVector::new(h.len() + 1, h.to_vec()).unwrap()
}

#[test]
fn generic_cubic_fiber_is_grid_stable() {
    let t = target(&[1.0, 0.52]);
    let opts = CensusOptions::default();
    let coarse = fiber_census(3, &t, None, 8, &[], &opts).unwrap();
    let fine = fiber_census(3, &t, None, 16, &[], &opts).unwrap();
    assert!(coarse.accepted() && fine.accepted());
    assert_eq!(coarse.components.len(), fine.components.len());
    assert_eq!(coarse.solutions.len(), 3);
    assert_eq!(fine.torus_check(), Some(true));
    let (tstar, t) = compare_projections(&fine, 1e-6);
    assert!(t <= tstar);
    for s in &fine.solutions {
        assert!(s.residual < 1e-9);
        assert!(height_error(&s.poly, &fine.target) < 1e-8);
    }
}

#[test]
fn deeper_cubic_fiber_splits() {
    let t = target(&[1.0, 0.2]);
    let census = fiber_census(3, &t, None, 8, &[], &CensusOptions::default()).unwrap();
    assert_eq!(census.n, 2);
    assert_eq!(census.solutions.len(), 27);
    assert_eq!(census.components.len(), 2);
    assert_eq!(census.torus_check(), Some(true));
    let sizes: usize = census.components.iter().map(|c| c.solutions.len()).sum();
    assert_eq!(sizes, 27);
    for c in &census.components {
        assert!(c.tree.is_some(), "{:?}", c.tree_error);
        assert_eq!(locate(&census, &c.representative), Some(c.id));
    }
    let (tstar, tcount) = compare_projections(&census, 1e-6);
    assert!(tcount <= tstar);
}

#[test]
fn non_generic_target_skips_torus_check() {
    let census = fiber_census(3, &target(&[1.0, 1.0 / 3.0]), Some(2), 8, &[], &CensusOptions::default()).unwrap();
    assert!(!census.generic);
    assert_eq!(census.torus_check(), None);
    assert_eq!(census.classes, 1);
    assert!(census.accepted());
}

#[test]
fn rank_meets_class_count_across_fiber() {
    for h in [[1.0, 0.52], [1.0, 1.0]] {
        let census =
            fiber_census(3, &target(&h), None, 8, &[], &CensusOptions { build_trees: false, ..Default::default() })
                .unwrap();
        let report = rank_probe(&census);
        assert_eq!(report.checked, census.solutions.len());
        assert!(report.violations.is_empty(), "{report:?}");
    }
}
