mod common;

use std::collections::BTreeSet;

use common::{brute_force, gaussian, random_unit_matrix, rng};
use nemb::evaluation::{
    broken_set, concat_ensemble, count_triplets, evaluate, intersection, BrokenSet, DatasetItem,
    EmbeddingMatrix, GroupedDataset, Role,
};
use proptest::prelude::*;
use rand::Rng;

fn random_dataset(r: &mut impl Rng, max_items: usize) -> GroupedDataset {
    let n = r.random_range(2..=max_items);
    let groups = r.random_range(1..=5);
    let items = (0..n)
        .map(|i| DatasetItem {
            id: format!("item{i}"),
            group: format!("grp{}", r.random_range(0..groups)),
            role: match r.random_range(0..4) {
                0 => Role::AnchorOnly,
                1 => Role::CandidateOnly,
                _ => Role::Both,
            },
            text: None,
        })
        .collect();
    GroupedDataset::new(items).unwrap()
}

fn ids(ds: &GroupedDataset) -> Vec<String> {
    ds.items().iter().map(|i| i.id.clone()).collect()
}

fn id_set(set: &BrokenSet, ds: &GroupedDataset) -> BTreeSet<(String, String, String)> {
    set.triplets()
        .iter()
        .map(|&[a, b, c]| {
            let id = |i: u32| ds.items()[i as usize].id.clone();
            (id(a), id(b), id(c))
        })
        .collect()
}

/// Rows drawn from a handful of directions, so exact similarity ties occur.
fn coarse_matrix(ids: &[String], r: &mut impl Rng) -> EmbeddingMatrix {
    let palette: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| gaussian(r)).collect())
        .collect();
    let rows = ids
        .iter()
        .map(|_| palette[r.random_range(0..palette.len())].clone())
        .collect();
    EmbeddingMatrix::from_rows(ids.to_vec(), rows).unwrap()
}

fn assert_matches_oracle(e: &EmbeddingMatrix, ds: &GroupedDataset) {
    let fast = evaluate(e, ds).unwrap();
    let oracle = brute_force(e, ds);
    assert_eq!(fast.total_triplets, oracle.total);
    assert_eq!(fast.total_triplets, count_triplets(ds));
    assert_eq!(fast.broken_triplets, oracle.broken);
    assert!((fast.same_avg - oracle.same_avg).abs() <= 1e-9);
    assert!((fast.diff_avg - oracle.diff_avg).abs() <= 1e-9);
    assert!((fast.error_global - oracle.error_global).abs() <= 1e-12);
    assert!((fast.error_per_anchor_avg - oracle.error_per_anchor_avg).abs() <= 1e-12);
    let set = broken_set(e, ds, None).unwrap();
    assert_eq!(set.len() as u64, oracle.broken);
    assert_eq!(id_set(&set, ds), oracle.broken_set);
}

#[test]
fn fast_path_matches_brute_force_on_random_instances() {
    let mut r = rng(11);
    for _ in 0..50 {
        let ds = random_dataset(&mut r, 60);
        let dim = r.random_range(2..8);
        let e = random_unit_matrix(&ids(&ds), dim, &mut r);
        assert_matches_oracle(&e, &ds);
    }
}

#[test]
fn fast_path_matches_brute_force_with_ties() {
    let mut r = rng(12);
    for _ in 0..50 {
        let ds = random_dataset(&mut r, 40);
        let e = coarse_matrix(&ids(&ds), &mut r);
        assert_matches_oracle(&e, &ds);
    }
}

#[test]
fn balanced_designs_give_identical_error_aggregations() {
    let mut r = rng(13);
    for _ in 0..50 {
        let groups = r.random_range(2..6);
        let per_group = r.random_range(2..12);
        let ds = GroupedDataset::shaped(groups, per_group, 0, 0);
        let e = random_unit_matrix(&ids(&ds), r.random_range(2..6), &mut r);
        let rep = evaluate(&e, &ds).unwrap();
        assert_eq!(
            rep.error_global.to_bits(),
            rep.error_per_anchor_avg.to_bits()
        );
    }
}

#[test]
fn extra_store_rows_are_ignored_and_missing_rows_named() {
    let ds = GroupedDataset::shaped(2, 3, 0, 0);
    let mut all = ids(&ds);
    all.push("unused".into());
    let e = random_unit_matrix(&all, 4, &mut rng(14));
    assert_matches_oracle(&e, &ds);
    let short = random_unit_matrix(&all[1..], 4, &mut rng(14));
    let err = evaluate(&short, &ds).unwrap_err();
    assert!(err.to_string().contains(&all[0]), "{err}");
}

fn rotate(e: &EmbeddingMatrix, r: &mut impl Rng) -> EmbeddingMatrix {
    // Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
    let d = e.dim();
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(r)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    e.map_rows(|row| {
        q.iter()
            .map(|qi| qi.iter().zip(row).map(|(a, b)| a * b).sum())
            .collect()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rotation_leaves_the_report_nearly_unchanged(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 30);
        let e = random_unit_matrix(&ids(&ds), 5, &mut r);
        let a = evaluate(&e, &ds).unwrap();
        let b = evaluate(&rotate(&e, &mut r), &ds).unwrap();
        prop_assert_eq!(a.total_triplets, b.total_triplets);
        // rotations only perturb similarities at rounding level
        let slack = (a.total_triplets / 1000).max(2);
        prop_assert!(a.broken_triplets.abs_diff(b.broken_triplets) <= slack);
        prop_assert!((a.same_avg - b.same_avg).abs() < 1e-9);
        prop_assert!((a.diff_avg - b.diff_avg).abs() < 1e-9);
    }

    #[test]
    fn self_ensemble_changes_nothing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 30);
        let e = random_unit_matrix(&ids(&ds), 4, &mut r);
        let ee = concat_ensemble(&e, &e).unwrap();
        prop_assert_eq!(ee.dim(), 2 * e.dim());
        let (a, b) = (evaluate(&e, &ds).unwrap(), evaluate(&ee, &ds).unwrap());
        prop_assert_eq!(a.broken_triplets, b.broken_triplets);
        prop_assert_eq!(a.total_triplets, b.total_triplets);
    }

    #[test]
    fn intersection_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 25);
        let e1 = random_unit_matrix(&ids(&ds), 3, &mut r);
        let e2 = random_unit_matrix(&ids(&ds), 3, &mut r);
        let (s1, s2) = (broken_set(&e1, &ds, None).unwrap(), broken_set(&e2, &ds, None).unwrap());
        let i12 = intersection(&s1, &s2);
        prop_assert_eq!(i12, intersection(&s2, &s1));
        prop_assert!((0.0..=1.0).contains(&i12));
        if !s1.is_empty() {
            prop_assert_eq!(intersection(&s1, &s1), 1.0);
        }
    }
}
