use std::collections::BTreeSet;

use dynsparse_core::dataflow::{column_union_bound, reduction_report, simulate, Schedule, ScheduleKind};
use dynsparse_core::maskgen::{global_token_mask, random_mask};
use dynsparse_core::{Rng, SparseMask};
use proptest::prelude::*;

fn arbitrary_mask(l: usize, seed: u64) -> SparseMask {
    let mut rng = Rng::new(seed);
    let rows = (0..l)
        .map(|_| (0..l).filter(|_| rng.uniform() < 0.3).collect())
        .collect();
    SparseMask::from_rows(l, rows).unwrap()
}

/// Lock-step fetch count by direct enumeration of (step, column) pairs.
fn lockstep_fetches(mask: &SparseMask, band: usize) -> u64 {
    let mut total = 0;
    for first in (0..mask.l()).step_by(band) {
        let end = (first + band).min(mask.l());
        let pairs: BTreeSet<(usize, usize)> = (first..end)
            .flat_map(|i| mask.row(i).iter().copied().enumerate())
            .collect();
        total += pairs.len() as u64;
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedules_are_ordered(l in 1usize..=40, band in 1usize..=16, seed in any::<u64>()) {
        let m = arbitrary_mask(l, seed);
        let r = reduction_report(&m, band).unwrap();
        prop_assert!(r.row_parallel_reordered <= r.row_parallel);
        prop_assert!(r.row_parallel <= r.row_by_row);
        prop_assert_eq!(r.row_by_row, m.nnz() as u64);
    }

    #[test]
    fn reordered_equals_band_column_union(l in 1usize..=40, band in 1usize..=16, seed in any::<u64>()) {
        let m = arbitrary_mask(l, seed);
        let brute: u64 = (0..l)
            .step_by(band)
            .map(|first| {
                let set: BTreeSet<usize> = (first..(first + band).min(l)).flat_map(|i| m.row(i).to_vec()).collect();
                set.len() as u64
            })
            .sum();
        prop_assert_eq!(column_union_bound(&m, band), brute);
        let t = simulate(&m, Schedule::new(ScheduleKind::RowParallelReordered, band).unwrap());
        prop_assert_eq!(t.operand_fetches, brute);
    }

    #[test]
    fn row_parallel_matches_enumeration(l in 1usize..=40, band in 1usize..=16, seed in any::<u64>()) {
        let m = arbitrary_mask(l, seed);
        let t = simulate(&m, Schedule::new(ScheduleKind::RowParallel, band).unwrap());
        prop_assert_eq!(t.operand_fetches, lockstep_fetches(&m, band));
    }

    #[test]
    fn band_of_one_gains_nothing(l in 1usize..=40, seed in any::<u64>()) {
        let m = random_mask(l, 1 + l / 3, &mut Rng::new(seed)).unwrap();
        let r = reduction_report(&m, 1).unwrap();
        prop_assert_eq!(r.row_parallel, r.row_by_row);
        prop_assert_eq!(r.row_parallel_reordered, r.row_by_row);
    }
}

#[test]
fn diagonal_mask_has_no_sharing() {
    let m = SparseMask::diagonal(32);
    for band in [1, 4, 8, 32] {
        let r = reduction_report(&m, band).unwrap();
        assert_eq!((r.row_by_row, r.row_parallel, r.row_parallel_reordered), (32, 32, 32));
    }
}

#[test]
fn global_tokens_are_shared_after_reordering() {
    let m = global_token_mask(64, 4, 4).unwrap();
    let r = reduction_report(&m, 8).unwrap();
    assert!(r.ratio_reordered > 1.5, "{r:?}");
    assert!(r.row_parallel_reordered < r.row_parallel);
}
