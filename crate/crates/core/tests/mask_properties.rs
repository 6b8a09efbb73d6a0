use dynsparse_core::maskgen::{colvec_mask, keep_per_row, oracle_topk_mask, ColVecSpec};
use dynsparse_core::{Matrix, Precision, Rng};
use proptest::prelude::*;

fn scores(l: usize, seed: u64) -> Matrix {
    Matrix::random_normal(l, l, 1.0, &mut Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn topk_masks_nest(l in 2usize..=40, seed in any::<u64>(), a in 1usize..=40, b in 1usize..=40) {
        let s = scores(l, seed);
        let (small, large) = (a.min(b).min(l), a.max(b).min(l));
        let m_small = oracle_topk_mask(&s, small).unwrap();
        let m_large = oracle_topk_mask(&s, large).unwrap();
        prop_assert!(m_small.is_subset_of(&m_large));
        prop_assert_eq!(m_small.balanced_count(), Some(small));
    }

    #[test]
    fn topk_is_invariant_to_positive_scale(l in 2usize..=40, seed in any::<u64>(), keep in 1usize..=40, c in 1e-3f64..1e3) {
        let s = scores(l, seed);
        let keep = keep.min(l);
        prop_assert_eq!(oracle_topk_mask(&s, keep).unwrap(), oracle_topk_mask(&s.scale(c), keep).unwrap());
    }

    #[test]
    fn topk_keeps_the_largest_entries(l in 2usize..=32, seed in any::<u64>(), keep in 1usize..=32) {
        let s = scores(l, seed);
        let keep = keep.min(l);
        let m = oracle_topk_mask(&s, keep).unwrap();
        for i in 0..l {
            let kept_min = m.row(i).iter().map(|&j| s.get(i, j)).fold(f64::INFINITY, f64::min);
            for j in 0..l {
                if !m.contains(i, j) {
                    prop_assert!(s.get(i, j) <= kept_min);
                }
            }
        }
    }

    #[test]
    fn colvec_masks_are_made_of_whole_vectors(l in 2usize..=48, v in 1usize..=8, seed in any::<u64>(), sparsity in 0.05f64..0.95) {
        let s = scores(l, seed);
        let m = colvec_mask(&s, ColVecSpec::column(v), sparsity).unwrap();
        prop_assert_eq!(m.balanced_count(), Some(keep_per_row(l, sparsity)));
        for band in (0..l).step_by(v) {
            let end = (band + v).min(l);
            for i in band..end {
                prop_assert_eq!(m.row(i), m.row(band));
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(l in 1usize..=16, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let s = scores(l, seed).with_precision(Precision::High);
        let shifted = s.map(|x| x + shift);
        prop_assert!(s.row_softmax().sub(&shifted.row_softmax()).unwrap().max_abs() < 1e-12);
    }
}
