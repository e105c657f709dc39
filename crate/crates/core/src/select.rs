//! Deterministic top-k selection.
//!
//! Larger values rank first; among equal values the smaller index wins. Every
//! router in the crate selects through this module so the tie rule is shared.

use std::cmp::Ordering;

#[inline]
pub(crate) fn rank_cmp(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` best entries, best first. `k` is clamped to the length.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(values, a, b));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_go_to_the_smaller_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 0.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[-0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn degenerate_k() {
        assert!(top_k_indices(&[1.0, 2.0], 0).is_empty());
        assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
        assert!(top_k_indices(&[], 3).is_empty());
    }

    proptest! {
        #[test]
        fn matches_full_sort(v in prop::collection::vec(-3i32..3, 0..20), k in 0usize..25) {
            let values: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let mut all: Vec<usize> = (0..values.len()).collect();
            all.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
            all.truncate(k);
            prop_assert_eq!(top_k_indices(&values, k), all);
        }
    }
}
