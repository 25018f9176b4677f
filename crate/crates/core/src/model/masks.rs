use crate::autodiff::Mask;

/// Lagging value standing in for `k = ∞`.
pub const K_INF: usize = usize::MAX;

/// Smallest 1-based `i` with `Σ_{l≤i} b_l ≥ t + k − 1`, or `|a|` when the
/// stream holds fewer segments.
pub fn g_of_t(b: &[bool], t: usize, k: usize) -> usize {
    let need = t.saturating_add(k).saturating_sub(1);
    let mut seen = 0;
    for (i, &cut) in b.iter().enumerate() {
        seen += cut as usize;
        if seen >= need {
            return i + 1;
        }
    }
    b.len()
}

/// Row `t` allows features `1..=g_of_t(b, t, k)`.
pub fn wait_seg_decoder_mask(b: &[bool], k: usize, target_len: usize) -> Mask {
    let limits: Vec<usize> = (1..=target_len).map(|t| g_of_t(b, t, k)).collect();
    Mask::from_fn(target_len, b.len(), |t, j| j < limits[t])
}

/// Text wait-k: row `t` sees the subwords of words `1..=min(t + k − 1, K)`.
/// `word_ends` holds the last subword (1-based) of each word.
pub fn wait_k_decoder_mask(word_ends: &[usize], k: usize, target_len: usize) -> Mask {
    let kk = word_ends.len();
    let cols = word_ends.last().copied().unwrap_or(0);
    let limits: Vec<usize> = (1..=target_len)
        .map(|t| word_ends[t.saturating_add(k).saturating_sub(1).clamp(1, kk) - 1])
        .collect();
    Mask::from_fn(target_len, cols, |t, j| j < limits[t])
}

/// Mask whose row `t` allows the first `visible[t]` of `cols` columns.
pub fn prefix_mask(visible: &[usize], cols: usize) -> Mask {
    Mask::from_fn(visible.len(), cols, |t, j| j < visible[t])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_of_t(&bits(&[1, 1, 1]), 2, 1), 2);
        assert_eq!(g_of_t(&bits(&[0, 1, 0, 1]), 1, 2), 4);
        assert_eq!(g_of_t(&bits(&[0, 1, 0, 0]), 2, 2), 4);
        assert_eq!(g_of_t(&bits(&[1, 0]), 1, K_INF), 2);
    }

    #[test]
    fn offline_limit_allows_everything() {
        let b = bits(&[0, 1, 1, 0, 1]);
        let m = wait_seg_decoder_mask(&b, 4, 3);
        assert!((0..3).all(|t| m.row_allowed_count(t) == 5));
    }

    #[test]
    fn per_frame_segments() {
        let b = vec![true; 6];
        let m = wait_seg_decoder_mask(&b, 1, 4);
        for t in 0..4 {
            assert_eq!(m.row_allowed_count(t), t + 1);
            assert!(m.allowed(t, t) && (t + 1 >= 6 || !m.allowed(t, t + 1)));
        }
    }

    #[test]
    fn single_row() {
        let b = bits(&[0, 1, 0, 1, 0]);
        let m = wait_seg_decoder_mask(&b, 2, 1);
        assert_eq!(m.row_allowed_count(0), g_of_t(&b, 1, 2));
        assert_eq!(m.row_allowed_count(0), 4);
    }

    #[test]
    fn wait_k_counts_words() {
        // Words span subwords [1,2], [3], [4,5].
        let ends = [2, 3, 5];
        let m = wait_k_decoder_mask(&ends, 1, 4);
        let counts: Vec<usize> = (0..4).map(|t| m.row_allowed_count(t)).collect();
        assert_eq!(counts, vec![2, 3, 5, 5]);
        let m = wait_k_decoder_mask(&ends, 2, 2);
        assert_eq!((0..2).map(|t| m.row_allowed_count(t)).collect::<Vec<_>>(), vec![3, 5]);
        let m = wait_k_decoder_mask(&ends, K_INF, 2);
        assert_eq!(m.row_allowed_count(0), 5);
    }

    proptest! {
        #[test]
        fn rows_are_nested_prefixes(b in prop::collection::vec(any::<bool>(), 1..30), k in 1usize..6, ny in 1usize..12) {
            let m = wait_seg_decoder_mask(&b, k, ny);
            for t in 0..ny {
                let n = m.row_allowed_count(t);
                prop_assert!(n >= 1);
                prop_assert!((0..b.len()).all(|j| m.allowed(t, j) == (j < n)));
                if t > 0 {
                    prop_assert!(n >= m.row_allowed_count(t - 1));
                }
                let segments = b[..n].iter().filter(|&&x| x).count();
                prop_assert!(n == b.len() || segments == t + k);
            }
        }
    }
}
