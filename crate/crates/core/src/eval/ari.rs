use std::collections::HashMap;

use crate::error::{Error, Result};

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same ground set.
///
/// Labels are arbitrary; only co-membership matters. When both partitions are
/// trivial in the same way (the chance-corrected denominator vanishes) the
/// score is 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand_index(p1: &[usize], p2: &[usize]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::Dimension { expected: p1.len(), got: p2.len() });
    }
    let n = p1.len();
    if n < 2 {
        return Err(Error::Invalid("adjusted Rand index needs at least two elements".into()));
    }
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in p1.iter().zip(p2) {
        *cells.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct pair-counting evaluation over all element pairs.
    pub(crate) fn pair_counting_ari(p1: &[usize], p2: &[usize]) -> f64 {
        let n = p1.len();
        let (mut both, mut only1, mut only2, mut neither) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (p1[i] == p1[j], p2[i] == p2[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only1 += 1.0,
                    (false, true) => only2 += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
        let total = both + only1 + only2 + neither;
        let same1 = both + only1;
        let same2 = both + only2;
        let expected = same1 * same2 / total;
        let max = 0.5 * (same1 + same2);
        (both - expected) / (max - expected)
    }

    #[test]
    fn identity_and_permutation() {
        let p = [1, 1, 2, 2, 3, 3, 3];
        assert_eq!(adjusted_rand_index(&p, &p).unwrap(), 1.0);
        let permuted = [9, 9, 4, 4, 1, 1, 1];
        assert_eq!(adjusted_rand_index(&p, &permuted).unwrap(), 1.0);
    }

    #[test]
    fn crossing_partitions() {
        let v = adjusted_rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        assert!((v - pair_counting_ari(&[1, 1, 2, 2], &[1, 2, 1, 2])).abs() < 1e-12);
        assert!((v + 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_element_is_an_error() {
        assert!(adjusted_rand_index(&[1], &[1]).is_err());
        assert!(adjusted_rand_index(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn degenerate_partitions() {
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[2, 2, 2]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[1, 2, 3]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_matches_pair_counting(
            pairs in prop::collection::vec((0usize..4, 0usize..5), 3..40)
        ) {
            let p1: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p2: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let a = adjusted_rand_index(&p1, &p2).unwrap();
            let b = adjusted_rand_index(&p2, &p1).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
            let trivial = |p: &[usize]| p.iter().all(|&v| v == p[0]) || {
                let mut s = p.to_vec(); s.sort_unstable(); s.dedup(); s.len() == p.len()
            };
            if !(trivial(&p1) && trivial(&p2)) {
                prop_assert!((a - pair_counting_ari(&p1, &p2)).abs() < 1e-12);
            }
            prop_assert_eq!(adjusted_rand_index(&p1, &p1).unwrap(), 1.0);
        }
    }
}
