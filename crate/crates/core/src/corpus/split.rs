use rand::seq::SliceRandom;

use super::CaseCorpus;
use crate::error::{invalid, Result};
use crate::seed;

/// Seeded partition of `0..n` into train/val/test index lists.
///
/// Sizes are the rounded ratio shares (test takes the remainder); each part
/// gets at least one element. Indices within each part are ascending.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    if n < 3 {
        return Err(invalid(format!("cannot split {n} items three ways")));
    }
    let mut n_train = ((n as f64) * a).round() as usize;
    let mut n_val = ((n as f64) * b).round() as usize;
    n_train = n_train.clamp(1, n - 2);
    n_val = n_val.clamp(1, n - n_train - 1);
    if n_train + n_val >= n {
        n_train = n - n_val - 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

/// Splits by case, so no case straddles two parts.
pub fn split_corpus(corpus: &CaseCorpus, ratios: (f64, f64, f64), seed: u64) -> Result<(CaseCorpus, CaseCorpus, CaseCorpus)> {
    let [train, val, test] = split_indices(corpus.len(), ratios, seed)?;
    Ok((corpus.subset(&train), corpus.subset(&val), corpus.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_ratio() {
        let [a, b, c] = split_indices(10, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_indices(10, (0.8, 0.1, 0.1), 7).unwrap(), [a, b, c]);
    }

    #[test]
    fn imljp_scale_sizes() {
        let [a, b, c] = split_indices(20_706, (0.8, 0.1, 0.1), 1).unwrap();
        assert!((a.len() as f64 - 16_564.8).abs() <= 1.0);
        assert!((b.len() as f64 - 2_070.6).abs() <= 1.0);
        assert!((c.len() as f64 - 2_070.6).abs() <= 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_indices(2, (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_indices(10, (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_indices(10, (1.0, 0.0, 0.0), 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions(n in 3usize..400, seed in any::<u64>()) {
            let [a, b, c] = split_indices(n, (0.8, 0.1, 0.1), seed).unwrap();
            prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
            let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n >= 10 {
                prop_assert!((a.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
                prop_assert!((b.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
                prop_assert!((c.len() as f64 - 0.1 * n as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
