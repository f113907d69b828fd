//! Few-shot splitting and threshold-free evaluation.

use rand::seq::index::sample;

use crate::error::{ConsultError, Result};
use crate::seed::{child_rng, TAG_SPLIT};

/// Uniformly samples `k` of `pool_len` indices without replacement. Returns
/// the chosen indices (ascending) and the discarded rest.
pub fn split_few_shot(pool_len: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(ConsultError::Config("shots must be at least 1".into()));
    }
    if pool_len < k {
        return Err(ConsultError::Data(format!(
            "healthy pool of {pool_len} cannot supply {k} shots"
        )));
    }
    let mut rng = child_rng(seed, TAG_SPLIT, 0);
    let mut chosen = sample(&mut rng, pool_len, k).into_vec();
    chosen.sort_unstable();
    let discarded = (0..pool_len).filter(|i| chosen.binary_search(i).is_err()).collect();
    Ok((chosen, discarded))
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
/// `anomalous[i]` marks the positive class.
pub fn auroc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(ConsultError::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ConsultError::Numerical("NaN score".into()));
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count();
    let n_neg = anomalous.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ConsultError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&i| anomalous[i]).map(|i| ranks[i]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count(scores: &[f64], anomalous: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &a) in anomalous.iter().enumerate() {
            for (j, &b) in anomalous.iter().enumerate() {
                if a && !b {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[1.0, 1.0], &[false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(ConsultError::UndefinedMetric(_))));
    }

    #[test]
    fn null_case_is_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..4000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..4000).map(|_| rng.random_bool(0.5)).collect();
        assert!((auroc(&s, &l).unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn split_examples() {
        let (few, rest) = split_few_shot(5, 5, 1).unwrap();
        assert_eq!((few, rest), ((0..5).collect(), vec![]));
        assert_eq!(split_few_shot(100, 4, 7).unwrap(), split_few_shot(100, 4, 7).unwrap());
        assert!(split_few_shot(3, 4, 0).is_err());
    }

    #[test]
    fn split_is_uniform() {
        let mut hits = vec![0usize; 100];
        let trials = 1000;
        for seed in 0..trials {
            let (few, rest) = split_few_shot(100, 2, seed).unwrap();
            assert_eq!(few.len() + rest.len(), 100);
            assert_ne!(few[0], few[1]);
            for i in few {
                hits[i] += 1;
            }
        }
        // Each index is a binomial(1000, 0.02) count.
        let p = 0.02;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        let outliers = hits.iter().filter(|&&h| (h as f64 - trials as f64 * p).abs() > 3.0 * sd).count();
        assert!(outliers <= 1, "{outliers} indices outside 3 sigma");
    }

    proptest! {
        #[test]
        fn matches_pair_counting_and_is_rank_invariant(
            data in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - pair_count(&scores, &labels)).abs() < 1e-12);
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(a, auroc(&e, &labels).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
