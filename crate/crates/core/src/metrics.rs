//! Classification and sampler-quality metrics.

use crate::error::{Error, Result};

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(preds: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(truth) {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        totals[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| totals[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::invalid("balanced accuracy needs at least one labelled item"));
    }
    let sum: f64 = present.iter().map(|&c| hits[c] as f64 / totals[c] as f64).sum();
    Ok(sum / present.len() as f64)
}

/// Binary AUC from midranks (Mann-Whitney U); ties count one half.
/// `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives. `scores` is row-major `[N, num_classes]`.
pub fn macro_auc(scores: &[f64], truth: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes == 0 || scores.len() != truth.len() * num_classes {
        return Err(Error::invalid(format!(
            "score matrix of {} values does not match {} items x {} classes",
            scores.len(),
            truth.len(),
            num_classes
        )));
    }
    if let Some(&y) = truth.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut column = vec![0.0; truth.len()];
    let mut positive = vec![false; truth.len()];
    for c in 0..num_classes {
        for (i, &y) in truth.iter().enumerate() {
            column[i] = scores[i * num_classes + c];
            positive[i] = y == c;
        }
        if let Some(auc) = binary_auc(&column, &positive) {
            total += auc;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("no class has both positive and negative examples"));
    }
    Ok(total / used as f64)
}

/// Fraction of selected indices (duplicates included) that land on a
/// planted signal frame, pooled over items.
pub fn signal_hit_rate(selected: &[Vec<usize>], signal: &[Vec<usize>]) -> Result<f64> {
    if selected.len() != signal.len() {
        return Err(Error::invalid(format!(
            "{} selections for {} items",
            selected.len(),
            signal.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (sel, sig) in selected.iter().zip(signal) {
        total += sel.len();
        hits += sel.iter().filter(|i| sig.contains(i)).count();
    }
    if total == 0 {
        return Err(Error::invalid("no selected indices"));
    }
    Ok(hits as f64 / total as f64)
}

/// Index of the largest score in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &[f64], num_classes: usize) -> Vec<usize> {
    scores
        .chunks(num_classes)
        .map(crate::sampler::argmax)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap(), (2.0 / 3.0 + 1.0) / 2.0);
        assert_eq!(balanced_accuracy(&[0, 1, 0, 0], &[0, 1, 1, 0], 2).unwrap(), 0.75);
        // class 2 absent from truth is skipped
        assert_eq!(balanced_accuracy(&[2, 1], &[0, 1], 3).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[], 3).is_err());
        assert!(balanced_accuracy(&[0], &[4], 3).is_err());
        assert!(balanced_accuracy(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn balanced_accuracy_of_random_guessing() {
        let mut s = RandomStream::new(4);
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|_| s.below(5)).collect();
        let preds: Vec<usize> = (0..n).map(|_| s.below(5)).collect();
        let b = balanced_accuracy(&preds, &truth, 5).unwrap();
        assert!((b - 0.2).abs() < 0.02, "{b}");
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &pos), Some(0.75));
        assert_eq!(binary_auc(&[0.1, 0.2, 0.3, 0.4], &pos), Some(1.0));
        assert_eq!(binary_auc(&[0.4, 0.3, 0.2, 0.1], &pos), Some(0.0));
        assert_eq!(binary_auc(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(binary_auc(&[0.1, 0.2], &[true, true]), None);

        let scores = [0.9, 0.1, 0.2, 0.8];
        assert_eq!(macro_auc(&scores, &[0, 1], 2).unwrap(), 1.0);
        assert!(macro_auc(&[0.5, 0.5], &[0], 2).is_err());
        assert!(macro_auc(&[0.5; 3], &[0, 1], 2).is_err());
    }

    #[test]
    fn macro_auc_skips_single_label_classes() {
        // class 2 never appears, so it has no positives
        let scores = [0.7, 0.2, 0.1, 0.3, 0.6, 0.1, 0.6, 0.3, 0.1];
        let truth = [0, 1, 0];
        let a0 = pairwise_auc(&[0.7, 0.3, 0.6], &[true, false, true]).unwrap();
        let a1 = pairwise_auc(&[0.2, 0.6, 0.3], &[false, true, false]).unwrap();
        assert_eq!(macro_auc(&scores, &truth, 3).unwrap(), (a0 + a1) / 2.0);
    }

    #[test]
    fn hit_rate_counts_duplicates() {
        let sel = vec![vec![1, 1, 4], vec![0, 2]];
        let sig = vec![vec![1, 3], vec![5]];
        assert_eq!(signal_hit_rate(&sel, &sig).unwrap(), 2.0 / 5.0);
        assert!(signal_hit_rate(&sel, &sig[..1]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            n in 2usize..50,
            classes in 2usize..5,
            seed in any::<u64>(),
        ) {
            let mut s = RandomStream::new(seed);
            let truth: Vec<usize> = (0..n).map(|_| s.below(classes)).collect();
            // coarse grid so that ties are common
            let scores: Vec<f64> = (0..n * classes).map(|_| s.below(6) as f64 / 5.0).collect();
            let mut total = 0.0;
            let mut used = 0;
            for c in 0..classes {
                let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
                let pos: Vec<bool> = truth.iter().map(|&y| y == c).collect();
                if let Some(a) = pairwise_auc(&col, &pos) {
                    total += a;
                    used += 1;
                }
            }
            match macro_auc(&scores, &truth, classes) {
                Ok(v) => prop_assert!((v - total / used as f64).abs() < 1e-10),
                Err(_) => prop_assert_eq!(used, 0),
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(n in 1usize..40, seed in any::<u64>()) {
            let mut s = RandomStream::new(seed);
            let truth: Vec<usize> = (0..n).map(|_| s.below(3)).collect();
            let preds: Vec<usize> = (0..n).map(|_| s.below(3)).collect();
            let b = balanced_accuracy(&preds, &truth, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
