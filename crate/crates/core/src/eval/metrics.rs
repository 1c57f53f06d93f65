//! Regression metrics over (prediction, target) pairs. Correlations on
//! degenerate (zero-variance) inputs report as undefined (`None`), never 0.

/// Average ranks (1-based), ties receiving the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the value; average rank is 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn rmse(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    (pairs.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn mae(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / pairs.len() as f64
}

/// Coefficient of determination, 1 - SS_res / SS_tot; undefined when the
/// targets have zero variance.
pub fn r2(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = pairs.iter().map(|(p, y)| (y - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return None;
    }
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in pairs {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x).powi(2);
        var_y += (y - mean_y).powi(2);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return None;
    }
    // sqrt of the product: identical inputs give exactly 1.0
    Some(cov / (var_x * var_y).sqrt())
}

/// Spearman rank correlation: Pearson of average-tie ranks.
pub fn spearman(pairs: &[(f64, f64)]) -> Option<f64> {
    let xs: Vec<f64> = pairs.iter().map(|(x, _)| *x).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let rank_pairs: Vec<(f64, f64)> = rx.into_iter().zip(ry).collect();
    pearson(&rank_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_fit_is_perfect_everywhere() {
        let pairs: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, i as f64)).collect();
        assert_eq!(rmse(&pairs), 0.0);
        assert_eq!(mae(&pairs), 0.0);
        assert_eq!(r2(&pairs), Some(1.0));
        assert_eq!(pearson(&pairs), Some(1.0));
        assert_eq!(spearman(&pairs), Some(1.0));
    }

    #[test]
    fn predicting_the_mean_gives_zero_r2() {
        let ys = [3.0, 5.0, 7.0, 9.0];
        let mean = 6.0;
        let pairs: Vec<(f64, f64)> = ys.iter().map(|&y| (mean, y)).collect();
        assert_eq!(r2(&pairs), Some(0.0));
    }

    #[test]
    fn spearman_matches_a_hand_rank_oracle() {
        // {(1,2),(2,1),(3,4),(4,3)}: ranks x [1,2,3,4], y [2,1,4,3]
        let pairs = [(1.0, 2.0), (2.0, 1.0), (3.0, 4.0), (4.0, 3.0)];
        let rho = spearman(&pairs).unwrap();
        // Pearson of the ranks by hand: cov 3, var 5 each -> 0.6
        assert!((rho - 0.6).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_make_correlations_undefined() {
        let pairs = [(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)];
        assert_eq!(pearson(&pairs), None);
        assert_eq!(spearman(&pairs), None);
        assert_eq!(r2(&pairs), None);
    }

    #[test]
    fn ties_receive_average_ranks() {
        let ranks = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn rmse_dominates_mae() {
        let pairs = [(1.0, 3.0), (2.0, 2.5), (8.0, 4.0), (0.0, 1.0)];
        assert!(rmse(&pairs) >= mae(&pairs));
    }
}
