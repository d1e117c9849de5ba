use nalgebra::DMatrix;

use super::ProbeError;

const EPS: f64 = 1e-9;

/// Multivariate Fisher score: for each coordinate, between-class scatter
/// over within-class scatter (population variances), summed over coordinates.
pub fn fisher_score(x: &DMatrix<f64>, classes: &[usize]) -> Result<f64, ProbeError> {
    let (m, d) = x.shape();
    if classes.len() != m {
        return Err(ProbeError::Shape(format!("{m} rows but {} class labels", classes.len())));
    }
    let k = classes.iter().max().map_or(0, |&c| c + 1);
    let mut counts = vec![0usize; k];
    for &c in classes {
        counts[c] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let mut score = 0.0;
    for col in 0..d {
        let mut sums = vec![0.0; k];
        for (r, &c) in classes.iter().enumerate() {
            sums[c] += x[(r, col)];
        }
        let mean = sums.iter().sum::<f64>() / m as f64;
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        let between: f64 = means
            .iter()
            .zip(&counts)
            .map(|(mu, &n)| n as f64 * (mu - mean).powi(2))
            .sum();
        let within: f64 = classes
            .iter()
            .enumerate()
            .map(|(r, &c)| (x[(r, col)] - means[c]).powi(2))
            .sum();
        score += between / (within + EPS);
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let x = DMatrix::from_row_slice(4, 3, &[0., 0., 0., 2., 0., 0., 4., 0., 0., 6., 0., 0.]);
        let s = fisher_score(&x, &[0, 0, 1, 1]).unwrap();
        assert!((s - 4.0).abs() < 1e-8, "{s}");
    }

    #[test]
    fn identical_classes_score_zero() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 2., 3., 4., 1., 2., 3., 4.]);
        assert!(fisher_score(&x, &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[1., 2.]);
        assert!(matches!(fisher_score(&x, &[0, 0]), Err(ProbeError::SingleClass)));
    }

    proptest! {
        #[test]
        fn translation_invariant(vals in prop::collection::vec(-5.0f64..5.0, 24), shift in -10.0f64..10.0) {
            let x = DMatrix::from_row_slice(8, 3, &vals);
            let classes = [0, 1, 2, 0, 1, 2, 0, 1];
            let a = fisher_score(&x, &classes).unwrap();
            let b = fisher_score(&x.add_scalar(shift), &classes).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
        }

        #[test]
        fn scaling_preserves_ranking(a in prop::collection::vec(-5.0f64..5.0, 16), b in prop::collection::vec(-5.0f64..5.0, 16), c in 0.5f64..20.0) {
            let classes = [0, 0, 0, 0, 1, 1, 1, 1];
            let xa = DMatrix::from_row_slice(8, 2, &a);
            let xb = DMatrix::from_row_slice(8, 2, &b);
            let (sa, sb) = (fisher_score(&xa, &classes).unwrap(), fisher_score(&xb, &classes).unwrap());
            let (ta, tb) = (fisher_score(&(&xa * c), &classes).unwrap(), fisher_score(&(&xb * c), &classes).unwrap());
            prop_assume!((sa - sb).abs() > 1e-6 * sa.max(sb));
            prop_assert_eq!(sa > sb, ta > tb);
        }
    }
}
