use std::f64::consts::TAU;

use nalgebra::DMatrix;

use super::{Hypothesis, ProbeError};
use crate::data::LabelValues;

/// Regression targets under `hyp`: two columns `(cos, sin)` for cyclic,
/// one column otherwise.
pub fn transform_labels(labels: &LabelValues, hyp: Hypothesis) -> Result<DMatrix<f64>, ProbeError> {
    let v = labels.as_f64();
    let m = v.len();
    match hyp {
        Hypothesis::Identity => Ok(DMatrix::from_column_slice(m, 1, &v)),
        Hypothesis::Cyclic(n) => {
            let mut out = DMatrix::zeros(m, 2);
            for (i, &k) in v.iter().enumerate() {
                if k.fract() != 0.0 || k < 0.0 || k >= n as f64 {
                    return Err(ProbeError::Labels(format!(
                        "cyclic:{n} needs integer labels in [0, {n}), row {i} is {k}"
                    )));
                }
                let a = k / n as f64 * TAU;
                out[(i, 0)] = a.cos();
                out[(i, 1)] = a.sin();
            }
            Ok(out)
        }
        Hypothesis::Log1p => {
            if let Some(i) = v.iter().position(|&x| !(x > -1.0)) {
                return Err(ProbeError::Labels(format!("log1p needs labels > -1, row {i} is {}", v[i])));
            }
            Ok(DMatrix::from_iterator(m, 1, v.iter().map(|x| x.ln_1p())))
        }
        Hypothesis::Log10 => {
            if let Some(i) = v.iter().position(|&x| !(x > 0.0)) {
                return Err(ProbeError::Labels(format!("log10 needs positive labels, row {i} is {}", v[i])));
            }
            Ok(DMatrix::from_iterator(m, 1, v.iter().map(|x| x.log10())))
        }
    }
}

/// Equal-count quantile buckets. Rows are ranked by value (stable in row
/// order) and rank `r` goes to bucket `floor(r · n_buckets / m)`; tied values
/// all take the bucket of the first of them.
pub fn bucket_labels(values: &[f64], n_buckets: usize) -> Result<Vec<usize>, ProbeError> {
    if n_buckets < 2 {
        return Err(ProbeError::Labels(format!("need at least 2 buckets, got {n_buckets}")));
    }
    if values.len() < n_buckets {
        return Err(ProbeError::Labels(format!(
            "{} labels cannot fill {n_buckets} buckets",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ProbeError::Labels(format!("non-finite label at row {i}")));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(ProbeError::ConstantLabels);
    }
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; m];
    let mut bucket = 0;
    for (rank, &row) in order.iter().enumerate() {
        if rank == 0 || values[row] != values[order[rank - 1]] {
            bucket = rank * n_buckets / m;
        }
        out[row] = bucket;
    }
    Ok(out)
}

/// Compact class indices `0..k` for the distinct label values, in ascending
/// value order, plus the values themselves.
pub fn class_indices(labels: &LabelValues) -> Result<(Vec<usize>, Vec<f64>), ProbeError> {
    let v = labels.as_f64();
    if let Some(i) = v.iter().position(|x| x.fract() != 0.0) {
        return Err(ProbeError::Labels(format!(
            "class labels must be integers, row {i} is {}",
            v[i]
        )));
    }
    let mut distinct = v.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let idx = v
        .iter()
        .map(|x| distinct.partition_point(|d| d < x))
        .collect();
    Ok((idx, distinct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_examples() {
        let t = transform_labels(&LabelValues::Int(vec![0, 13]), Hypothesis::Cyclic(24)).unwrap();
        assert_eq!((t[(0, 0)], t[(0, 1)]), (1.0, 0.0));
        assert!((t[(1, 0)] - -0.96593).abs() < 1e-5);
        assert!((t[(1, 1)] - -0.25882).abs() < 1e-5);
        assert!(transform_labels(&LabelValues::Int(vec![24]), Hypothesis::Cyclic(24)).is_err());
        assert!(transform_labels(&LabelValues::Real(vec![1.5]), Hypothesis::Cyclic(24)).is_err());
    }

    #[test]
    fn log_examples() {
        let t = transform_labels(&LabelValues::Real(vec![100.0]), Hypothesis::Log10).unwrap();
        assert_eq!(t[(0, 0)], 2.0);
        let t = transform_labels(&LabelValues::Int(vec![0, 3]), Hypothesis::Log1p).unwrap();
        assert_eq!(t[(0, 0)], 0.0);
        assert!((t[(1, 0)] - 4f64.ln()).abs() < 1e-15);
        assert!(transform_labels(&LabelValues::Real(vec![0.0]), Hypothesis::Log10).is_err());
        let t = transform_labels(&LabelValues::Int(vec![5, -2]), Hypothesis::Identity).unwrap();
        assert_eq!(t.as_slice(), &[5.0, -2.0]);
    }

    #[test]
    fn deciles_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = bucket_labels(&v, 10).unwrap();
        assert_eq!(b[0], 0);
        assert_eq!(b[99], 9);
        for k in 0..10 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 10);
        }
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_buckets_split_at_median() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0, 6.0];
        assert_eq!(bucket_labels(&v, 2).unwrap(), vec![1, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn ties_share_a_bucket() {
        let v = [1.0, 2.0, 2.0, 2.0, 3.0, 4.0];
        let b = bucket_labels(&v, 3).unwrap();
        assert_eq!(b[1], b[2]);
        assert_eq!(b[2], b[3]);
        assert!(bucket_labels(&[7.0; 5], 2).is_err());
    }

    #[test]
    fn compact_classes() {
        let (idx, vals) = class_indices(&LabelValues::Int(vec![7, 3, 7, 11])).unwrap();
        assert_eq!(idx, vec![1, 0, 1, 2]);
        assert_eq!(vals, vec![3.0, 7.0, 11.0]);
    }
}
