use super::{NumericsError, Tensor};

/// Central-difference gradient of `loss` at `params`.
///
/// Used as a test oracle; evaluates the loss `2 * params.len()` times.
pub fn finite_diff_grad<F>(loss: F, params: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = loss(&probe);
        probe[i] = orig - eps;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::from_vec(params.shape(), grad)
}

/// `|a - b| / max(1e-6, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &p, 1e-3).unwrap();
        assert!(relative_error(g.data()[0], 1.0) < 1e-9);
        assert!(relative_error(g.data()[1], 2.0) < 1e-9);
    }

    #[test]
    fn constant_is_zero() {
        let p = Tensor::from_vec(&[3], vec![1.0, -4.0, 9.0]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &p, 1e-3).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn product() {
        let p = Tensor::from_vec(&[2], vec![3.0, 5.0]).unwrap();
        let g = finite_diff_grad(|x| x[0] * x[1], &p, 1e-3).unwrap();
        assert!(relative_error(g.data()[0], 5.0) < 1e-9);
        assert!(relative_error(g.data()[1], 3.0) < 1e-9);
    }

    #[test]
    fn reports_non_finite_entry() {
        let p = Tensor::from_vec(&[3], vec![1.0, 1.0, 0.0]).unwrap();
        let err = finite_diff_grad(|x| (x[2] + 1e-3).ln(), &p, 1e-3).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { index: 2 }));
    }
}
