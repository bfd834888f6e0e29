//! Central finite differences, used as an independent oracle for tape
//! adjoints. Only forward values are consulted.

use crate::tensor::Tensor;

/// Step used by the gradient suites. Small enough that perturbations rarely
/// cross a ReLU or max-pool kink, large enough to keep f64 rounding near 1e-11.
pub const STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad<F>(f: F, inputs: &[Tensor<f64>], which: usize, h: f64) -> Tensor<f64>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let up = f(&work);
        work[which].data_mut()[i] = orig - h;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(inputs[which].shape().to_vec(), grad).expect("same shape as input")
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let g = numeric_grad(|t| t[0].data().iter().map(|v| v * v).sum(), &[x], 0, STEP);
        let want = Tensor::from_f64([2], &[2.0, 4.0]).unwrap();
        assert!(relative_error(&g, &want) < 1e-9);
    }
}
