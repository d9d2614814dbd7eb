use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(1/B) sum_i ||pred_i - label_i||^2` and its gradient `(2/B)(pred - label)`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != label.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), label.shape()));
    }
    let b = pred.shape()[0] as f64;
    let mut sum = 0.0f64;
    let scale = T::from_f64(2.0 / b);
    let mut grad = pred.zeros_like();
    for ((g, &p), &l) in grad.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        let d = p - l;
        sum += d.to_f64() * d.to_f64();
        *g = scale * d;
    }
    Ok((sum / b, grad))
}

/// Per-sample `||pred_i - label_i||^2 / ||label_i||^2`.
pub fn error_ratios(pred: &Tensor<f32>, label: &Tensor<f32>) -> Result<Vec<f64>> {
    if pred.shape() != label.shape() {
        return Err(Error::dim("error_ratios", pred.shape(), label.shape()));
    }
    (0..pred.shape()[0])
        .map(|i| {
            let (p, l) = (pred.sample(i), label.sample(i));
            let energy: f64 = l.iter().map(|&v| (v as f64) * (v as f64)).sum();
            if energy == 0.0 {
                return Err(Error::DegenerateSample(format!("label {i} has zero energy")));
            }
            let err: f64 = p.iter().zip(l).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            Ok(err / energy)
        })
        .collect()
}

pub fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_example() {
        let label = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let mut pred = label.clone();
        pred.data_mut()[3] = 2.0;
        let (l, g) = mse_loss(&pred, &label).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.data()[3], 4.0);
        assert_eq!(g.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn identical_is_zero_and_batch_averaged() {
        let a = Tensor::<f32>::from_fn(&[3, 2, 2, 2], |i| i as f32).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 1.0);
        // Each sample contributes 8 unit squares.
        assert_eq!(mse_loss(&a, &b).unwrap().0, 8.0);
        assert!(mse_loss(&a, &Tensor::zeros(&[3, 8]).unwrap()).is_err());
    }

    #[test]
    fn ratios_and_decibels() {
        let label = Tensor::<f32>::full(&[2, 1, 1, 4], 1.0).unwrap();
        let zero = label.zeros_like();
        assert_eq!(error_ratios(&zero, &label).unwrap(), vec![1.0, 1.0]);
        assert_eq!(error_ratios(&label, &label).unwrap(), vec![0.0, 0.0]);
        assert!((to_db(0.1) + 10.0).abs() < 1e-12);
        assert!(matches!(error_ratios(&label, &zero), Err(Error::DegenerateSample(_))));
    }
}
