use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    residual_add, BatchNorm, Conv2d, Dense, Layer, LeakyRelu, Parameter, Reshape, Scalar, Tanh, Tensor,
    BN_EPSILON, BN_MOMENTUM,
};
use crate::error::{Error, Result};

/// Description of a single layer for [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        in_channels: usize,
        kernel: (usize, usize),
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    LeakyRelu,
    Tanh,
    Dense {
        f_in: usize,
        f_out: usize,
    },
    /// Elementwise sum of the input with a second, trainable operand of the
    /// same shape.
    Add,
    /// Per-sample target shape; the leading batch axis is kept.
    Reshape(Vec<usize>),
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Builds the layer with parameters drawn from `seed`. Draws are made in
    /// `f32` and then converted, so the `f32` and `f64` builds are exact twins.
    pub fn build<T: Scalar>(&self, input_shape: &[usize], seed: u64) -> Result<Box<dyn Layer<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], lo: f32, hi: f32| {
            Tensor::<T>::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi) as f64))
        };
        Ok(match *self {
            LayerSpec::Conv2d {
                filters,
                in_channels,
                kernel: (kh, kw),
            } => {
                let s = 1.0 / ((in_channels * kh * kw) as f32).sqrt();
                let w = draw(&[filters, in_channels, kh, kw], -s, s)?;
                let b = draw(&[filters], -0.5, 0.5)?;
                Box::new(Conv2d::from_parts("conv", w, b)?)
            }
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => {
                let mut bn = BatchNorm::with_config("bn", channels, epsilon, momentum)?;
                bn.gamma.value = draw(&[channels], 0.5, 1.5)?;
                bn.beta.value = draw(&[channels], -0.5, 0.5)?;
                Box::new(bn)
            }
            LayerSpec::LeakyRelu => Box::new(LeakyRelu::default()),
            LayerSpec::Tanh => Box::new(Tanh::new()),
            LayerSpec::Dense { f_in, f_out } => {
                let s = 1.0 / (f_in as f32).sqrt();
                let w = draw(&[f_out, f_in], -s, s)?;
                let b = draw(&[f_out], -0.5, 0.5)?;
                Box::new(Dense::from_parts("dense", w, b)?)
            }
            LayerSpec::Add => Box::new(AddLayer {
                other: Parameter::new("add.other", draw(input_shape, -1.0, 1.0)?),
            }),
            LayerSpec::Reshape(ref tail) => Box::new(Reshape::new(tail)),
        })
    }
}

struct AddLayer<T: Scalar> {
    other: Parameter<T>,
}

impl<T: Scalar> Layer<T> for AddLayer<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(input)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        residual_add(input, &self.other.value)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        super::add_assign(&mut self.other.grad, grad)?;
        Ok(grad.clone())
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.other]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.other]
    }
}

/// Relative error used by the checker.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradients of a layer against central differences of
/// the scalar `sum(r * layer(x))`, for a fixed random `r`.
///
/// Both sides are evaluated in `f64` on a twin built from the same `f32`
/// draws, so the result measures the gradient rules themselves rather than
/// single-precision rounding in long sums. The `f32` kernels are held to the
/// `f64` path by the layer tests. Returns the maximum relative error over
/// every parameter entry and every input entry.
pub fn gradient_check(spec: &LayerSpec, input: &Tensor<f32>, step: f64, seed: u64) -> Result<f64> {
    if !(1e-4..=1e-2).contains(&step) {
        return Err(Error::Parameter(format!("gradient-check step must lie in [1e-4, 1e-2], got {step}")));
    }
    let mut layer = spec.build::<f64>(input.shape(), seed)?;
    let x: Tensor<f64> = input.cast();

    let y = layer.forward(&x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_f9ad);
    let r = Tensor::<f64>::from_fn(y.shape(), |_| rng.random_range(-1.0f32..1.0) as f64)?;
    layer.zero_grad();
    let dx = layer.backward(&r)?;

    let objective = |l: &mut dyn Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = l.forward(x)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let analytic: Vec<Vec<f64>> = layer.parameters().iter().map(|p| p.grad.data().to_vec()).collect();
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = layer.parameters()[pi].value.data()[i];
            layer.parameters_mut()[pi].value.data_mut()[i] = orig + step;
            let plus = objective(layer.as_mut(), &x)?;
            layer.parameters_mut()[pi].value.data_mut()[i] = orig - step;
            let minus = objective(layer.as_mut(), &x)?;
            layer.parameters_mut()[pi].value.data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * step)));
        }
    }
    let mut xp = x.clone();
    for (i, &a) in dx.data().iter().enumerate() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let plus = objective(layer.as_mut(), &xp)?;
        xp.data_mut()[i] = orig - step;
        let minus = objective(layer.as_mut(), &xp)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * step)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64, away_from_zero: bool) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            let v: f32 = rng.random_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.1 + v.abs())
            } else {
                v
            }
        })
        .unwrap()
    }

    #[test]
    fn dense_within_tolerance() {
        let spec = LayerSpec::Dense { f_in: 6, f_out: 4 };
        let err = gradient_check(&spec, &random(&[3, 6], 1, false), 1e-3, 7).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn small_conv_within_tolerance() {
        let spec = LayerSpec::Conv2d {
            filters: 3,
            in_channels: 2,
            kernel: (3, 3),
        };
        let err = gradient_check(&spec, &random(&[1, 2, 5, 5], 2, false), 1e-3, 8).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn wide_conv_within_tolerance() {
        let spec = LayerSpec::Conv2d {
            filters: 16,
            in_channels: 16,
            kernel: (7, 7),
        };
        let err = gradient_check(&spec, &random(&[1, 16, 8, 8], 3, false), 1e-3, 9).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn leaky_relu_within_tolerance() {
        let err = gradient_check(&LayerSpec::LeakyRelu, &random(&[2, 3, 4, 4], 4, true), 1e-3, 10).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tanh_within_tolerance() {
        let err = gradient_check(&LayerSpec::Tanh, &random(&[2, 3, 4, 4], 5, false), 1e-3, 11).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batch_norm_within_tolerance() {
        let err = gradient_check(&LayerSpec::batch_norm(3), &random(&[2, 3, 4, 4], 6, false), 1e-3, 12).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn add_and_reshape_are_exact() {
        let x = random(&[2, 3, 2, 2], 7, false);
        assert!(gradient_check(&LayerSpec::Add, &x, 1e-3, 13).unwrap() < 1e-6);
        let err = gradient_check(&LayerSpec::Reshape(vec![12]), &x, 1e-3, 14).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = random(&[1, 4], 8, false);
        assert!(gradient_check(&LayerSpec::Tanh, &x, 0.5, 0).is_err());
    }
}
