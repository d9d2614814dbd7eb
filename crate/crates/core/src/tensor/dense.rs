use super::{Layer, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Affine map `y = W x + b` on `[batch, features]` inputs.
///
/// `weight` is `[out_features, in_features]`.
#[derive(Clone, Debug)]
pub struct Dense<T: Scalar = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Self::from_parts(
            name,
            Tensor::zeros(&[out_features, in_features])?,
            Tensor::zeros(&[out_features])?,
        )
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let &[out, _] = weight.shape() else {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "dense weight must be [out_features, in_features]".into(),
            });
        };
        if bias.shape() != [out] {
            return Err(Error::dim("dense bias", bias.shape(), &[out]));
        }
        Ok(Dense {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    fn batch(&self, input: &Tensor<T>) -> Result<usize> {
        match *input.shape() {
            [b, f] if f == self.in_features() => Ok(b),
            _ => Err(Error::dim("dense input/weight", input.shape(), self.weight.value.shape())),
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.batch(input)?;
        let (fi, fo) = (self.in_features(), self.out_features());
        let mut y = Tensor::zeros(&[b, fo])?;
        for row in y.data_mut().chunks_mut(fo) {
            row.copy_from_slice(self.bias.value.data());
        }
        // y[b, o] += sum_i x[b, i] * W[o, i]
        T::gemm(
            b,
            fi,
            fo,
            input.data(),
            (fi as isize, 1),
            self.weight.value.data(),
            (1, fi as isize),
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward called without a cached forward pass".into()))?;
        let b = x.shape()[0];
        let (fi, fo) = (self.in_features(), self.out_features());
        if grad.shape() != [b, fo] {
            return Err(Error::dim("dense backward", grad.shape(), &[b, fo]));
        }
        // dW[o, i] += sum_b g[b, o] * x[b, i]
        T::gemm(
            fo,
            b,
            fi,
            grad.data(),
            (1, fo as isize),
            x.data(),
            (fi as isize, 1),
            T::one(),
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for row in grad.data().chunks(fo) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        // dx[b, i] = sum_o g[b, o] * W[o, i]
        let mut dx = Tensor::zeros(&[b, fi])?;
        T::gemm(
            b,
            fo,
            fi,
            grad.data(),
            (fo as isize, 1),
            self.weight.value.data(),
            (fi as isize, 1),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> Dense<f64> {
        // W = [[1, 2, 3], [-1, 0, 1]], b = [0.5, -0.5]
        Dense::from_parts(
            "d",
            Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(),
            Tensor::new(&[2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_hand_computation() {
        let d = layer();
        let x = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 0.0, 1.0, -2.0]).unwrap();
        let y = d.infer(&x).unwrap();
        assert_eq!(y.data(), &[6.5, -0.5, -3.5, -2.5]);
    }

    #[test]
    fn backward_matches_hand_computation() {
        let mut d = layer();
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        d.forward(&x).unwrap();
        let dx = d.backward(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[-1.0, 2.0, 5.0]);
        assert_eq!(d.weight.grad.data(), &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(d.bias.grad.data(), &[1.0, 2.0]);
    }

    #[test]
    fn selector_rows() {
        let d = Dense::<f32>::from_parts(
            "d",
            Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
            Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        let y = d.infer(&Tensor::new(&[1, 4], vec![1.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0]);
    }

    #[test]
    fn identity_weight_passes_input() {
        let d = Dense::<f32>::from_parts(
            "d",
            Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 3.0, 7.0, 0.0, -2.5]).unwrap();
        assert_eq!(d.infer(&x).unwrap(), x);
    }

    #[test]
    fn parameter_count() {
        assert_eq!(Dense::<f32>::new("d", 2048, 512).unwrap().param_count(), 1_049_088);
    }

    #[test]
    fn wrong_width_rejected() {
        let d = layer();
        let x = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(d.infer(&x), Err(Error::Dimension { .. })));
    }
}
