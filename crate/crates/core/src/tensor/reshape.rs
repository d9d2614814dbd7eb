use super::{Layer, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Reshapes every batch entry to `tail`, keeping the leading batch axis.
#[derive(Clone, Debug)]
pub struct Reshape {
    tail: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(tail: &[usize]) -> Self {
        Reshape {
            tail: tail.to_vec(),
            input_shape: None,
        }
    }

    fn target(&self, input: &[usize]) -> Vec<usize> {
        let mut s = vec![input[0]];
        s.extend_from_slice(&self.tail);
        s
    }
}

impl<T: Scalar> Layer<T> for Reshape {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.input_shape = Some(input.shape().to_vec());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        input.clone().reshape(&self.target(input.shape()))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::State("reshape backward called without a cached forward pass".into()))?;
        grad.clone().reshape(&shape)
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}
