use super::{Layer, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of [`LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.3;

/// `f(x) = x` for `x >= 0`, `slope * x` otherwise. The derivative at zero is
/// taken from the linear branch.
#[derive(Clone, Debug)]
pub struct LeakyRelu<T: Scalar = f32> {
    slope: T,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Default for LeakyRelu<T> {
    fn default() -> Self {
        Self::new(LEAKY_SLOPE)
    }
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: T::from_f64(slope),
            cache: None,
        }
    }

    fn apply(&self, x: T) -> T {
        if x >= T::zero() {
            x
        } else {
            self.slope * x
        }
    }
}

fn take_cache<T: Scalar>(cache: &mut Option<Tensor<T>>, grad: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let c = cache
        .take()
        .ok_or_else(|| Error::State(format!("{op} backward called without a cached forward pass")))?;
    if c.shape() != grad.shape() {
        return Err(Error::dim(op, grad.shape(), c.shape()));
    }
    Ok(c)
}

impl<T: Scalar> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.cache = Some(input.clone());
        self.infer(input)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(input.map(|x| self.apply(x)))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take_cache(&mut self.cache, grad, "leaky_relu")?;
        let mut dx = grad.clone();
        for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
            if xi < T::zero() {
                *d = *d * self.slope;
            }
        }
        Ok(dx)
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}

/// Elementwise hyperbolic tangent.
#[derive(Clone, Debug, Default)]
pub struct Tanh<T: Scalar = f32> {
    // Output, since tanh' = 1 - tanh^2.
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Tanh { cache: None }
    }
}

impl<T: Scalar> Layer<T> for Tanh<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(input.map(|x| x.tanh()))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = take_cache(&mut self.cache, grad, "tanh")?;
        let mut dx = grad.clone();
        for (d, &yi) in dx.data_mut().iter_mut().zip(y.data()) {
            *d = *d * (T::one() - yi * yi);
        }
        Ok(dx)
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}
