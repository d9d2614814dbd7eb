use crate::error::Result;
use crate::tensor::{
    add_assign, residual_add, BatchNorm, Conv2d, Layer, LeakyRelu, Parameter, Scalar, Tanh, Tensor,
};

/// Parameter and buffer plumbing for a layer made of the listed fields.
macro_rules! delegate_collections {
    ($($field:ident),+) => {
        fn parameters(&self) -> Vec<&Parameter<T>> {
            let mut v = Vec::new();
            $(v.extend(self.$field.parameters());)+
            v
        }

        fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
            let mut v = Vec::new();
            $(v.extend(self.$field.parameters_mut());)+
            v
        }

        fn buffers(&self) -> Vec<(String, Tensor<T>)> {
            let mut v = Vec::new();
            $(v.extend(self.$field.buffers());)+
            v
        }

        fn load_buffer(&mut self, name: &str, value: &Tensor<T>) -> Result<bool> {
            $(if self.$field.load_buffer(name, value)? {
                return Ok(true);
            })+
            Ok(false)
        }
    };
}
pub(crate) use delegate_collections;

/// Lets [`delegate_collections`] take a `Vec` of layers as one field.
pub(crate) trait LayerList<T: Scalar> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
    fn buffers(&self) -> Vec<(String, Tensor<T>)>;
    fn load_buffer(&mut self, name: &str, value: &Tensor<T>) -> Result<bool>;
}

impl<T: Scalar, L: Layer<T>> LayerList<T> for Vec<L> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        self.iter().flat_map(|l| l.buffers()).collect()
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor<T>) -> Result<bool> {
        for l in self.iter_mut() {
            if l.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Convolution, batch normalization and Leaky ReLU.
#[derive(Clone, Debug)]
pub struct CompositeUnit<T: Scalar = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    act: LeakyRelu<T>,
}

impl<T: Scalar> CompositeUnit<T> {
    pub fn new(name: &str, filters: usize, in_ch: usize, kernel: usize, slope: f64) -> Result<Self> {
        Ok(CompositeUnit {
            conv: Conv2d::new(&format!("{name}.conv"), filters, in_ch, kernel, kernel)?,
            bn: BatchNorm::new(&format!("{name}.bn"), filters)?,
            act: LeakyRelu::new(slope),
        })
    }
}

impl<T: Scalar> Layer<T> for CompositeUnit<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y)?;
        self.act.forward(&y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.act.infer(&self.bn.infer(&self.conv.infer(x)?)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    delegate_collections!(conv, bn);
}

pub const BLOCK_FILTERS: usize = 16;

/// `u2(u1(x)) + u3(u1(x))` with 7x7, 5x5 and 3x3 units, optionally wrapped
/// in an identity skip.
#[derive(Clone, Debug)]
pub struct AnciBlock<T: Scalar = f32> {
    pub u1: CompositeUnit<T>,
    pub u2: CompositeUnit<T>,
    pub u3: CompositeUnit<T>,
    skip: bool,
}

impl<T: Scalar> AnciBlock<T> {
    pub fn new(name: &str, skip: bool, slope: f64) -> Result<Self> {
        let f = BLOCK_FILTERS;
        Ok(AnciBlock {
            u1: CompositeUnit::new(&format!("{name}.u1"), f, f, 7, slope)?,
            u2: CompositeUnit::new(&format!("{name}.u2"), f, f, 5, slope)?,
            u3: CompositeUnit::new(&format!("{name}.u3"), f, f, 3, slope)?,
            skip,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }
}

impl<T: Scalar> Layer<T> for AnciBlock<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.u1.forward(x)?;
        let mut y = self.u2.forward(&a)?;
        add_assign(&mut y, &self.u3.forward(&a)?)?;
        if self.skip {
            add_assign(&mut y, x)?;
        }
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.u1.infer(x)?;
        let y = residual_add(&self.u2.infer(&a)?, &self.u3.infer(&a)?)?;
        if self.skip {
            residual_add(&y, x)
        } else {
            Ok(y)
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ga = self.u2.backward(g)?;
        add_assign(&mut ga, &self.u3.backward(g)?)?;
        let mut gx = self.u1.backward(&ga)?;
        if self.skip {
            add_assign(&mut gx, g)?;
        }
        Ok(gx)
    }

    delegate_collections!(u1, u2, u3);
}

/// Output convolution with tanh and no normalization.
#[derive(Clone, Debug)]
pub struct ConvHead<T: Scalar = f32> {
    pub conv: Conv2d<T>,
    act: Tanh<T>,
}

impl<T: Scalar> ConvHead<T> {
    pub fn new(name: &str, filters: usize, in_ch: usize, kernel: usize) -> Result<Self> {
        Ok(ConvHead {
            conv: Conv2d::new(&format!("{name}.conv"), filters, in_ch, kernel, kernel)?,
            act: Tanh::new(),
        })
    }
}

impl<T: Scalar> Layer<T> for ConvHead<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        self.act.forward(&y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.act.infer(&self.conv.infer(x)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act.backward(g)?;
        self.conv.backward(&g)
    }

    delegate_collections!(conv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn input(shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| ((i * 7919) % 200) as f32 / 100.0 - 1.0).unwrap()
    }

    #[test]
    fn block_preserves_shape() {
        let mut b = AnciBlock::<f32>::new("b", false, 0.3).unwrap();
        let y = b.forward(&input(&[1, 16, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 16, 32, 32]);
    }

    #[test]
    fn block_conv_parameter_count() {
        let b = AnciBlock::<f32>::new("b", false, 0.3).unwrap();
        let counts: Vec<usize> = [&b.u1, &b.u2, &b.u3].iter().map(|u| u.conv.param_count()).collect();
        assert_eq!(counts, vec![12_560, 6_416, 2_320]);
        assert_eq!(counts.iter().sum::<usize>(), 21_296);
    }

    fn zero_gammas(b: &mut AnciBlock<f32>) {
        for u in [&mut b.u1, &mut b.u2, &mut b.u3] {
            u.bn.gamma.value.fill_zero();
        }
    }

    #[test]
    fn zeroed_block_outputs_zero() {
        let mut b = AnciBlock::<f32>::new("b", false, 0.3).unwrap();
        zero_gammas(&mut b);
        let y = b.forward(&input(&[2, 16, 8, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_skip_block_is_identity() {
        let mut b = AnciBlock::<f32>::new("b", true, 0.3).unwrap();
        zero_gammas(&mut b);
        let x = input(&[2, 16, 8, 8]);
        assert_eq!(b.forward(&x).unwrap(), x);
        assert_eq!(b.infer(&x).unwrap(), x);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let mut b = AnciBlock::<f32>::new("b", true, 0.3).unwrap();
        assert!(matches!(b.forward(&input(&[1, 8, 4, 4])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn names_are_unique() {
        let b = AnciBlock::<f32>::new("blk", true, 0.3).unwrap();
        let mut names: Vec<&str> = b.parameters().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 12);
    }
}
