use rayon::prelude::*;

use super::kernels::{self, ConvGeom, Isa};
use super::{Layer, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride-1 convolution with same-size zero padding.
///
/// `output[b,o,y,x] = bias[o] + sum_{c,dy,dx} input[b,c,y+dy-kh/2,x+dx-kw/2] * weight[o,c,dy,dx]`
/// with out-of-range input read as zero. Kernel extents must be odd.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    propagate_input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized layer with `filters` kernels of `in_ch x kh x kw`.
    pub fn new(name: &str, filters: usize, in_ch: usize, kh: usize, kw: usize) -> Result<Self> {
        let weight = Tensor::zeros(&[filters, in_ch, kh, kw])?;
        let bias = Tensor::zeros(&[filters])?;
        Self::from_parts(name, weight, bias)
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [f, _, kh, kw] = weight.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "same padding needs odd kernel extents".into(),
            });
        }
        if bias.shape() != [f] {
            return Err(Error::dim("conv2d bias", bias.shape(), &[f]));
        }
        Ok(Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            propagate_input_grad: true,
            cache: None,
        })
    }

    /// When disabled, [`Layer::backward`] skips the input-gradient pass and
    /// returns zeros. Used for layers that read the network input.
    pub fn set_propagate_input_grad(&mut self, on: bool) {
        self.propagate_input_grad = on;
    }

    pub fn filters(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    /// `f * k * kh * kw + f`
    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    fn geom(&self, input: &Tensor<T>) -> Result<(usize, ConvGeom)> {
        let wshape = self.weight.value.shape();
        let [b, c, h, w] = input
            .dims4()
            .map_err(|_| Error::dim("conv2d input/weight", input.shape(), wshape))?;
        if c != wshape[1] {
            return Err(Error::dim("conv2d input/weight", input.shape(), wshape));
        }
        Ok((
            b,
            ConvGeom {
                in_ch: c,
                out_ch: wshape[0],
                h,
                w,
                kh: wshape[2],
                kw: wshape[3],
            },
        ))
    }

    fn pointwise(g: &ConvGeom) -> bool {
        g.kh == 1 && g.kw == 1
    }

    fn run(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, g) = self.geom(input)?;
        if Self::pointwise(&g) {
            return self.run_pointwise(input, b, &g);
        }
        let isa = T::conv_isa();
        let wt = self.weight.value.data();
        let kk = g.in_ch * g.kh * g.kw;
        let filters = kernels::pack_filters(&g, isa, |o, c, dy, dx| {
            wt[o * kk + (c * g.kh + dy) * g.kw + dx]
        });
        let bias = self.bias.value.data();
        let mut out = Tensor::zeros(&[b, g.out_ch, g.h, g.w])?;
        let n_in = g.in_ch * g.h * g.w;
        let n_out = g.out_ch * g.h * g.w;
        out.data_mut()
            .par_chunks_mut(n_out)
            .zip(input.data().par_chunks(n_in))
            .for_each(|(o, i)| kernels::forward_sample(&g, isa, &filters, Some(bias), i, o));
        Ok(out)
    }

    /// 1x1 kernels are a plain matrix product per sample.
    fn run_pointwise(&self, input: &Tensor<T>, b: usize, g: &ConvGeom) -> Result<Tensor<T>> {
        let (k, f, hw) = (g.in_ch, g.out_ch, g.h * g.w);
        let wt = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = Tensor::zeros(&[b, f, g.h, g.w])?;
        out.data_mut()
            .par_chunks_mut(f * hw)
            .zip(input.data().par_chunks(k * hw))
            .for_each(|(o, i)| {
                for (row, &bv) in o.chunks_mut(hw).zip(bias) {
                    row.fill(bv);
                }
                T::gemm(f, k, hw, wt, (k as isize, 1), i, (hw as isize, 1), T::one(), o);
            });
        Ok(out)
    }

    fn input_grad(&self, g: &ConvGeom, isa: Isa, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let b = grad.shape()[0];
        if Self::pointwise(g) {
            let (k, f, hw) = (g.in_ch, g.out_ch, g.h * g.w);
            let wt = self.weight.value.data();
            let mut dx = Tensor::zeros(&[b, k, g.h, g.w])?;
            dx.data_mut()
                .par_chunks_mut(k * hw)
                .zip(grad.data().par_chunks(f * hw))
                .for_each(|(d, gs)| T::gemm(k, f, hw, wt, (1, k as isize), gs, (hw as isize, 1), T::zero(), d));
            return Ok(dx);
        }
        let gt = g.transposed();
        let wt = self.weight.value.data();
        let kk = g.in_ch * g.kh * g.kw;
        // Correlating the upstream gradient with the spatially flipped,
        // channel-transposed filters is the adjoint of the forward map.
        let filters = kernels::pack_filters(&gt, isa, |c, o, dy, dx| {
            wt[o * kk + (c * g.kh + (g.kh - 1 - dy)) * g.kw + (g.kw - 1 - dx)]
        });
        let mut dx = Tensor::zeros(&[b, g.in_ch, g.h, g.w])?;
        let n_in = g.in_ch * g.h * g.w;
        let n_out = g.out_ch * g.h * g.w;
        dx.data_mut()
            .par_chunks_mut(n_in)
            .zip(grad.data().par_chunks(n_out))
            .for_each(|(d, gs)| kernels::forward_sample(&gt, isa, &filters, None, gs, d));
        Ok(dx)
    }

    fn accumulate_param_grads(&mut self, g: &ConvGeom, isa: Isa, input: &Tensor<T>, grad: &Tensor<T>) {
        let n_in = g.in_ch * g.h * g.w;
        let n_out = g.out_ch * g.h * g.w;
        let nw = self.weight.value.len();
        // Per-sample partials reduced in sample order keep the result
        // independent of the thread count.
        let partials: Vec<Vec<T>> = input
            .data()
            .par_chunks(n_in)
            .zip(grad.data().par_chunks(n_out))
            .map(|(i, gs)| {
                let mut dw = vec![T::zero(); nw];
                if Self::pointwise(g) {
                    let hw = (g.h * g.w) as isize;
                    T::gemm(g.out_ch, g.h * g.w, g.in_ch, gs, (hw, 1), i, (1, hw), T::zero(), &mut dw);
                } else {
                    kernels::weight_grad_sample(g, isa, i, gs, &mut dw);
                }
                dw
            })
            .collect();
        let wg = self.weight.grad.data_mut();
        for p in &partials {
            for (a, &v) in wg.iter_mut().zip(p) {
                *a = *a + v;
            }
        }
        let plane = g.h * g.w;
        let bg = self.bias.grad.data_mut();
        for gs in grad.data().chunks(n_out) {
            for (o, acc) in bg.iter_mut().enumerate() {
                *acc = *acc + gs[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(input)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv2d backward called without a cached forward pass".into()))?;
        let (b, g) = self.geom(&input)?;
        if grad.shape() != [b, g.out_ch, g.h, g.w] {
            return Err(Error::dim("conv2d backward", grad.shape(), &[b, g.out_ch, g.h, g.w]));
        }
        let isa = T::conv_isa();
        self.accumulate_param_grads(&g, isa, &input, grad);
        if self.propagate_input_grad {
            self.input_grad(&g, isa, grad)
        } else {
            Ok(input.zeros_like())
        }
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
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over every output position, independent of the kernels.
    fn conv_oracle(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
        let [b, c, h, w] = input.dims4().unwrap();
        let [f, _, kh, kw] = weight.dims4().unwrap();
        let mut out = Tensor::zeros(&[b, f, h, w]).unwrap();
        let (x, wt) = (input.data(), weight.data());
        for bi in 0..b {
            for o in 0..f {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias[o];
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = y as isize + dy as isize - (kh / 2) as isize;
                                    let ix = xx as isize + dx as isize - (kw / 2) as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * c + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out.data_mut()[((bi * f + o) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn identity_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let conv = Conv2d::from_parts(
            "id",
            Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        assert_eq!(conv.infer(&x).unwrap(), x);
    }

    #[test]
    fn zero_padding_attenuates_borders() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let conv = Conv2d::from_parts(
            "ones",
            Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let y = conv.infer(&x).unwrap();
        let expect = conv_oracle(&x.cast(), &conv.weight.value.cast(), &[0.0]);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(y.cast::<f64>(), expect);
    }

    #[test]
    fn matches_direct_summation_for_all_kernel_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, f, kh, kw, h, w) in &[
            (2, 64, 7, 7, 8, 8),
            (16, 16, 5, 5, 6, 9),
            (16, 16, 3, 3, 32, 32),
            (64, 16, 1, 1, 5, 5),
            (3, 5, 1, 3, 7, 4),
            (2, 3, 9, 9, 10, 11),
            (16, 2, 3, 3, 33, 17),
        ] {
            let x = random(&[2, k, h, w], &mut rng);
            let wt = random(&[f, k, kh, kw], &mut rng);
            let b = random(&[f], &mut rng);
            let conv = Conv2d::from_parts("c", wt.clone(), b.clone()).unwrap();
            let y = conv.infer(&x).unwrap();
            let expect = conv_oracle(&x.cast(), &wt.cast(), &b.cast::<f64>().into_data());
            for (a, e) in y.data().iter().zip(expect.data()) {
                assert!((*a as f64 - e).abs() <= 1e-5 * (1.0 + e.abs()), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn paper_first_layer_shape() {
        let conv = Conv2d::<f32>::new("c1", 64, 2, 7, 7).unwrap();
        let y = conv.infer(&Tensor::zeros(&[1, 2, 32, 32]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 64, 32, 32]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let conv = Conv2d::<f32>::new("c", 4, 3, 3, 3).unwrap();
        let err = conv.infer(&Tensor::zeros(&[1, 2, 5, 5]).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn backward_requires_forward() {
        let mut conv = Conv2d::<f32>::new("c", 1, 1, 3, 3).unwrap();
        let g = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::from_parts("c", random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)).unwrap();
        let x = random(&[1, 2, 5, 5], &mut rng);
        let y = conv.forward(&x).unwrap();
        let dx = conv.backward(&y.zeros_like()).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(conv.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(conv.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_filter_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::from_parts(
            "id",
            Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let x = random(&[2, 1, 4, 4], &mut rng);
        conv.forward(&x).unwrap();
        let up = random(&[2, 1, 4, 4], &mut rng);
        assert_eq!(conv.backward(&up).unwrap(), up);
    }

    #[test]
    fn bias_grad_sums_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::from_parts("c", random(&[2, 1, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let x = random(&[3, 1, 4, 4], &mut rng);
        conv.forward(&x).unwrap();
        let up = random(&[3, 2, 4, 4], &mut rng);
        conv.backward(&up).unwrap();
        for o in 0..2 {
            let expect: f64 = (0..3)
                .flat_map(|b| up.sample(b)[o * 16..(o + 1) * 16].to_vec())
                .map(|v| v as f64)
                .sum();
            assert!((conv.bias.grad.data()[o] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn portable_and_vector_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 16, 12, 12], &mut rng);
        let wt = random(&[16, 16, 7, 7], &mut rng);
        let conv = Conv2d::from_parts("c", wt.clone(), Tensor::zeros(&[16]).unwrap()).unwrap();
        let y32 = conv.infer(&x).unwrap();
        let conv64 = Conv2d::from_parts("c", wt.cast::<f64>(), Tensor::zeros(&[16]).unwrap()).unwrap();
        let y64 = conv64.infer(&x.cast::<f64>()).unwrap();
        for (a, b) in y32.data().iter().zip(y64.data()) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_and_double_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[2, 16, 9, 11], &mut rng);
        let g = random(&[2, 8, 9, 11], &mut rng);
        for k in [1, 3, 5, 7] {
            let wt = random(&[8, 16, k, k], &mut rng);
            let mut c32 = Conv2d::from_parts("c", wt.clone(), Tensor::zeros(&[8]).unwrap()).unwrap();
            let mut c64 = Conv2d::from_parts("c", wt.cast::<f64>(), Tensor::zeros(&[8]).unwrap()).unwrap();
            c32.forward(&x).unwrap();
            c64.forward(&x.cast()).unwrap();
            let d32 = c32.backward(&g).unwrap();
            let d64 = c64.backward(&g.cast()).unwrap();
            let pairs = [
                (d32.data(), d64.data()),
                (c32.weight.grad.data(), c64.weight.grad.data()),
                (c32.bias.grad.data(), c64.bias.grad.data()),
            ];
            for (a, b) in pairs {
                for (p, q) in a.iter().zip(b) {
                    assert!((*p as f64 - q).abs() < 1e-4 * (1.0 + q.abs()), "k={k}: {p} vs {q}");
                }
            }
        }
    }
}
