use super::{Layer, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalization over `(batch, height, width)`.
///
/// Training mode standardizes with batch statistics and folds them into
/// running estimates; the first update adopts the batch statistics
/// directly. Inference mode uses the running estimates and fails until at
/// least one training update has happened.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    name: String,
    eps: f64,
    momentum: f64,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    initialized: bool,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

struct Stats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Self::with_config(name, channels, BN_EPSILON, BN_MOMENTUM)
    }

    pub fn with_config(name: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "batch norm needs eps > 0 and momentum in [0, 1), got {eps} and {momentum}"
            )));
        }
        Ok(BatchNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())?),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])?),
            name: name.to_string(),
            eps,
            momentum,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn running_stats(&self) -> Option<(&[f64], &[f64])> {
        self.initialized
            .then_some((&self.running_mean[..], &self.running_var[..]))
    }

    fn check(&self, input: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = input
            .dims4()
            .map_err(|_| Error::dim("batch_norm", input.shape(), &[0, self.channels(), 0, 0]))?;
        if dims[1] != self.channels() {
            return Err(Error::dim("batch_norm", input.shape(), &[dims[0], self.channels(), dims[2], dims[3]]));
        }
        Ok(dims)
    }

    fn batch_stats(input: &Tensor<T>, [b, c, h, w]: [usize; 4]) -> Stats {
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = input.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let planes = || (0..b).map(move |bi| &x[(bi * c + ch) * plane..][..plane]);
            let m = planes().map(|p| lane_sum(p, |v| v)).sum::<f64>() / n;
            let v = planes().map(|p| lane_sum(p, |v| (v - m) * (v - m))).sum::<f64>() / n;
            mean[ch] = m;
            var[ch] = v;
        }
        Stats { mean, var }
    }

    /// `y = gamma * (x - mean) * inv_std + beta`, returning `(y, x_hat)`.
    fn normalize(
        &self,
        input: &Tensor<T>,
        [b, c, h, w]: [usize; 4],
        mean: &[f64],
        inv_std: &[f64],
        keep_x_hat: bool,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        let plane = h * w;
        let mut y = input.zeros_like();
        let mut x_hat = keep_x_hat.then(|| input.zeros_like());
        let (g, bt) = (self.gamma.value.data(), self.beta.value.data());
        for (k, (ys, xs)) in y.data_mut().chunks_mut(plane).zip(input.data().chunks(plane)).enumerate() {
            let ch = k % c;
            let (m, s) = (mean[ch], inv_std[ch]);
            let (gc, bc) = (g[ch].to_f64(), bt[ch].to_f64());
            match x_hat.as_mut() {
                Some(xhat) => {
                    let hs = &mut xhat.data_mut()[k * plane..][..plane];
                    for ((y, h), &x) in ys.iter_mut().zip(hs).zip(xs) {
                        let xh = (x.to_f64() - m) * s;
                        *y = T::from_f64(gc * xh + bc);
                        *h = T::from_f64(xh);
                    }
                }
                None => {
                    for (y, &x) in ys.iter_mut().zip(xs) {
                        *y = T::from_f64(gc * ((x.to_f64() - m) * s) + bc);
                    }
                }
            }
        }
        debug_assert_eq!(y.len(), b * c * plane);
        (y, x_hat)
    }
}

const LANES: usize = 8;

/// `sum f(x_i)` in f64 with independent partial sums, so the loop is not
/// bound by a single addition chain. The order is fixed, hence deterministic.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..LANES {
            acc[k] += f(c[k].to_f64());
        }
    }
    acc.iter().sum::<f64>() + tail.iter().map(|&v| f(v.to_f64())).sum::<f64>()
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k].to_f64() * y[k].to_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.check(input)?;
        if dims[0] * dims[2] * dims[3] < 2 {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: "training-mode batch norm needs at least two values per channel".into(),
            });
        }
        let stats = Self::batch_stats(input, dims);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, x_hat) = self.normalize(input, dims, &stats.mean, &inv_std, true);

        // Running estimates are held at the precision of T so that saving
        // them as buffers is lossless.
        let round = |v: f64| T::from_f64(v).to_f64();
        if self.initialized {
            let mo = self.momentum;
            for ch in 0..dims[1] {
                self.running_mean[ch] = round(mo * self.running_mean[ch] + (1.0 - mo) * stats.mean[ch]);
                self.running_var[ch] = round(mo * self.running_var[ch] + (1.0 - mo) * stats.var[ch]);
            }
        } else {
            self.running_mean = stats.mean.iter().map(|&v| round(v)).collect();
            self.running_var = stats.var.iter().map(|&v| round(v)).collect();
            self.initialized = true;
        }
        self.cache = Some(Cache {
            x_hat: x_hat.expect("x_hat requested"),
            inv_std,
        });
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.check(input)?;
        if !self.initialized {
            return Err(Error::State(format!(
                "batch norm {} has no running statistics yet; run a training update or load a checkpoint",
                self.name
            )));
        }
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok(self.normalize(input, dims, &self.running_mean, &inv_std, false).0)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward called without a cached forward pass".into()))?;
        if grad.shape() != cache.x_hat.shape() {
            return Err(Error::dim("batch_norm backward", grad.shape(), cache.x_hat.shape()));
        }
        let [b, c, h, w] = grad.dims4()?;
        let plane = h * w;
        let n = (b * plane) as f64;
        let (dy, xh) = (grad.data(), cache.x_hat.data());
        let mut dx = grad.zeros_like();
        let at = |bi: usize, ch: usize| (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for bi in 0..b {
                let r = at(bi, ch);
                sum_dy += lane_sum(&dy[r.clone()], |v| v);
                sum_dy_xh += lane_dot(&dy[r.clone()], &xh[r]);
            }
            let g = self.gamma.value.data()[ch].to_f64();
            let gg = &mut self.gamma.grad.data_mut()[ch];
            *gg = T::from_f64(gg.to_f64() + sum_dy_xh);
            let bg = &mut self.beta.grad.data_mut()[ch];
            *bg = T::from_f64(bg.to_f64() + sum_dy);
            let scale = g * cache.inv_std[ch] / n;
            for bi in 0..b {
                let r = at(bi, ch);
                for ((d, &u), &h) in dx.data_mut()[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xh[r]) {
                    *d = T::from_f64(scale * (n * u.to_f64() - sum_dy - h.to_f64() * sum_dy_xh));
                }
            }
        }
        Ok(dx)
    }

    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        if !self.initialized {
            return Vec::new();
        }
        let to_tensor = |v: &[f64]| {
            Tensor::new(&[v.len()], v.iter().map(|&x| T::from_f64(x)).collect()).expect("channel count >= 1")
        };
        vec![
            (format!("{}.running_mean", self.name), to_tensor(&self.running_mean)),
            (format!("{}.running_var", self.name), to_tensor(&self.running_var)),
        ]
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor<T>) -> Result<bool> {
        let target = if name == format!("{}.running_mean", self.name) {
            &mut self.running_mean
        } else if name == format!("{}.running_var", self.name) {
            &mut self.running_var
        } else {
            return Ok(false);
        };
        if value.shape() != [target.len()] {
            return Err(Error::dim("batch norm buffer", value.shape(), &[target.len()]));
        }
        *target = value.data().iter().map(|&v| v.to_f64()).collect();
        self.initialized = true;
        Ok(true)
    }
}
