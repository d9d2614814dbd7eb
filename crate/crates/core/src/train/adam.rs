use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in the order
/// the network lists them.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Parameter<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, i: usize) -> (&[f32], &[f32]) {
        (&self.m[i], &self.v[i])
    }

    /// One update from the accumulated gradients. Nothing changes if any
    /// gradient is non-finite; the error names the offending parameter.
    pub fn step(&mut self, params: &mut [&mut Parameter<f32>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters but was given {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (((w, m), v), &g) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                let g = g as f64;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }

    pub fn save(&self, prefix: &str, params: &[&Parameter<f32>], ck: &mut Checkpoint) {
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            let shape = p.value.shape();
            ck.insert(format!("{prefix}m.{}", p.name), Tensor::new(shape, m.clone()).expect("moment shape"));
            ck.insert(format!("{prefix}v.{}", p.name), Tensor::new(shape, v.clone()).expect("moment shape"));
        }
        ck.insert_u64(&format!("{prefix}t"), self.t);
    }

    pub fn load(&mut self, prefix: &str, params: &[&Parameter<f32>], ck: &Checkpoint) -> Result<()> {
        let fetch = |key: String, p: &Parameter<f32>| -> Result<Vec<f32>> {
            let t = ck.get(&key).ok_or_else(|| Error::State(format!("checkpoint has no entry {key:?}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("optimizer moment", t.shape(), p.value.shape()));
            }
            Ok(t.data().to_vec())
        };
        for (i, p) in params.iter().enumerate() {
            self.m[i] = fetch(format!("{prefix}m.{}", p.name), p)?;
            self.v[i] = fetch(format!("{prefix}v.{}", p.name), p)?;
        }
        self.t = ck
            .get_u64(&format!("{prefix}t"))
            .ok_or_else(|| Error::State("checkpoint has no optimizer step count".into()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32], grads: &[f32]) -> Parameter<f32> {
        let mut p = Parameter::new("p", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = param(&[0.5, 0.5, 0.5], &[3.0, -0.25, 1e-3]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p]).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| after bias correction.
        for (&w, g) in p.value.data().iter().zip([3.0f64, -0.25, 1e-3]) {
            let expect = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((w as f64 - expect).abs() < 1e-7, "{w} vs {expect}");
        }
    }

    #[test]
    fn recurrences_over_two_steps() {
        let mut p = param(&[0.0], &[1.0]);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &[&p]);
        adam.step(&mut [&mut p]).unwrap();
        p.grad.data_mut()[0] = -2.0;
        adam.step(&mut [&mut p]).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let step2 = 1e-3 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expect = -1e-3 / (1.0 + 1e-8) - step2;
        assert!((p.value.data()[0] as f64 - expect).abs() < 1e-8);
        let (mm, vv) = adam.moments(0);
        assert!((mm[0] as f64 - m).abs() < 1e-7 && (vv[0] as f64 - v).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let mut p = param(&[0.25, 4.0], &[5.0, -1.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &[&p]);
        for _ in 0..3 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data(), &[0.25, 4.0]);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut p = param(&[1.0, 2.0], &[0.5, f32::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        match adam.step(&mut [&mut p]) {
            Err(Error::NonFinite { what }) => assert!(what.contains('p')),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.value.data(), &[1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn deterministic_and_restorable() {
        let run = |adam: &mut Adam, p: &mut Parameter<f32>| {
            for k in 0..4 {
                p.grad.data_mut()[0] = (k as f32 - 1.5) * 0.3;
                adam.step(&mut [&mut *p]).unwrap();
            }
        };
        let mut p1 = param(&[1.0], &[0.0]);
        let mut a1 = Adam::new(AdamConfig::default(), &[&p1]);
        run(&mut a1, &mut p1);

        let mut p2 = param(&[1.0], &[0.0]);
        let mut a2 = Adam::new(AdamConfig::default(), &[&p2]);
        run(&mut a2, &mut p2);
        assert_eq!(p1.value, p2.value);

        let mut ck = Checkpoint::new(&crate::model::ModelConfig::new(4, 4, "1/4".parse().unwrap(), 0).unwrap()).unwrap();
        a1.save("adam.", &[&p1], &mut ck);
        let mut a3 = Adam::new(AdamConfig::default(), &[&p1]);
        a3.load("adam.", &[&p1], &ck).unwrap();
        assert_eq!(a3.steps(), 4);
        assert_eq!(a3.moments(0), a1.moments(0));
    }
}
