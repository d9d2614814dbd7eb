use rand::seq::index::sample;
use rand::Rng;

use super::loss::mse_loss;
use crate::error::{Error, Result};
use crate::model::{EndToEnd, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::{Layer, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Worst per-tensor error `||a - n|| / max(||a||, ||n||, floor)` over the
    /// sampled coordinates of that tensor, where `floor` is a thousand times
    /// the round-off resolution `eps |L| / step` of the differences.
    pub max_tensor_error: f64,
    pub worst_tensor: String,
    /// Worst single-coordinate relative error, for diagnosis.
    pub max_entry_error: f64,
    pub tensors: usize,
    pub coordinates: usize,
}

/// Compares the analytic gradient of the end-to-end reconstruction loss with
/// central differences, for a single random sample, in double precision.
/// Up to `per_tensor` coordinates of every parameter tensor are probed.
///
/// The loss is only piecewise smooth because of the Leaky ReLU kinks, and a
/// difference that straddles one is wrong by an amount that does not shrink
/// with the step. Small steps (about `1e-6`) make crossings rare.
pub fn loss_gradient_check(cfg: &ModelConfig, step: f64, per_tensor: usize, seed: u64) -> Result<GradReport> {
    if !(1e-7..=1e-2).contains(&step) {
        return Err(Error::Parameter(format!("gradient-check step must lie in [1e-6, 1e-2], got {step}")));
    }
    let mut net = EndToEnd::<f64>::new(cfg)?;
    let mut rng = stream_rng(seed, "gradcheck", 0);
    let shape = [1, 2, cfg.n_cc, cfg.n_t];
    let x = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(-0.5..0.5))?;
    let label = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(-0.5..0.5))?;

    net.zero_grad();
    let (loss, g) = mse_loss(&net.forward(&x)?, &label)?;
    // Central differences cannot resolve gradients below the loss's
    // round-off over the step. Conv biases ahead of batch normalization
    // have exactly zero gradient and land there.
    let floor = (1e3 * f64::EPSILON * loss.abs() / step).max(1e-8);
    net.backward(&g)?;
    let analytic: Vec<(String, Vec<f64>)> =
        net.parameters().iter().map(|p| (p.name.clone(), p.grad.data().to_vec())).collect();

    let loss_at = |net: &mut EndToEnd<f64>, pi: usize, i: usize, v: f64| -> Result<f64> {
        let orig = net.parameters()[pi].value.data()[i];
        net.parameters_mut()[pi].value.data_mut()[i] = v;
        let l = mse_loss(&net.forward(&x)?, &label)?.0;
        net.parameters_mut()[pi].value.data_mut()[i] = orig;
        Ok(l)
    };

    let mut report = GradReport {
        max_tensor_error: 0.0,
        worst_tensor: String::new(),
        max_entry_error: 0.0,
        tensors: analytic.len(),
        coordinates: 0,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let picks = sample(&mut rng, grads.len(), per_tensor.min(grads.len()));
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in picks {
            let w = net.parameters()[pi].value.data()[i];
            let plus = loss_at(&mut net, pi, i, w + step)?;
            let minus = loss_at(&mut net, pi, i, w - step)?;
            let (a, n) = (grads[i], (plus - minus) / (2.0 * step));
            diff += (a - n).powi(2);
            na += a * a;
            nn += n * n;
            let entry = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.max_entry_error = report.max_entry_error.max(entry);
            report.coordinates += 1;
        }
        let err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor);
        if err >= report.max_tensor_error {
            report.max_tensor_error = err;
            report.worst_tensor = name.clone();
        }
    }
    Ok(report)
}
