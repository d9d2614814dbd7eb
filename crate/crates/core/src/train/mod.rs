//! Adam, the reconstruction losses, two-stage and end-to-end training, and
//! loss logs.

mod adam;
mod data;
mod gradcheck;
mod loss;
mod session;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Denoiser, EndToEnd, Feedback, ModelConfig};

pub use adam::{Adam, AdamConfig};
pub use data::{check_dataset, gather, infer_batched, Pairs};
pub use gradcheck::{loss_gradient_check, GradReport};
pub use loss::{error_ratios, mse_loss, to_db};
pub use session::{has_saved_state, Session, Snapshot};

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// The denoiser alone, on (noisy, clean) pairs.
    Denoiser = 1,
    /// Encoder and decoder on the frozen denoiser's outputs.
    Feedback = 2,
    /// All three networks under one loss.
    EndToEnd = 3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Denoiser => "denoiser",
            Stage::Feedback => "feedback",
            Stage::EndToEnd => "end-to-end",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Denoiser, Stage::Feedback, Stage::EndToEnd]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected denoiser, feedback or end-to-end")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Master seed; shuffling uses its `shuffle` stream.
    pub seed: u64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 1000,
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.adam.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1 when set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation NMSE in dB. Not part of the CSV.
    pub val_nmse_db: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<EpochRecord>,
}

pub const LOSS_LOG_HEADER: &str = "stage,epoch,train_loss,val_loss";

impl LossLog {
    pub fn extend(&mut self, other: &LossLog) {
        self.rows.extend_from_slice(&other.rows);
    }

    /// Losses print in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOSS_LOG_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.stage, r.epoch, r.train_loss, r.val_loss));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOSS_LOG_HEADER) {
            return Err(Error::Format {
                offset: 0,
                reason: format!("loss log must start with {LOSS_LOG_HEADER:?}"),
            });
        }
        let mut rows = Vec::new();
        let mut offset = LOSS_LOG_HEADER.len() + 1;
        for line in lines {
            let bad = |why: &str| Error::Format {
                offset: offset as u64,
                reason: format!("{why} in loss log row {line:?}"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            rows.push(EpochRecord {
                stage: f[0].parse().map_err(|_| bad("unknown stage"))?,
                epoch: f[1].parse().map_err(|_| bad("bad epoch"))?,
                train_loss: f[2].parse().map_err(|_| bad("bad train loss"))?,
                val_loss: f[3].parse().map_err(|_| bad("bad validation loss"))?,
                val_nmse_db: None,
            });
            offset += line.len() + 1;
        }
        Ok(LossLog { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Trains a freshly initialized denoiser on (noisy, clean) pairs.
pub fn train_stage1(model: &ModelConfig, cfg: &TrainConfig, train: &Pairs, val: &Pairs) -> Result<(Denoiser, LossLog)> {
    let mut s = Session::new(Stage::Denoiser, Denoiser::new(model)?, cfg)?;
    s.run(train, val, |_, _| Ok(()))?;
    s.finish()
}

/// Denoiser outputs paired with the clean labels, computed once.
pub fn stage2_pairs(denoiser: &Denoiser, pairs: &Pairs, chunk: usize) -> Result<Pairs> {
    pairs.map_inputs(denoiser, chunk)
}

/// Trains encoder and decoder on the outputs of a frozen denoiser.
pub fn train_stage2(
    model: &ModelConfig,
    cfg: &TrainConfig,
    denoiser: &Denoiser,
    train: &Pairs,
    val: &Pairs,
) -> Result<(Feedback, LossLog)> {
    let train = stage2_pairs(denoiser, train, cfg.batch_size)?;
    let val = stage2_pairs(denoiser, val, cfg.batch_size)?;
    let mut s = Session::new(Stage::Feedback, Feedback::new(model)?, cfg)?;
    s.run(&train, &val, |_, _| Ok(()))?;
    s.finish()
}

/// Trains all three networks under one loss, optionally starting from a
/// trained denoiser.
pub fn train_end_to_end(
    model: &ModelConfig,
    cfg: &TrainConfig,
    denoiser: Option<Denoiser>,
    train: &Pairs,
    val: &Pairs,
) -> Result<(EndToEnd, LossLog)> {
    let denoiser = match denoiser {
        Some(d) => d,
        None => Denoiser::new(model)?,
    };
    let net = EndToEnd::from_parts(denoiser, Feedback::new(model)?)?;
    let mut s = Session::new(Stage::EndToEnd, net, cfg)?;
    s.run(train, val, |_, _| Ok(()))?;
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, GeneratorParams};
    use crate::model::Checkpoint;
    use crate::tensor::Layer;

    fn model() -> ModelConfig {
        ModelConfig::new(8, 8, "1/4".parse().unwrap(), 3).unwrap()
    }

    fn pairs(count: usize, seed: u64) -> Pairs {
        let p = GeneratorParams {
            n_c: 32,
            n_t: 8,
            n_cc: 8,
            max_delay: 4.0,
            ..GeneratorParams::default()
        };
        Pairs::from_dataset(&generate_dataset(&p, 10.0, count, seed).unwrap(), &model()).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Denoiser, Stage::Feedback, Stage::EndToEnd] {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("both".parse::<Stage>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { patience: Some(0), ..cfg(1) }.validate().is_err());
        let (tr, va) = (pairs(4, 1), pairs(4, 2));
        let mut s = Session::new(Stage::Denoiser, Denoiser::new(&model()).unwrap(), &cfg(1)).unwrap();
        assert!(matches!(s.run_epoch(&tr, &va), Err(Error::Config(_))));
    }

    #[test]
    fn loss_log_csv_round_trip() {
        let mut log = LossLog::default();
        for (i, stage) in [Stage::Denoiser, Stage::Feedback].into_iter().enumerate() {
            log.rows.push(EpochRecord {
                stage,
                epoch: i + 1,
                train_loss: 0.1 + 0.2,
                val_loss: 1.0 / 3.0,
                val_nmse_db: None,
            });
        }
        let csv = log.to_csv();
        assert!(csv.starts_with("stage,epoch,train_loss,val_loss\ndenoiser,1,"));
        assert_eq!(LossLog::parse_csv(&csv).unwrap(), log);
        assert!(LossLog::parse_csv("a,b\n").is_err());
        assert!(LossLog::parse_csv(&format!("{LOSS_LOG_HEADER}\nx,1,2,3\n")).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (tr, va) = (pairs(32, 1), pairs(8, 2));
        let (_, a) = train_stage1(&model(), &cfg(6), &tr, &va).unwrap();
        let (_, b) = train_stage1(&model(), &cfg(6), &tr, &va).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6);
        assert!(a.rows.iter().all(|r| r.train_loss >= 0.0 && r.val_loss.is_finite()));
        assert!(a.rows[5].train_loss < a.rows[0].train_loss, "{a:?}");
    }

    #[test]
    fn best_weights_are_returned() {
        let (tr, va) = (pairs(32, 1), pairs(8, 2));
        let mut s = Session::new(Stage::Denoiser, Denoiser::new(&model()).unwrap(), &cfg(4)).unwrap();
        s.run(&tr, &va, |_, _| Ok(())).unwrap();
        let best = s.best_val();
        let (net, log) = s.finish().unwrap();
        let pred = infer_batched(&net, &va.inputs, 8).unwrap();
        assert_eq!(mse_loss(&pred, &va.labels).unwrap().0, best);
        assert_eq!(best, log.rows.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (tr, va) = (pairs(24, 1), pairs(8, 2));
        let m = model();
        let mut full = Session::new(Stage::Feedback, Feedback::new(&m).unwrap(), &cfg(4)).unwrap();
        full.run(&tr, &va, |_, _| Ok(())).unwrap();

        let mut first = Session::new(Stage::Feedback, Feedback::new(&m).unwrap(), &cfg(2)).unwrap();
        first.run(&tr, &va, |_, _| Ok(())).unwrap();
        let mut ck = Checkpoint::new(&m).unwrap();
        first.save(&mut ck);
        let ck = Checkpoint::decode(&ck.encode().unwrap()).unwrap();

        let mut resumed = Session::new(Stage::Feedback, Feedback::new(&ModelConfig { seed: 99, ..m.clone() }).unwrap(), &cfg(4)).unwrap();
        resumed.resume(&ck).unwrap();
        assert_eq!(resumed.epoch(), 2);
        resumed.run(&tr, &va, |_, _| Ok(())).unwrap();
        for (a, b) in full.log().rows.iter().zip(&resumed.log().rows) {
            assert!((a.train_loss - b.train_loss).abs() <= 1e-6 * a.train_loss.abs().max(1.0), "{a:?} {b:?}");
            assert!((a.val_loss - b.val_loss).abs() <= 1e-6 * a.val_loss.abs().max(1.0));
        }
        assert_eq!(full.log(), resumed.log());
    }

    #[test]
    fn divergence_restores_best_weights() {
        let (tr, va) = (pairs(16, 1), pairs(8, 2));
        let mut s = Session::new(Stage::Denoiser, Denoiser::new(&model()).unwrap(), &cfg(3)).unwrap();
        s.run_epoch(&tr, &va).unwrap();
        let best = Snapshot::take(s.net());
        let mut poisoned = tr.clone();
        poisoned.inputs.data_mut()[5] = f32::NAN;
        match s.run_epoch(&poisoned, &va) {
            Err(Error::NonFinite { what }) => assert!(what.contains("epoch 2"), "{what}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(Snapshot::take(s.net()), best);
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn stage2_leaves_denoiser_untouched() {
        let (tr, va) = (pairs(16, 1), pairs(8, 2));
        let (den, _) = train_stage1(&model(), &cfg(1), &tr, &va).unwrap();
        let before = Snapshot::take(&den);
        let buffers = den.buffers();
        let (_, log) = train_stage2(&model(), &cfg(2), &den, &tr, &va).unwrap();
        assert_eq!(log.rows.len(), 2);
        assert!(log.rows.iter().all(|r| r.stage == Stage::Feedback));
        assert_eq!(Snapshot::take(&den), before);
        assert_eq!(den.buffers(), buffers);
    }

    #[test]
    fn end_to_end_reaches_the_denoiser() {
        let tr = pairs(8, 1);
        let mut net = EndToEnd::<f32>::new(&model()).unwrap();
        let (x, y) = tr.gather(&[0, 1, 2, 3]).unwrap();
        let (_, g) = mse_loss(&net.forward(&x).unwrap(), &y).unwrap();
        net.backward(&g).unwrap();
        assert!(net.denoiser.parameters().iter().any(|p| p.grad.data().iter().any(|&v| v != 0.0)));
    }
}
