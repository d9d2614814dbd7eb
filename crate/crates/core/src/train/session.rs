use rand::seq::SliceRandom;

use super::adam::Adam;
use super::data::{infer_batched, Pairs};
use super::loss::{error_ratios, mse_loss, to_db};
use super::{EpochRecord, LossLog, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::rng::{stream_rng, STREAM_SHUFFLE};
use crate::tensor::{Layer, Tensor};

/// Parameter values and buffers of a network, without gradients or caches.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    params: Vec<(String, Tensor<f32>)>,
    buffers: Vec<(String, Tensor<f32>)>,
}

impl Snapshot {
    pub fn take(net: &dyn Layer<f32>) -> Self {
        Snapshot {
            params: net.parameters().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: net.buffers(),
        }
    }

    pub fn restore(&self, net: &mut dyn Layer<f32>) -> Result<()> {
        for (p, (name, v)) in net.parameters_mut().into_iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(Error::State(format!("snapshot entry {name} does not match parameter {}", p.name)));
            }
            p.value = v.clone();
        }
        for (name, t) in &self.buffers {
            net.load_buffer(name, t)?;
        }
        Ok(())
    }

    fn save(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, t) in self.params.iter().chain(&self.buffers) {
            ck.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    fn load(prefix: &str, like: &dyn Layer<f32>, ck: &Checkpoint) -> Result<Self> {
        let fetch = |name: &str| {
            ck.get(&format!("{prefix}{name}"))
                .cloned()
                .ok_or_else(|| Error::State(format!("checkpoint has no entry {prefix}{name}")))
        };
        let mut params = Vec::new();
        for p in like.parameters() {
            let t = fetch(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("snapshot entry", t.shape(), p.value.shape()));
            }
            params.push((p.name.clone(), t));
        }
        let buffers = ck
            .entries()
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .filter(|(n, _)| n.contains(".running_"))
            .collect();
        Ok(Snapshot { params, buffers })
    }
}

fn state_prefix(stage: Stage) -> String {
    format!("train.{stage}.")
}

/// Whether `ck` holds resumable state written by a session of `stage`.
pub fn has_saved_state(stage: Stage, ck: &Checkpoint) -> bool {
    ck.get(&format!("{}log", state_prefix(stage))).is_some()
}

/// One stage of training: the network, its optimizer, the best weights so
/// far and the loss log. Everything needed to resume lives in
/// [`Session::save`].
pub struct Session<N> {
    stage: Stage,
    cfg: TrainConfig,
    net: N,
    adam: Adam,
    best: Option<Snapshot>,
    best_val: f64,
    best_epoch: usize,
    log: LossLog,
}

impl<N: Layer<f32>> Session<N> {
    pub fn new(stage: Stage, net: N, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam, &net.parameters());
        Ok(Session {
            stage,
            cfg: cfg.clone(),
            net,
            adam,
            best: None,
            best_val: f64::INFINITY,
            best_epoch: 0,
            log: LossLog::default(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &N {
        &self.net
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.log.rows.len()
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    /// Whether the epoch budget or the patience is exhausted.
    pub fn done(&self) -> bool {
        let stalled = self
            .cfg
            .patience
            .is_some_and(|p| self.best_epoch > 0 && self.epoch() - self.best_epoch >= p);
        self.epoch() >= self.cfg.epochs || stalled
    }

    fn shuffle_index(&self, epoch: usize) -> u64 {
        ((self.stage as u64) << 32) | epoch as u64
    }

    /// Puts the best weights back and reports the divergence.
    fn diverged(&mut self, what: String) -> Error {
        if let Some(best) = &self.best {
            // Restoring a snapshot of this very network cannot mismatch.
            let _ = best.restore(&mut self.net);
        }
        Error::NonFinite { what }
    }

    pub fn run_epoch(&mut self, train: &Pairs, val: &Pairs) -> Result<EpochRecord> {
        let n = train.len();
        let bs = self.cfg.batch_size;
        if bs > n {
            return Err(Error::Config(format!("batch size {bs} exceeds the {n} training samples")));
        }
        if val.is_empty() {
            return Err(Error::Config("validation set is empty".into()));
        }
        let epoch = self.epoch() + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, self.shuffle_index(epoch)));

        let mut total = 0.0;
        for idx in order.chunks(bs) {
            let (x, y) = train.gather(idx)?;
            self.net.zero_grad();
            let pred = self.net.forward(&x)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(self.diverged(format!("{} training loss at epoch {epoch}", self.stage)));
            }
            self.net.backward(&grad)?;
            if let Err(e) = self.adam.step(&mut self.net.parameters_mut()) {
                return Err(match e {
                    Error::NonFinite { what } => self.diverged(format!("{what} at epoch {epoch}")),
                    e => e,
                });
            }
            total += loss * idx.len() as f64;
        }
        let train_loss = total / n as f64;

        let pred = infer_batched(&self.net, &val.inputs, bs)?;
        let (val_loss, _) = mse_loss(&pred, &val.labels)?;
        if !val_loss.is_finite() {
            return Err(self.diverged(format!("{} validation loss at epoch {epoch}", self.stage)));
        }
        let ratios = error_ratios(&pred, &val.labels)?;
        let val_nmse_db = to_db(ratios.iter().sum::<f64>() / ratios.len() as f64);

        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_epoch = epoch;
            self.best = Some(Snapshot::take(&self.net));
        }
        let rec = EpochRecord {
            stage: self.stage,
            epoch,
            train_loss,
            val_loss,
            val_nmse_db: Some(val_nmse_db),
        };
        self.log.rows.push(rec);
        Ok(rec)
    }

    /// Trains until [`Session::done`], calling `after_epoch` after each epoch.
    pub fn run(
        &mut self,
        train: &Pairs,
        val: &Pairs,
        mut after_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.done() {
            let rec = self.run_epoch(train, val)?;
            after_epoch(self, &rec)?;
        }
        Ok(())
    }

    /// The network with its best-validation weights, and the log.
    pub fn finish(mut self) -> Result<(N, LossLog)> {
        if let Some(best) = &self.best {
            best.restore(&mut self.net)?;
        }
        Ok((self.net, self.log))
    }

    fn prefix(&self) -> String {
        state_prefix(self.stage)
    }

    /// Writes the resumable state: current and best weights, optimizer
    /// moments, counters and the log.
    pub fn save(&self, ck: &mut Checkpoint) {
        let p = self.prefix();
        Snapshot::take(&self.net).save(&format!("{p}current."), ck);
        if let Some(best) = &self.best {
            best.save(&format!("{p}best."), ck);
        }
        self.adam.save(&format!("{p}adam."), &self.net.parameters(), ck);
        ck.insert_f64(&format!("{p}best_val"), self.best_val);
        ck.insert_u64(&format!("{p}best_epoch"), self.best_epoch as u64);
        let flat: Vec<f64> = self
            .log
            .rows
            .iter()
            .flat_map(|r| [r.train_loss, r.val_loss, r.val_nmse_db.unwrap_or(f64::NAN)])
            .collect();
        ck.insert_f64s(&format!("{p}log"), &flat);
    }

    /// Restores the state written by [`Session::save`] for this stage.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let p = self.prefix();
        let missing = |what: &str| Error::State(format!("checkpoint has no {what} for stage {}", self.stage));
        let flat = ck.get_f64s(&format!("{p}log")).ok_or_else(|| missing("loss log"))?;
        let best_val = ck.get_f64(&format!("{p}best_val")).ok_or_else(|| missing("best validation loss"))?;
        let best_epoch = ck.get_u64(&format!("{p}best_epoch")).ok_or_else(|| missing("best epoch"))? as usize;
        Snapshot::load(&format!("{p}current."), &self.net, ck)?.restore(&mut self.net)?;
        self.best = if best_epoch > 0 {
            Some(Snapshot::load(&format!("{p}best."), &self.net, ck)?)
        } else {
            None
        };
        self.adam.load(&format!("{p}adam."), &self.net.parameters(), ck)?;
        self.best_val = best_val;
        self.best_epoch = best_epoch;
        self.log.rows = flat
            .chunks(3)
            .enumerate()
            .map(|(i, c)| EpochRecord {
                stage: self.stage,
                epoch: i + 1,
                train_loss: c[0],
                val_loss: c[1],
                val_nmse_db: Some(c[2]).filter(|v| !v.is_nan()),
            })
            .collect();
        Ok(())
    }
}
