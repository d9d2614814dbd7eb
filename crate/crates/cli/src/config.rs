//! Experiment configuration: a profile's defaults, overlaid by a TOML file,
//! overlaid by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ancinet::channel::{ClusterSpec, GeneratorParams, PhaseMode};
use ancinet::model::{CompressionRatio, ModelConfig};
use ancinet::rng::{derive_seed, STREAM_DATA};
use ancinet::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the resolved configuration written next to every run's outputs.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small enough for a desktop CPU.
    Desk,
    /// The full published sizes.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Denoiser first, then encoder and decoder on its frozen outputs.
    TwoStage,
    /// All three networks under one loss.
    EndToEnd,
    /// Only the first stage.
    Denoiser,
    /// Only the second stage, reusing a trained denoiser.
    Feedback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    /// Noisy input taken as the reconstruction.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PerPixel,
    PerCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub delay: f64,
    pub angle: f64,
    pub delay_spread: f64,
    pub angle_spread: f64,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub n_c: usize,
    pub n_t: usize,
    pub n_cc: usize,
    pub n_clusters: usize,
    pub max_delay: f64,
    pub delay_spread: [f64; 2],
    pub angle_spread: [f64; 2],
    pub power_decay: f64,
    pub phase: Phase,
    #[serde(default)]
    pub clusters: Vec<ClusterSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// CNR of the training and validation sets. Test sets are generated at
    /// every CNR of the evaluation sweep.
    pub cnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: String,
    pub leaky_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub cnrs: Vec<f64>,
    /// Compression ratios whose trained models are evaluated.
    pub gammas: Vec<String>,
    pub baseline: Baseline,
    /// Samples per inference batch.
    pub chunk: usize,
    /// Also write per-sample NMSE files.
    pub dump_samples: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub generator: GeneratorSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let g = GeneratorParams::default();
        let adam = AdamConfig::default();
        let mut cfg = ExperimentConfig {
            profile,
            seed: 0,
            out: PathBuf::from("runs/desk"),
            generator: GeneratorSection {
                n_c: g.n_c,
                n_t: g.n_t,
                n_cc: g.n_cc,
                n_clusters: g.n_clusters,
                max_delay: g.max_delay,
                delay_spread: [g.delay_spread.0, g.delay_spread.1],
                angle_spread: [g.angle_spread.0, g.angle_spread.1],
                power_decay: g.power_decay,
                phase: match g.phase {
                    PhaseMode::PerPixel => Phase::PerPixel,
                    PhaseMode::PerCluster => Phase::PerCluster,
                },
                clusters: Vec::new(),
            },
            data: DataSection {
                train: 2_000,
                val: 400,
                test: 400,
                cnr_db: 10.0,
            },
            model: ModelSection {
                gamma: "1/4".into(),
                leaky_slope: ancinet::tensor::LEAKY_SLOPE,
            },
            train: TrainSection {
                mode: TrainMode::TwoStage,
                epochs: 100,
                batch_size: 100,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                patience: None,
            },
            eval: EvalSection {
                cnrs: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
                gammas: vec!["1/4".into()],
                baseline: Baseline::Identity,
                chunk: 100,
                dump_samples: false,
            },
        };
        if profile == Profile::Paper {
            cfg.out = PathBuf::from("runs/paper");
            cfg.generator.n_c = 1024;
            cfg.data = DataSection {
                train: 100_000,
                val: 30_000,
                test: 20_000,
                cnr_db: 10.0,
            };
            cfg.train.epochs = 1_000;
            cfg.train.batch_size = 1_000;
            cfg.eval.chunk = 1_000;
        }
        cfg
    }

    /// Profile defaults with the keys of `text` laid over them. The file may
    /// name its own profile; `profile` wins when given.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> CliResult<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let profile = match (profile, file.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| CliError::Config(format!("profile: {e}")))?,
            (None, None) => Profile::Desk,
        };
        let mut base = toml::Table::try_from(Self::profile(profile)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, file);
        base.insert("profile".into(), toml::Value::String(profile.to_string()));
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> CliResult<()> {
        self.generator_params().validate()?;
        let model = self.model_config()?;
        self.train_config().validate()?;
        for g in &self.eval.gammas {
            ModelConfig { gamma: parse_gamma(g)?, ..model.clone() }.validate()?;
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(CliError::Config("every split needs at least one sample".into()));
        }
        if !self.data.cnr_db.is_finite() || self.eval.cnrs.iter().any(|c| !c.is_finite()) {
            return Err(CliError::Config("CNR values must be finite".into()));
        }
        if self.eval.chunk == 0 {
            return Err(CliError::Config("eval.chunk must be at least 1".into()));
        }
        Ok(())
    }

    pub fn generator_params(&self) -> GeneratorParams {
        let g = &self.generator;
        GeneratorParams {
            n_c: g.n_c,
            n_t: g.n_t,
            n_cc: g.n_cc,
            n_clusters: g.n_clusters,
            max_delay: g.max_delay,
            delay_spread: (g.delay_spread[0], g.delay_spread[1]),
            angle_spread: (g.angle_spread[0], g.angle_spread[1]),
            power_decay: g.power_decay,
            phase: match g.phase {
                Phase::PerPixel => PhaseMode::PerPixel,
                Phase::PerCluster => PhaseMode::PerCluster,
            },
            clusters: g
                .clusters
                .iter()
                .map(|c| ClusterSpec {
                    delay: c.delay,
                    angle: c.angle,
                    delay_spread: c.delay_spread,
                    angle_spread: c.angle_spread,
                    power: c.power,
                })
                .collect(),
        }
    }

    pub fn gamma(&self) -> CliResult<CompressionRatio> {
        parse_gamma(&self.model.gamma)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        self.model_config_for(self.gamma()?)
    }

    pub fn model_config_for(&self, gamma: CompressionRatio) -> CliResult<ModelConfig> {
        let mut m = ModelConfig::new(self.generator.n_cc, self.generator.n_t, gamma, self.seed)?;
        m.leaky_slope = self.model.leaky_slope;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            seed: self.seed,
            patience: t.patience,
        }
    }

    /// Seeds of the train, validation and test splits, all drawn from the
    /// data stream of the master seed.
    pub fn split_seeds(&self) -> [u64; 3] {
        [0, 1, 2].map(|i| derive_seed(self.seed, STREAM_DATA, i))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir().join("train.acnt")
    }

    pub fn val_path(&self) -> PathBuf {
        self.data_dir().join("val.acnt")
    }

    pub fn test_path(&self, cnr_db: f64) -> PathBuf {
        self.data_dir().join(format!("test_cnr{}.acnt", fmt_num(cnr_db)))
    }

    /// Checkpoints and loss logs of the models trained at `gamma`.
    pub fn model_dir(&self, gamma: CompressionRatio) -> PathBuf {
        self.out.join(format!("gamma-{}-{}", gamma.num(), gamma.den()))
    }
}

pub fn parse_gamma(s: &str) -> CliResult<CompressionRatio> {
    CompressionRatio::from_str(s).map_err(CliError::from)
}

/// `10` for 10.0, `2.5` for 2.5, `-5` for -5.0.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Recursively replaces the keys of `base` with those of `over`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
