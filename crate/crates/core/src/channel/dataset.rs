//! Binary dataset files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ACNT" | u16 version | u32 n_c | u32 n_t | u32 n_cc | u32 count
//! f64 cnr_db | u64 seed
//! u32 n_clusters | f64 max_delay | f64 delay_spread lo, hi | f64 angle_spread lo, hi
//! f64 power_decay | u8 phase (0 per-pixel, 1 per-cluster) | u32 fixed clusters
//!   per fixed cluster: f64 delay, angle, delay_spread, angle_spread, power
//! per sample: f32 scale | label f32 x 2*n_cc*n_t | input f32 x 2*n_cc*n_t
//! ```
//!
//! Tensors are channel-major (real then imaginary), row-major within a
//! channel.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{ChannelSample, ClusterSpec, GeneratorParams, PhaseMode};
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACNT";
pub const FORMAT_VERSION: u16 = 1;

/// Samples together with everything needed to regenerate them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: GeneratorParams,
    pub cnr_db: f64,
    pub seed: u64,
    pub samples: Vec<ChannelSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `10 log10` of the mean per-sample ratio of label energy to the energy
    /// of `input - label`. The per-sample scale cancels.
    pub fn empirical_cnr_db(&self) -> f64 {
        let ratios: f64 = self
            .samples
            .iter()
            .map(|s| {
                let (mut sig, mut noise) = (0.0f64, 0.0f64);
                for (&x, &l) in s.input.data().iter().zip(s.label.data()) {
                    sig += (l as f64).powi(2);
                    noise += (x as f64 - l as f64).powi(2);
                }
                sig / noise
            })
            .sum();
        10.0 * (ratios / self.samples.len() as f64).log10()
    }

    /// Bytes before the first sample.
    pub fn header_len(&self) -> usize {
        4 + 2 + 4 * 4 + 8 + 8 + 4 + 8 * 6 + 1 + 4 + 40 * self.params.clusters.len()
    }

    /// Bytes per sample: the scale plus two `[2, n_cc, n_t]` tensors.
    pub fn sample_len(&self) -> usize {
        4 + 2 * 2 * self.params.n_cc * self.params.n_t * 4
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.samples.len() * self.sample_len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.samples.is_empty() {
            return Err(Error::Parameter("refusing to write an empty dataset".into()));
        }
        let p = &self.params;
        let shape = [2, p.n_cc, p.n_t];
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [p.n_c, p.n_t, p.n_cc, self.samples.len()] {
            out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Parameter(format!("{v} exceeds u32")))?.to_le_bytes());
        }
        out.extend_from_slice(&self.cnr_db.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(p.n_clusters as u32).to_le_bytes());
        for v in [p.max_delay, p.delay_spread.0, p.delay_spread.1, p.angle_spread.0, p.angle_spread.1, p.power_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match p.phase {
            PhaseMode::PerPixel => 0,
            PhaseMode::PerCluster => 1,
        });
        out.extend_from_slice(&(p.clusters.len() as u32).to_le_bytes());
        for c in &p.clusters {
            for v in [c.delay, c.angle, c.delay_spread, c.angle_spread, c.power] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label.shape() != shape || s.input.shape() != shape {
                return Err(Error::dim("dataset sample", s.input.shape(), &shape));
            }
            if !(s.scale > 0.0 && s.scale.is_finite()) {
                return Err(Error::DegenerateSample(format!("sample {i} has scale {}", s.scale)));
            }
            out.extend_from_slice(&s.scale.to_le_bytes());
            for v in s.label.data().iter().chain(s.input.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected \"ACNT\"".into(),
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let n_c = r.u32()? as usize;
        let n_t = r.u32()? as usize;
        let n_cc = r.u32()? as usize;
        let count = r.u32()? as usize;
        let cnr_db = r.f64()?;
        let seed = r.u64()?;
        let n_clusters = r.u32()? as usize;
        let max_delay = r.f64()?;
        let delay_spread = (r.f64()?, r.f64()?);
        let angle_spread = (r.f64()?, r.f64()?);
        let power_decay = r.f64()?;
        let phase_at = r.pos;
        let phase = match r.take(1)?[0] {
            0 => PhaseMode::PerPixel,
            1 => PhaseMode::PerCluster,
            b => {
                return Err(Error::Format {
                    offset: phase_at as u64,
                    reason: format!("unknown phase mode {b}"),
                })
            }
        };
        let n_fixed = r.u32()? as usize;
        let mut clusters = Vec::with_capacity(n_fixed.min(1024));
        for _ in 0..n_fixed {
            clusters.push(ClusterSpec {
                delay: r.f64()?,
                angle: r.f64()?,
                delay_spread: r.f64()?,
                angle_spread: r.f64()?,
                power: r.f64()?,
            });
        }
        let params = GeneratorParams {
            n_c,
            n_t,
            n_cc,
            n_clusters,
            max_delay,
            delay_spread,
            angle_spread,
            power_decay,
            phase,
            clusters,
        };
        let header_end = r.pos as u64;
        params.validate().map_err(|e| Error::Format {
            offset: header_end,
            reason: format!("invalid generator parameters: {e}"),
        })?;
        if count == 0 {
            return Err(Error::Format {
                offset: 18,
                reason: "sample count is zero".into(),
            });
        }
        let n = 2 * n_cc * n_t;
        let expected = header_end as usize + count * (4 + 8 * n);
        if bytes.len() < expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("truncated file: {count} samples need {expected} bytes"),
            });
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let scale = r.f32()?;
            let label = Tensor::new(&[2, n_cc, n_t], r.f32s(n)?)?;
            let input = Tensor::new(&[2, n_cc, n_t], r.f32s(n)?)?;
            samples.push(ChannelSample { input, label, scale });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Dataset {
            params,
            cnr_db,
            seed,
            samples,
        })
    }
}

pub fn dataset_write(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset.encode()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn dataset_read(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Dataset::decode(&bytes)
}
