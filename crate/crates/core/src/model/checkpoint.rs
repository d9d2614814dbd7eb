//! Named tensor collections on disk.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ACKP" | u16 version | u32 n_cc | u32 n_t | u32 gamma num | u32 gamma den | u32 M
//! entries until end of file:
//!   u16 name length | UTF-8 name | u8 rank | u32 extent x rank | f32 data
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{CompressionRatio, ModelConfig};
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::{Layer, Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub n_cc: usize,
    pub n_t: usize,
    pub gamma: CompressionRatio,
    pub codeword_len: usize,
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

/// Entries compare bitwise so that stored `f64` lanes which happen to be
/// NaN patterns still compare equal.
impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        let header = |c: &Self| (c.n_cc, c.n_t, c.gamma, c.codeword_len);
        header(self) == header(other)
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Checkpoint {
            n_cc: cfg.n_cc,
            n_t: cfg.n_t,
            gamma: cfg.gamma,
            codeword_len: cfg.codeword_len()?,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Fails with a configuration error if `cfg` differs from the stored
    /// dimensions.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let stored = (self.n_cc, self.n_t, self.gamma);
        if stored != (cfg.n_cc, cfg.n_t, cfg.gamma) {
            return Err(Error::Config(format!(
                "checkpoint was written for n_cc={} n_t={} gamma={} but the config has n_cc={} n_t={} gamma={}",
                self.n_cc, self.n_t, self.gamma, cfg.n_cc, cfg.n_t, cfg.gamma
            )));
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    /// Parameters and buffers of `net`, each name prefixed with `prefix`.
    pub fn insert_network(&mut self, prefix: &str, net: &dyn Layer<f32>) {
        for p in net.parameters() {
            self.insert(format!("{prefix}{}", p.name), p.value.clone());
        }
        for (name, t) in net.buffers() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Restores every parameter of `net` and any stored buffer. A missing
    /// parameter is a state error, a shape mismatch a dimension error.
    pub fn load_network(&self, prefix: &str, net: &mut dyn Layer<f32>) -> Result<()> {
        let mut known = Vec::new();
        for p in net.parameters_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = self
                .get(&key)
                .ok_or_else(|| Error::State(format!("checkpoint has no entry {key:?}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("checkpoint entry", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
            known.push(key);
        }
        for (name, t) in &self.entries {
            if let Some(stripped) = name.strip_prefix(prefix) {
                if !known.contains(name) {
                    net.load_buffer(stripped, t)?;
                }
            }
        }
        Ok(())
    }

    /// Stores `f64` values losslessly, each as the bit pattern of two `f32`
    /// lanes.
    pub fn insert_f64s(&mut self, name: &str, values: &[f64]) {
        let data: Vec<f32> = values
            .iter()
            .flat_map(|v| {
                let bits = v.to_bits();
                [f32::from_bits((bits >> 32) as u32), f32::from_bits(bits as u32)]
            })
            .collect();
        let len = data.len().max(1);
        let t = if data.is_empty() { Tensor::zeros(&[1]) } else { Tensor::new(&[len], data) };
        self.insert(name, t.expect("flat lanes"));
    }

    pub fn get_f64s(&self, name: &str) -> Option<Vec<f64>> {
        let lanes = self.get(name)?.data();
        if lanes.len() % 2 != 0 {
            return (lanes.len() == 1).then(Vec::new);
        }
        Some(
            lanes
                .chunks(2)
                .map(|c| f64::from_bits(((c[0].to_bits() as u64) << 32) | c[1].to_bits() as u64))
                .collect(),
        )
    }

    pub fn insert_f64(&mut self, name: &str, v: f64) {
        self.insert_f64s(name, &[v]);
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        match self.get_f64s(name)?.as_slice() {
            &[v] => Some(v),
            _ => None,
        }
    }

    pub fn insert_u64(&mut self, name: &str, v: u64) {
        self.insert_f64(name, f64::from_bits(v));
    }

    pub fn get_u64(&self, name: &str) -> Option<u64> {
        self.get_f64(name).map(f64::to_bits)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(26 + self.entries.iter().map(|e| e.1.len() * 4 + 64).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = [
            self.n_cc,
            self.n_t,
            self.gamma.num() as usize,
            self.gamma.den() as usize,
            self.codeword_len,
        ];
        for v in header {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Parameter(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            offset: offset as u64,
            reason,
        };
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic, expected \"ACKP\"".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let (n_cc, n_t) = (r.u32()? as usize, r.u32()? as usize);
        let (num, den) = (r.u32()?, r.u32()?);
        let codeword_len = r.u32()? as usize;
        let gamma = CompressionRatio::new(num, den).map_err(|e| fail(14, e.to_string()))?;
        let mut ck = Checkpoint {
            n_cc,
            n_t,
            gamma,
            codeword_len,
            entries: Vec::new(),
            index: HashMap::new(),
        };
        while !r.at_end() {
            let start = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fail(start + 2, "entry name is not UTF-8".into()))?
                .to_string();
            let rank_at = r.pos;
            let rank = r.take(1)?[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(fail(rank_at, format!("entry {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let data_at = r.pos;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&c| c <= bytes.len())
                .ok_or_else(|| fail(data_at, format!("entry {name:?} extents {shape:?} exceed the file")))?;
            let t = Tensor::new(&shape, r.f32s(count)?).map_err(|e| fail(data_at, e.to_string()))?;
            if ck.index.contains_key(&name) {
                return Err(fail(start, format!("duplicate entry {name:?}")));
            }
            ck.insert(name, t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
