//! The denoiser, encoder and decoder networks, their parameter ledger and
//! checkpoints.

mod blocks;
mod checkpoint;
mod nets;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::LEAKY_SLOPE;

pub use blocks::{AnciBlock, CompositeUnit, ConvHead, BLOCK_FILTERS};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use nets::{fans, Decoder, Denoiser, Encoder, EndToEnd, Feedback, DECODER_BLOCKS, DENOISER_BLOCKS};

/// Compression ratio `M / (2 n_cc n_t)` as a reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CompressionRatio {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl CompressionRatio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("compression ratio {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(CompressionRatio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for CompressionRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse compression ratio {s:?}; expected e.g. \"1/4\""));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Self::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl PartialOrd for CompressionRatio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CompressionRatio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

/// Dimensions and hyperparameters shared by the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_cc: usize,
    pub n_t: usize,
    pub gamma: CompressionRatio,
    pub leaky_slope: f64,
    /// Master seed; weight initialization uses its `init` stream.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_cc: usize, n_t: usize, gamma: CompressionRatio, seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            n_cc,
            n_t,
            gamma,
            leaky_slope: LEAKY_SLOPE,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cc == 0 || self.n_t == 0 {
            return Err(Error::Config(format!("image extents must be positive, got {}x{}", self.n_cc, self.n_t)));
        }
        self.codeword_len().map(|_| ())
    }

    /// `2 n_cc n_t`, the number of reals in one image.
    pub fn image_len(&self) -> usize {
        2 * self.n_cc * self.n_t
    }

    /// Codeword length `M = gamma * 2 n_cc n_t`; must be a positive integer.
    pub fn codeword_len(&self) -> Result<usize> {
        let scaled = self.image_len() * self.gamma.num as usize;
        let den = self.gamma.den as usize;
        if !scaled.is_multiple_of(den) {
            return Err(Error::Config(format!(
                "gamma = {} gives a non-integer codeword length for a 2x{}x{} image",
                self.gamma, self.n_cc, self.n_t
            )));
        }
        Ok(scaled / den)
    }
}

/// Per-network parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub denoiser_conv: usize,
    pub encoder_conv: usize,
    pub decoder_conv: usize,
    pub encoder_dense: usize,
    pub decoder_dense: usize,
    /// Four values per batch-norm channel: scale, shift, running mean and
    /// running variance.
    pub norm_aux: usize,
}

impl ParamCount {
    pub fn conv(&self) -> usize {
        self.denoiser_conv + self.encoder_conv + self.decoder_conv
    }

    pub fn dense(&self) -> usize {
        self.encoder_dense + self.decoder_dense
    }

    pub fn conv_dense(&self) -> usize {
        self.conv() + self.dense()
    }

    pub fn total(&self) -> usize {
        self.conv_dense() + self.norm_aux
    }
}

/// Published totals for `n_cc = n_t = 32`.
pub const REFERENCE_TOTALS: [((u32, u32), usize); 4] =
    [((1, 4), 2_289_334), ((1, 16), 716_086), ((1, 32), 453_878), ((1, 64), 322_774)];

/// Constant gap between the published totals and the conv + dense ledger.
pub const REFERENCE_GAP: usize = 3_840;

pub fn reference_total(gamma: CompressionRatio) -> Option<usize> {
    REFERENCE_TOTALS
        .iter()
        .find(|((n, d), _)| gamma.num == *n && gamma.den == *d)
        .map(|&(_, t)| t)
}

/// `f * k * m * m + f`
pub fn conv_params(f: usize, k: usize, m: usize) -> usize {
    f * k * m * m + f
}

/// `f_in * f_out + f_out`
pub fn dense_params(f_in: usize, f_out: usize) -> usize {
    f_in * f_out + f_out
}

/// Counts from the layer ledger: `(filters, in_channels, kernel)` per conv
/// and whether it is followed by batch normalization.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    let m = cfg.codeword_len()?;
    let n = cfg.image_len();
    let f = BLOCK_FILTERS;
    let block = [(f, f, 7, true), (f, f, 5, true), (f, f, 3, true)];
    let stem = [(64, 2, 7, true), (f, 64, 1, true)];
    let head = (2, f, 3, false);

    let mut denoiser = stem.to_vec();
    (0..DENOISER_BLOCKS).for_each(|_| denoiser.extend(block));
    denoiser.push(head);
    let mut encoder = stem.to_vec();
    encoder.extend(block);
    encoder.push((2, f, 1, true));
    let mut decoder = vec![(f, 2, 1, true)];
    (0..DECODER_BLOCKS).for_each(|_| decoder.extend(block));
    decoder.push(head);

    let conv = |units: &[(usize, usize, usize, bool)]| units.iter().map(|&(f, k, m, _)| conv_params(f, k, m)).sum();
    let norm = |units: &[(usize, usize, usize, bool)]| -> usize {
        units.iter().filter(|u| u.3).map(|u| 4 * u.0).sum()
    };
    Ok(ParamCount {
        denoiser_conv: conv(&denoiser),
        encoder_conv: conv(&encoder),
        decoder_conv: conv(&decoder),
        encoder_dense: dense_params(n, m),
        decoder_dense: dense_params(m, n),
        norm_aux: norm(&denoiser) + norm(&encoder) + norm(&decoder),
    })
}
