//! Synthetic sparse channels, the angular-delay transform, estimation noise
//! and dataset persistence.

mod dataset;
mod dft;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_DATA, STREAM_NOISE};
use crate::tensor::Tensor;

pub use dataset::{dataset_read, dataset_write, Dataset, FORMAT_VERSION, MAGIC};
pub use dft::{from_angular_delay, to_angular_delay};

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Complex64::default(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        CMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Squared Frobenius norm.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// How cluster pixels are phased.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseMode {
    /// Independent uniform phase for every pixel of a cluster.
    PerPixel,
    /// One uniform phase shared by the whole cluster.
    PerCluster,
}

/// An explicitly placed cluster. Positions and spreads are in bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub delay: f64,
    pub angle: f64,
    pub delay_spread: f64,
    pub angle_spread: f64,
    pub power: f64,
}

/// Parameters of the clustered angular-delay generator.
///
/// When `clusters` is empty, `n_clusters` clusters are drawn per channel with
/// delay centers uniform in `[0, max_delay)`, angle centers uniform in
/// `[0, n_t)`, spreads uniform in the given ranges and power
/// `power_decay^k` for the k-th cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub n_c: usize,
    pub n_t: usize,
    pub n_cc: usize,
    pub n_clusters: usize,
    pub max_delay: f64,
    pub delay_spread: (f64, f64),
    pub angle_spread: (f64, f64),
    pub power_decay: f64,
    pub phase: PhaseMode,
    pub clusters: Vec<ClusterSpec>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            n_c: 256,
            n_t: 32,
            n_cc: 32,
            n_clusters: 3,
            max_delay: 8.0,
            delay_spread: (0.5, 1.5),
            angle_spread: (0.5, 2.0),
            power_decay: 0.5,
            phase: PhaseMode::PerPixel,
            clusters: Vec::new(),
        }
    }
}

fn param_err<T>(msg: String) -> Result<T> {
    Err(Error::Parameter(msg))
}

fn valid_range((lo, hi): (f64, f64)) -> bool {
    lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_c", self.n_c), ("n_t", self.n_t)] {
            if n < 8 || !n.is_power_of_two() {
                return param_err(format!("{name} must be a power of two >= 8, got {n}"));
            }
        }
        if self.n_cc == 0 || self.n_cc > self.n_c {
            return param_err(format!("n_cc must lie in [1, {}], got {}", self.n_c, self.n_cc));
        }
        if self.clusters.is_empty() {
            if self.n_clusters == 0 {
                return param_err("n_clusters must be at least 1".into());
            }
            if !(self.max_delay > 0.0 && self.max_delay <= self.n_cc as f64) {
                return param_err(format!(
                    "max_delay must lie in (0, n_cc = {}], got {}",
                    self.n_cc, self.max_delay
                ));
            }
            if !valid_range(self.delay_spread) || !valid_range(self.angle_spread) {
                return param_err("spread ranges must be finite with 0 <= lo <= hi".into());
            }
            if !(self.power_decay > 0.0 && self.power_decay <= 1.0) {
                return param_err(format!("power_decay must lie in (0, 1], got {}", self.power_decay));
            }
        }
        for (k, c) in self.clusters.iter().enumerate() {
            if !(c.delay >= 0.0 && c.delay < self.n_cc as f64) {
                return param_err(format!(
                    "cluster {k}: delay center {} outside [0, n_cc = {})",
                    c.delay, self.n_cc
                ));
            }
            if !(c.angle >= 0.0 && c.angle < self.n_t as f64) {
                return param_err(format!("cluster {k}: angle center {} outside [0, {})", c.angle, self.n_t));
            }
            let spreads_ok = c.delay_spread >= 0.0 && c.angle_spread >= 0.0;
            if !spreads_ok || !c.delay_spread.is_finite() || !c.angle_spread.is_finite() {
                return param_err(format!("cluster {k}: spreads must be finite and non-negative"));
            }
            if !(c.power > 0.0 && c.power.is_finite()) {
                return param_err(format!("cluster {k}: power must be positive"));
            }
        }
        Ok(())
    }

    fn draw_clusters(&self, rng: &mut impl Rng) -> Vec<ClusterSpec> {
        if !self.clusters.is_empty() {
            return self.clusters.clone();
        }
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let total: f64 = (0..self.n_clusters).map(|k| self.power_decay.powi(k as i32)).sum();
        (0..self.n_clusters)
            .map(|k| ClusterSpec {
                delay: uniform(rng, (0.0, self.max_delay)),
                angle: uniform(rng, (0.0, self.n_t as f64)),
                delay_spread: uniform(rng, self.delay_spread),
                angle_spread: uniform(rng, self.angle_spread),
                power: self.power_decay.powi(k as i32) / total,
            })
            .collect()
    }
}

/// Per-axis profile of one cluster: `(index, amplitude)` pairs.
fn profile(center: f64, spread: f64, n: usize, circular: bool, last: usize) -> Vec<(usize, f64)> {
    if spread == 0.0 {
        let idx = center.round() as usize;
        let idx = if circular { idx % n } else { idx.min(last) };
        return vec![(idx, 1.0)];
    }
    let dist = |i: usize| {
        let d = (i as f64 - center).abs();
        if circular {
            d.min(n as f64 - d)
        } else {
            d
        }
    };
    let (lo, hi) = if circular {
        (0, n - 1)
    } else {
        let reach = 6.0 * spread + 1.0;
        ((center - reach).floor().max(0.0) as usize, ((center + reach).ceil() as usize).min(n - 1))
    };
    (lo..=hi)
        .map(|i| (i, (-dist(i).powi(2) / (2.0 * spread * spread)).exp()))
        .filter(|&(_, a)| a > 1e-12)
        .collect()
}

/// Draws the angular-delay image of one channel (`n_c x n_t`).
pub fn generate_angular_delay(params: &GeneratorParams, rng: &mut impl Rng) -> Result<CMatrix> {
    params.validate()?;
    let (n_c, n_t) = (params.n_c, params.n_t);
    let mut img = CMatrix::zeros(n_c, n_t);
    for cl in params.draw_clusters(rng) {
        // Delta clusters stay inside the kept rows.
        let rows = profile(cl.delay, cl.delay_spread, n_c, false, params.n_cc - 1);
        let cols = profile(cl.angle, cl.angle_spread, n_t, true, n_t - 1);
        let norm: f64 = rows.iter().map(|r| r.1 * r.1).sum::<f64>() * cols.iter().map(|c| c.1 * c.1).sum::<f64>();
        let gain = (cl.power / norm).sqrt();
        let shared = rng.random_range(0.0..std::f64::consts::TAU);
        for &(r, ar) in &rows {
            for &(c, ac) in &cols {
                let phase = match params.phase {
                    PhaseMode::PerPixel => rng.random_range(0.0..std::f64::consts::TAU),
                    PhaseMode::PerCluster => shared,
                };
                img.data_mut()[r * n_t + c] += Complex64::from_polar(gain * ar * ac, phase);
            }
        }
    }
    Ok(img)
}

/// Spatial-frequency channel `H` (`n_c x n_t`) whose angular-delay image is a
/// sum of Gaussian-shaped clusters.
pub fn generate_channel(params: &GeneratorParams, rng: &mut impl Rng) -> Result<CMatrix> {
    Ok(from_angular_delay(&generate_angular_delay(params, rng)?))
}

/// First `n_cc` rows of `hd`.
pub fn truncate(hd: &CMatrix, n_cc: usize) -> Result<CMatrix> {
    if n_cc == 0 || n_cc > hd.rows() {
        return param_err(format!("n_cc must lie in [1, {}], got {n_cc}", hd.rows()));
    }
    Ok(CMatrix {
        rows: n_cc,
        cols: hd.cols(),
        data: hd.data()[..n_cc * hd.cols()].to_vec(),
    })
}

/// `H_s + E` with i.i.d. circularly-symmetric complex Gaussian `E` of
/// per-entry variance `P / 10^(cnr_db / 10)`, `P` being the mean per-entry
/// power of `hs`.
pub fn add_noise(hs: &CMatrix, cnr_db: f64, rng: &mut impl Rng) -> Result<CMatrix> {
    if !cnr_db.is_finite() {
        return param_err(format!("cnr_db must be finite, got {cnr_db}"));
    }
    let p = hs.energy() / hs.data().len() as f64;
    if p == 0.0 {
        return Err(Error::DegenerateSample("channel has zero power, so the noise level is undefined".into()));
    }
    let sigma = (p / 10f64.powf(cnr_db / 10.0) / 2.0).sqrt();
    let mut out = hs.clone();
    for z in out.data_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z += Complex64::new(sigma * re, sigma * im);
    }
    Ok(out)
}

/// One training pair on the normalized scale, `[2, n_cc, n_t]` with the real
/// part in channel 0 and the imaginary part in channel 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub input: Tensor<f32>,
    pub label: Tensor<f32>,
    /// Divisor applied to both tensors.
    pub scale: f32,
}

fn split(m: &CMatrix, scale: f64) -> Tensor<f32> {
    let n = m.data().len();
    let mut data = vec![0.0f32; 2 * n];
    for (i, z) in m.data().iter().enumerate() {
        data[i] = (z.re / scale) as f32;
        data[n + i] = (z.im / scale) as f32;
    }
    Tensor::new(&[2, m.rows(), m.cols()], data).expect("non-empty matrix")
}

/// Scales `noisy` and `clean` by the largest real or imaginary magnitude of
/// `noisy` and splits both into real/imaginary channels.
pub fn normalize_and_split(noisy: &CMatrix, clean: &CMatrix) -> Result<ChannelSample> {
    if (noisy.rows(), noisy.cols()) != (clean.rows(), clean.cols()) {
        return Err(Error::dim(
            "normalize_and_split",
            &[noisy.rows(), noisy.cols()],
            &[clean.rows(), clean.cols()],
        ));
    }
    let max = noisy.data().iter().fold(0.0f64, |m, z| m.max(z.re.abs()).max(z.im.abs()));
    if max == 0.0 || !max.is_finite() {
        return Err(Error::DegenerateSample(format!("normalization scale is {max}")));
    }
    // Round the stored scale up so every normalized entry stays within [-1, 1].
    let mut scale = max as f32;
    if (scale as f64) < max {
        scale = scale.next_up();
    }
    Ok(ChannelSample {
        input: split(noisy, scale as f64),
        label: split(clean, scale as f64),
        scale,
    })
}

/// Recombines a `[2, rows, cols]` tensor into a complex matrix on the
/// physical scale.
pub fn denormalize(t: &Tensor<f32>, scale: f32) -> Result<CMatrix> {
    let &[2, rows, cols] = t.shape() else {
        return Err(Error::dim("denormalize", t.shape(), &[2, 0, 0]));
    };
    let n = rows * cols;
    let s = scale as f64;
    let d = t.data();
    Ok(CMatrix::from_fn(rows, cols, |r, c| {
        let i = r * cols + c;
        Complex64::new(d[i] as f64 * s, d[n + i] as f64 * s)
    }))
}

/// Channel plus noisy observation of sample `index`, both truncated, on the
/// physical scale.
pub fn synthesize_pair(params: &GeneratorParams, cnr_db: f64, seed: u64, index: u64) -> Result<(CMatrix, CMatrix)> {
    let h = generate_channel(params, &mut stream_rng(seed, STREAM_DATA, index))?;
    let hs = truncate(&to_angular_delay(&h), params.n_cc)?;
    let noisy = add_noise(&hs, cnr_db, &mut stream_rng(seed, STREAM_NOISE, index))?;
    Ok((hs, noisy))
}

/// Sample `index` of the dataset defined by `(params, cnr_db, seed)`.
pub fn synthesize_sample(params: &GeneratorParams, cnr_db: f64, seed: u64, index: u64) -> Result<ChannelSample> {
    let (hs, noisy) = synthesize_pair(params, cnr_db, seed, index)?;
    normalize_and_split(&noisy, &hs)
}

/// Generates `count` samples in parallel; the result does not depend on the
/// number of threads.
pub fn generate_dataset(params: &GeneratorParams, cnr_db: f64, count: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if count == 0 {
        return param_err("a dataset needs at least one sample".into());
    }
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| synthesize_sample(params, cnr_db, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        params: params.clone(),
        cnr_db,
        seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta_params() -> GeneratorParams {
        GeneratorParams {
            clusters: vec![ClusterSpec {
                delay: 0.0,
                angle: 0.0,
                delay_spread: 0.0,
                angle_spread: 0.0,
                power: 1.0,
            }],
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn single_delta_cluster() {
        let p = delta_params();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = generate_angular_delay(&p, &mut rng).unwrap();
        let nonzero: Vec<usize> = (0..img.data().len()).filter(|&i| img.data()[i].norm() > 0.0).collect();
        assert_eq!(nonzero, vec![0]);
        let h = from_angular_delay(&img);
        let m0 = h.data()[0].norm();
        assert!(h.data().iter().all(|z| (z.norm() - m0).abs() < 1e-12));
        let hd = to_angular_delay(&h);
        assert!((hd.get(0, 0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = GeneratorParams::default();
        let a = generate_channel(&p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = generate_channel(&p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn energy_concentrates_in_kept_rows() {
        let p = GeneratorParams::default();
        for seed in 0..100 {
            let h = generate_channel(&p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let hd = to_angular_delay(&h);
            let kept = truncate(&hd, p.n_cc).unwrap().energy();
            assert!(kept / hd.energy() >= 0.99, "seed {seed}: {}", kept / hd.energy());
        }
    }

    #[test]
    fn delay_center_outside_kept_rows_rejected() {
        let mut p = delta_params();
        p.clusters[0].delay = 32.0;
        assert!(matches!(p.validate(), Err(Error::Parameter(_))));
        let q = GeneratorParams {
            max_delay: 40.0,
            ..GeneratorParams::default()
        };
        assert!(matches!(generate_channel(&q, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let p = GeneratorParams {
            n_t: 24,
            ..GeneratorParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn truncate_cases() {
        let hd = CMatrix::from_fn(1024, 32, |r, c| Complex64::new(r as f64, c as f64));
        let t = truncate(&hd, 32).unwrap();
        assert_eq!((t.rows(), t.cols()), (32, 32));
        assert_eq!(t.get(31, 5), hd.get(31, 5));
        assert!(t.energy() <= hd.energy());
        assert_eq!(truncate(&hd, 1024).unwrap(), hd);
        assert!(truncate(&hd, 0).is_err());
        assert!(truncate(&hd, 1025).is_err());
    }

    fn random_hs(seed: u64) -> CMatrix {
        let (hs, _) = synthesize_pair(&GeneratorParams::default(), 10.0, seed, 0).unwrap();
        hs
    }

    #[test]
    fn vanishing_noise_at_high_cnr() {
        let hs = random_hs(1);
        let noisy = add_noise(&hs, 300.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let peak = hs.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in noisy.data().iter().zip(hs.data()) {
            assert!((a - b).norm() < 1e-10 * peak);
        }
    }

    #[test]
    fn unit_cnr_noise_power() {
        let mut noise = 0.0;
        let mut signal = 0.0;
        for i in 0..10 {
            let hs = random_hs(100 + i);
            let noisy = add_noise(&hs, 0.0, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
            signal += hs.energy();
            noise += noisy.data().iter().zip(hs.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
        let ratio = noise / signal;
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn noise_is_deterministic() {
        let hs = random_hs(3);
        let a = add_noise(&hs, 5.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_noise(&hs, 5.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_channel_is_degenerate() {
        let z = CMatrix::zeros(4, 4);
        assert!(matches!(
            add_noise(&z, 10.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::DegenerateSample(_))
        ));
        assert!(matches!(normalize_and_split(&z, &z), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn empirical_cnr_is_calibrated() {
        let p = GeneratorParams::default();
        for cnr in [0.0, 10.0, 25.0] {
            let ratios: f64 = (0..100)
                .map(|i| {
                    let (hs, noisy) = synthesize_pair(&p, cnr, 5, i).unwrap();
                    let e: f64 = noisy.data().iter().zip(hs.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
                    hs.energy() / e
                })
                .sum::<f64>()
                / 100.0;
            let db = 10.0 * ratios.log10();
            assert!((db - cnr).abs() <= 0.5, "{cnr}: {db}");
        }
    }

    #[test]
    fn normalization_by_four() {
        let noisy = CMatrix::from_fn(2, 2, |r, c| Complex64::new(r as f64 - 4.0 * c as f64, 1.0));
        let clean = CMatrix::from_fn(2, 2, |r, _| Complex64::new(r as f64, 0.5));
        let s = normalize_and_split(&noisy, &clean).unwrap();
        assert_eq!(s.scale, 4.0);
        assert!(s.input.data().iter().all(|v| v.abs() <= 1.0));
        assert!(s.input.data().iter().any(|v| v.abs() == 1.0));
        assert_eq!(denormalize(&s.input, s.scale).unwrap(), noisy);
        assert_eq!(denormalize(&s.label, s.scale).unwrap(), clean);
    }

    #[test]
    fn noiseless_input_equals_label() {
        let hs = random_hs(4);
        let s = normalize_and_split(&hs, &hs).unwrap();
        assert_eq!(s.input, s.label);
        assert_eq!(s.input.shape(), &[2, 32, 32]);
    }

    #[test]
    fn denormalization_recovers_observation() {
        let (_, noisy) = synthesize_pair(&GeneratorParams::default(), 10.0, 6, 0).unwrap();
        let s = normalize_and_split(&noisy, &noisy).unwrap();
        let back = denormalize(&s.input, s.scale).unwrap();
        for (a, b) in back.data().iter().zip(noisy.data()) {
            assert!((a - b).norm() <= 1e-7 * s.scale as f64);
        }
        assert!(s.input.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dataset_is_independent_of_thread_count() {
        let p = GeneratorParams::default();
        let a = generate_dataset(&p, 10.0, 8, 77).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_dataset(&p, 10.0, 8, 77)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples[3], synthesize_sample(&p, 10.0, 77, 3).unwrap());
    }
}
