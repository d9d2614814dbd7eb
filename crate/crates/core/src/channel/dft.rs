use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::CMatrix;

/// Unitary 1-D transform of every row (`axis = 1`) or column (`axis = 0`).
fn transform_axis(m: &mut CMatrix, axis: usize, direction: FftDirection) {
    let (rows, cols) = (m.rows(), m.cols());
    let n = if axis == 0 { rows } else { cols };
    let fft = FftPlanner::<f64>::new().plan_fft(n, direction);
    let scale = 1.0 / (n as f64).sqrt();
    if axis == 1 {
        fft.process(m.data_mut());
        m.data_mut().iter_mut().for_each(|v| *v *= scale);
        return;
    }
    let mut buf = vec![Complex64::default(); rows];
    for c in 0..cols {
        for (r, b) in buf.iter_mut().enumerate() {
            *b = m.data()[r * cols + c];
        }
        fft.process(&mut buf);
        for (r, b) in buf.iter().enumerate() {
            m.data_mut()[r * cols + c] = b * scale;
        }
    }
}

/// `H_d = F_c H F_t^H` with unitary DFT matrices: a forward transform along
/// the subcarrier axis and an inverse one along the antenna axis.
pub fn to_angular_delay(h: &CMatrix) -> CMatrix {
    let mut out = h.clone();
    transform_axis(&mut out, 0, FftDirection::Forward);
    transform_axis(&mut out, 1, FftDirection::Inverse);
    out
}

/// Inverse of [`to_angular_delay`]: `H = F_c^H H_d F_t`.
pub fn from_angular_delay(hd: &CMatrix) -> CMatrix {
    let mut out = hd.clone();
    transform_axis(&mut out, 0, FftDirection::Inverse);
    transform_axis(&mut out, 1, FftDirection::Forward);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    /// Explicit matrix products with the DFT matrices.
    fn oracle(h: &CMatrix) -> CMatrix {
        let (nc, nt) = (h.rows(), h.cols());
        let f = |n: usize, a: usize, b: usize| Complex64::from_polar(1.0 / (n as f64).sqrt(), -2.0 * PI * (a * b) as f64 / n as f64);
        let fh = CMatrix::from_fn(nc, nt, |r, c| (0..nc).map(|k| f(nc, r, k) * h.get(k, c)).sum());
        CMatrix::from_fn(nc, nt, |r, c| (0..nt).map(|k| fh.get(r, k) * f(nt, c, k).conj()).sum())
    }

    #[test]
    fn matches_matrix_definition() {
        let h = random(16, 8, 1);
        let a = to_angular_delay(&h);
        let b = oracle(&h);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_maps_to_single_entry() {
        let h = CMatrix::from_fn(64, 32, |_, _| Complex64::new(1.0, 0.0));
        let hd = to_angular_delay(&h);
        assert!((hd.get(0, 0).norm_sqr() - h.energy()).abs() < 1e-9);
        let rest = hd.energy() - hd.get(0, 0).norm_sqr();
        assert!(rest.abs() < 1e-9 * h.energy());
    }

    #[test]
    fn unitary_round_trip() {
        let h = random(256, 32, 2);
        let hd = to_angular_delay(&h);
        assert!((hd.energy() / h.energy() - 1.0).abs() < 1e-5);
        let back = from_angular_delay(&hd);
        let err: f64 = back.data().iter().zip(h.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!((err / h.energy()).sqrt() < 1e-5);
    }
}
