//! Independent reference computations shared by integration tests.
#![allow(dead_code)]

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// KL(N(m, e^lv) || N(0, 1)) by composite Simpson integration of q log(q/p).
pub fn kl_by_integration(m: f64, lv: f64) -> f64 {
    let s = (0.5 * lv).exp();
    let (lo, hi, n) = (m - 14.0 * s, m + 14.0 * s, 40_000usize);
    let h = (hi - lo) / n as f64;
    let ln_q = |z: f64| -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let ln_p = |z: f64| -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |z: f64| ln_q(z).exp() * (ln_q(z) - ln_p(z));
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let z = lo + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    acc * h / 3.0
}

/// Monte-Carlo estimate of KL(N(m, 1) || N(0, 1)) from `n` draws; returns (estimate, standard error).
pub fn kl_monte_carlo_unit_var(m: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(m, 1.0).unwrap();
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            // log q(z) - log p(z)
            -0.5 * (z - m).powi(2) + 0.5 * z * z
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Eq.-5-style loss by explicit enumeration over (image, channel, x, y).
pub fn layer_loss_by_enumeration(a: &[f64], b: &[f64], n: usize, c: usize, w: usize, h: usize) -> f64 {
    let mut per_image = vec![0.0; n];
    for (i, slot) in per_image.iter_mut().enumerate() {
        for ch in 0..c {
            for x in 0..w {
                for y in 0..h {
                    let k = ((i * c + ch) * w + x) * h + y;
                    *slot += (a[k] - b[k]).powi(2);
                }
            }
        }
        *slot /= (2 * c * w * h) as f64;
    }
    per_image.iter().sum::<f64>() / n as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &ArrayD<f64>, h: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut g = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// ||a - b|| / max(||a||, ||b||, tiny).
pub fn relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let norm = |v: &ArrayD<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a - b;
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

pub fn random_array(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-scale..scale))
}

/// Inception-style score straight from its definition.
pub fn inception_by_definition(rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let n = rows.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut kl = 0.0;
    for r in rows {
        for j in 0..k {
            if r[j] > 0.0 {
                kl += r[j] * (r[j] / marginal[j]).ln();
            }
        }
    }
    (kl / n).exp()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
