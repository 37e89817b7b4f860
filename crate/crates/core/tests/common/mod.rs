#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2, Vector3};
use osg_core::classifier::{assign, MixtureModel};
use osg_core::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;

fn factorial(n: i64) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Wigner small-d element `d^j_{m' m}(β)` from the explicit factorial sum.
pub fn wigner_d(j: f64, mp: f64, m: f64, beta: f64) -> f64 {
    let jpm = (j + m).round() as i64;
    let jmm = (j - m).round() as i64;
    let jpmp = (j + mp).round() as i64;
    let jmmp = (j - mp).round() as i64;
    let diff = (mp - m).round() as i64;
    let two_j = (2.0 * j).round() as i64;
    let pre = (factorial(jpm) * factorial(jmm) * factorial(jpmp) * factorial(jmmp)).sqrt();
    let (c, s) = ((beta / 2.0).cos(), (beta / 2.0).sin());
    let mut sum = 0.0;
    for k in 0..=two_j {
        let dens = [jpm - k, k, diff + k, jmmp - k];
        if dens.iter().any(|d| *d < 0) {
            continue;
        }
        let sign = if (diff + k).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let den: f64 = dens.iter().map(|d| factorial(*d)).product();
        sum += sign * pre / den * c.powi((two_j - diff - 2 * k) as i32) * s.powi((diff + 2 * k) as i32);
    }
    sum
}

/// Euler β of the rotation by `angle` about `axis`: the tilt of the rotated
/// z axis.
pub fn rotation_beta(axis: &Vector3<f64>, angle: f64) -> f64 {
    let n = axis.normalize();
    (angle.cos() + n.z * n.z * (1.0 - angle.cos())).clamp(-1.0, 1.0).acos()
}

/// Labelled draws from `model`, classified by [`assign`]; returns per-region
/// (false positives + misses) / weight.
pub fn brute_force_infidelity(model: &MixtureModel, n: usize, seed: u64) -> Vec<f64> {
    let k = model.k();
    let mut rng = stream(seed, 1001, 0);
    let chols: Vec<Matrix2<f64>> = model
        .covariances
        .iter()
        .map(|c| Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]).cholesky().unwrap().l())
        .collect();
    let mut wrong = vec![0usize; k];
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut j = 0;
        let mut acc = model.weights[0];
        while u > acc && j + 1 < k {
            j += 1;
            acc += model.weights[j];
        }
        let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let x = Vector2::from(model.means[j]) + chols[j] * z;
        let a = assign(model, [x.x, x.y]).unwrap();
        if a != j {
            wrong[a] += 1;
            wrong[j] += 1;
        }
    }
    (0..k).map(|r| wrong[r] as f64 / n as f64 / model.weights[r]).collect()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Probability that one photoelectron, amplified by an exponential register
/// of mean `g_over_sigma` readout σ and read out with unit Gaussian noise,
/// exceeds `k` σ.
pub fn single_electron_retention(k: f64, g_over_sigma: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::standard();
    let a = 1.0 / g_over_sigma;
    n.sf(k) + (-k * a + 0.5 * a * a).exp() * n.cdf(k - a)
}

/// Fraction of binarized pixels over `frames` empty frames.
pub fn binarized_fraction(params: &osg_core::camera::CameraParams, frames: u64, seed: u64) -> f64 {
    use osg_core::camera::{bias_correct, render_frame, BiasMethod};
    use osg_core::pipeline::{binarize, AnalysisConfig};
    let cfg = AnalysisConfig::default();
    let mut on = 0usize;
    let mut total = 0usize;
    for f in 0..frames {
        let frame = bias_correct(&render_frame(&[], params, seed + f).unwrap(), BiasMethod::Recorded).unwrap();
        let b = binarize(&frame, &cfg).unwrap();
        on += b.iter().filter(|v| **v == 1).count();
        total += b.len();
    }
    on as f64 / total as f64
}
