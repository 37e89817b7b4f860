use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{sample_atoms, ThermalSource};
use crate::constants::{SR87_MASS, STANDARD_GRAVITY};
use crate::error::{Error, Result};
use crate::optics::{DipoleTrap, Potential};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecapturePoint {
    /// Hold time with the trap off, s.
    pub time: f64,
    pub probability: f64,
    /// Binomial standard error.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct RecaptureSetup {
    /// Trap that is switched off and on again.
    pub trap: DipoleTrap,
    pub gravity: bool,
}

/// Simulated release-recapture curve.
///
/// The same atoms are used at every hold time. After ballistic flight an
/// atom counts as recaptured iff its kinetic plus trap energy is negative.
pub fn release_recapture(
    source: &ThermalSource,
    setup: &RecaptureSetup,
    hold_times: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RecapturePoint>> {
    if hold_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("hold times must be finite and non-negative"));
    }
    let atoms = sample_atoms(source, n, seed)?;
    let g = if setup.gravity { STANDARD_GRAVITY } else { 0.0 };
    let mass = SR87_MASS;
    Ok(hold_times
        .iter()
        .map(|&t| {
            let drop = Vector3::new(0.0, 0.0, -g);
            let caught = atoms
                .iter()
                .filter(|a| {
                    let r = a.position + a.velocity * t + drop * (0.5 * t * t);
                    let v = a.velocity + drop * t;
                    0.5 * mass * v.norm_squared() + setup.trap.energy(&r, a.m_f) < 0.0
                })
                .count();
            let p = caught as f64 / n as f64;
            RecapturePoint { time: t, probability: p, error: (p * (1.0 - p) / n as f64).sqrt() }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    /// K.
    pub temperature: f64,
    pub chi2: f64,
    pub evaluations: usize,
}

/// Least-squares temperature from a measured recapture curve.
///
/// Model curves reuse one seed for every trial temperature (common random
/// numbers), which keeps χ²(T) smooth enough for a golden-section search on
/// `[t_lo, t_hi]`.
pub fn fit_temperature(
    measured: &[RecapturePoint],
    source: &ThermalSource,
    setup: &RecaptureSetup,
    n: usize,
    seed: u64,
    bounds: (f64, f64),
) -> Result<TemperatureFit> {
    if measured.len() < 2 {
        return Err(Error::Fit("need at least two hold times".into()));
    }
    let times: Vec<f64> = measured.iter().map(|p| p.time).collect();
    let mut evaluations = 0;
    let mut chi2 = |temp: f64| -> Result<f64> {
        evaluations += 1;
        let mut src = source.clone();
        src.temperature = temp;
        let model = release_recapture(&src, setup, &times, n, seed)?;
        Ok(measured
            .iter()
            .zip(&model)
            .map(|(m, p)| {
                let var = m.error.powi(2) + p.error.powi(2) + 1.0 / (n as f64).powi(2);
                (m.probability - p.probability).powi(2) / var
            })
            .sum())
    };

    let (mut a, mut b) = bounds;
    if !(a > 0.0 && b > a) {
        return Err(Error::invalid("temperature bounds must satisfy 0 < lo < hi"));
    }
    // coarse scan first: χ² from a finite ensemble is only piecewise smooth
    let grid = 24;
    let mut best = (f64::INFINITY, a);
    for k in 0..=grid {
        let t = a * (b / a).powf(k as f64 / grid as f64);
        let c = chi2(t)?;
        if c < best.0 {
            best = (c, t);
        }
    }
    let ratio = (b / a).powf(1.0 / grid as f64);
    a = (best.1 / ratio).max(a);
    b = (best.1 * ratio).min(b);

    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = chi2(x1)?;
    let mut f2 = chi2(x2)?;
    while (b - a) > 1e-4 * best.1 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = chi2(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = chi2(x2)?;
        }
    }
    let (temperature, chi) = if f1 < f2 { (x1, f1) } else { (x2, f2) };
    let (temperature, chi) = if best.0 < chi { (best.1, best.0) } else { (temperature, chi) };
    Ok(TemperatureFit { temperature, chi2: chi, evaluations })
}
