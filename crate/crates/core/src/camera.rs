//! EMCCD frame synthesis in the photon-counting regime.
//!
//! Per pixel, photoelectrons (signal plus clock-induced charge) pass through
//! the electron-multiplying register, modelled as `Gamma(shape = n, scale = g)`,
//! then Gaussian readout noise and a bias offset are added.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montecarlo::EmissionEvent;
use crate::rng::{domain, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraParams {
    /// Gaussian readout noise, counts.
    pub readout_sigma: f64,
    /// EM gain divided by readout noise.
    pub gain_over_readout: f64,
    /// Clock-induced charge probability per pixel and frame.
    pub cic_rate: f64,
    /// counts.
    pub bias: f64,
    /// m.
    pub pixel_pitch: f64,
    pub magnification: f64,
    pub quantum_efficiency: f64,
    /// Point-spread σ in the object plane, m.
    pub psf_sigma: f64,
    /// (rows, cols). Rows run along object-plane y, columns along x.
    pub frame_shape: [usize; 2],
    /// Object-plane position imaged onto the frame centre, m.
    pub center: [f64; 2],
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            readout_sigma: 30.0,
            gain_over_readout: 35.0,
            cic_rate: 0.02,
            bias: 500.0,
            pixel_pitch: 16e-6,
            magnification: 47.8,
            quantum_efficiency: 0.8,
            psf_sigma: 0.21 * 461e-9 / 0.55,
            frame_shape: [64, 64],
            center: [0.0, 0.0],
        }
    }
}

impl CameraParams {
    /// EM gain `g`, counts per photoelectron.
    pub fn em_gain(&self) -> f64 {
        self.gain_over_readout * self.readout_sigma
    }

    /// Object-plane size of one pixel, m.
    pub fn object_pixel(&self) -> f64 {
        self.pixel_pitch / self.magnification
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.cic_rate, self.quantum_efficiency];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("cic_rate and quantum_efficiency must lie in [0, 1]"));
        }
        if !(self.readout_sigma >= 0.0 && self.gain_over_readout > 0.0) {
            return Err(Error::invalid("readout_sigma must be ≥ 0 and gain_over_readout > 0"));
        }
        if !(self.pixel_pitch > 0.0 && self.magnification > 0.0 && self.psf_sigma >= 0.0) {
            return Err(Error::invalid("pixel pitch, magnification must be positive"));
        }
        if self.frame_shape.contains(&0) {
            return Err(Error::invalid("frame shape must be non-empty"));
        }
        Ok(())
    }

    /// Non-fatal configuration remarks (sampling of the PSF).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.object_pixel() > 2.0 * self.psf_sigma {
            out.push(format!(
                "object-plane pixel {:.0} nm undersamples the PSF (σ = {:.0} nm)",
                self.object_pixel() * 1e9,
                self.psf_sigma * 1e9
            ));
        }
        out
    }

    /// Fractional (row, col) pixel coordinate of an object-plane point.
    pub fn to_pixel(&self, xy: [f64; 2]) -> (f64, f64) {
        let s = self.object_pixel();
        let row = self.frame_shape[0] as f64 / 2.0 + (xy[1] - self.center[1]) / s;
        let col = self.frame_shape[1] as f64 / 2.0 + (xy[0] - self.center[0]) / s;
        (row, col)
    }

    /// Object-plane position of a fractional pixel coordinate (pixel centres
    /// sit at `index + 0.5`).
    pub fn to_object(&self, row: f64, col: f64) -> [f64; 2] {
        let s = self.object_pixel();
        [
            self.center[0] + (col - self.frame_shape[1] as f64 / 2.0) * s,
            self.center[1] + (row - self.frame_shape[0] as f64 / 2.0) * s,
        ]
    }
}

/// True object-plane atom location recorded with simulated frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthAtom {
    /// m.
    pub position: [f64; 2],
    pub m_f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMethod {
    Recorded,
    /// Sigma-clipped mean over this many rows at the top and bottom.
    Margin { rows: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// counts; integer valued until bias correction.
    pub counts: Array2<f64>,
    pub params: CameraParams,
    pub truth: Vec<TruthAtom>,
    /// Collected photons that fell outside the field of view.
    pub dropped_events: usize,
    /// Set once bias-corrected: the subtracted value and how it was found.
    pub bias_subtracted: Option<(f64, BiasMethod)>,
}

impl Frame {
    pub fn shape(&self) -> (usize, usize) {
        self.counts.dim()
    }
}

/// Renders one exposure from emission events.
pub fn render_frame(events: &[EmissionEvent], params: &CameraParams, seed: u64) -> Result<Frame> {
    params.validate()?;
    let mut rng = stream(seed, domain::CAMERA, 0);
    let [rows, cols] = params.frame_shape;
    let mut electrons = Array2::<u32>::zeros((rows, cols));
    let mut dropped = 0;
    for e in events.iter().filter(|e| e.collected) {
        if rng.random::<f64>() >= params.quantum_efficiency {
            continue;
        }
        let jx: f64 = StandardNormal.sample(&mut rng);
        let jy: f64 = StandardNormal.sample(&mut rng);
        let xy = [e.position[0] + params.psf_sigma * jx, e.position[1] + params.psf_sigma * jy];
        let (r, c) = params.to_pixel(xy);
        if r >= 0.0 && c >= 0.0 && (r as usize) < rows && (c as usize) < cols {
            electrons[(r as usize, c as usize)] += 1;
        } else {
            dropped += 1;
        }
    }
    let gain = params.em_gain();
    let noise = Normal::new(0.0, params.readout_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let counts = electrons.mapv(|n| {
        let total = n + u32::from(rng.random::<f64>() < params.cic_rate);
        let amplified = if total > 0 {
            Gamma::new(total as f64, gain).expect("positive shape and scale").sample(&mut rng)
        } else {
            0.0
        };
        let raw = amplified + noise.sample(&mut rng) + params.bias;
        raw.round().clamp(0.0, u16::MAX as f64)
    });
    Ok(Frame { counts, params: params.clone(), truth: Vec::new(), dropped_events: dropped, bias_subtracted: None })
}

/// Subtracts the camera bias.
///
/// `Recorded` uses `params.bias`; `Margin` estimates it from the top and
/// bottom rows with a 3σ-clipped mean, which rejects amplified CIC events.
/// A frame that is already corrected is returned unchanged.
pub fn bias_correct(frame: &Frame, method: BiasMethod) -> Result<Frame> {
    if frame.bias_subtracted.is_some() {
        return Ok(frame.clone());
    }
    let bias = match method {
        BiasMethod::Recorded => frame.params.bias,
        BiasMethod::Margin { rows } => estimate_margin_bias(frame, rows)?,
    };
    let mut out = frame.clone();
    out.counts.mapv_inplace(|c| c - bias);
    out.bias_subtracted = Some((bias, method));
    Ok(out)
}

fn estimate_margin_bias(frame: &Frame, rows: usize) -> Result<f64> {
    let (nr, _) = frame.shape();
    if rows == 0 || 2 * rows > nr {
        return Err(Error::invalid(format!("margin of {rows} rows does not fit a frame with {nr} rows")));
    }
    let mut vals: Vec<f64> = Vec::new();
    for r in (0..rows).chain(nr - rows..nr) {
        vals.extend(frame.counts.row(r).iter().copied());
    }
    vals.sort_by(f64::total_cmp);
    let mut center = vals[vals.len() / 2];
    let sigma = if frame.params.readout_sigma > 0.0 { frame.params.readout_sigma } else { 1.0 };
    for _ in 0..20 {
        let kept: Vec<f64> = vals.iter().copied().filter(|v| (v - center).abs() < 3.0 * sigma).collect();
        if kept.is_empty() {
            break;
        }
        let next = kept.iter().sum::<f64>() / kept.len() as f64;
        if (next - center).abs() < 1e-9 * sigma {
            center = next;
            break;
        }
        center = next;
    }
    Ok(center)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(x: f64, y: f64) -> EmissionEvent {
        EmissionEvent { time: 0.0, position: [x, y], collected: true }
    }

    #[test]
    fn noiseless_empty_frame_is_bias() {
        let params = CameraParams { cic_rate: 0.0, readout_sigma: 0.0, ..Default::default() };
        let f = render_frame(&[], &params, 1).unwrap();
        assert!(f.counts.iter().all(|&c| c == params.bias));
    }

    #[test]
    fn gamma_register_mean() {
        // n photoelectrons on one pixel, many frames: mean amplified signal n·g
        let params = CameraParams {
            cic_rate: 0.0,
            readout_sigma: 30.0,
            quantum_efficiency: 1.0,
            psf_sigma: 0.0,
            frame_shape: [1, 1],
            ..Default::default()
        };
        let n = 3;
        let evs: Vec<_> = (0..n).map(|_| event(0.0, 0.0)).collect();
        let draws = 100_000;
        let mut sum = 0.0;
        for s in 0..draws {
            let f = render_frame(&evs, &params, s).unwrap();
            sum += f.counts[(0, 0)] - params.bias;
        }
        let mean = sum / draws as f64;
        let expect = n as f64 * params.em_gain();
        assert!((mean / expect - 1.0).abs() < 0.01, "{mean} vs {expect}");
    }

    #[test]
    fn out_of_view_events_are_counted() {
        let params = CameraParams { quantum_efficiency: 1.0, ..Default::default() };
        let f = render_frame(&[event(1e-3, 0.0), event(0.0, 0.0)], &params, 3).unwrap();
        assert_eq!(f.dropped_events, 1);
    }

    #[test]
    fn bias_correction_recorded_and_idempotent() {
        let params = CameraParams::default();
        let f = render_frame(&[], &params, 4).unwrap();
        let once = bias_correct(&f, BiasMethod::Recorded).unwrap();
        let twice = bias_correct(&once, BiasMethod::Recorded).unwrap();
        assert_eq!(once, twice);
        let margin: Vec<f64> = once.counts.row(0).iter().chain(once.counts.row(63).iter()).copied().collect();
        // clip CIC before averaging the residual
        let kept: Vec<f64> = margin.into_iter().filter(|v| v.abs() < 3.0 * params.readout_sigma).collect();
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        assert!(mean.abs() < 0.1 * params.readout_sigma * 8.0 / (kept.len() as f64).sqrt() * 4.0 + 0.1 * params.readout_sigma);
    }

    #[test]
    fn margin_bias_estimate() {
        for cic in [0.0, 0.02] {
            let params = CameraParams { frame_shape: [512, 512], bias: 517.0, cic_rate: cic, ..Default::default() };
            let f = render_frame(&[], &params, 21).unwrap();
            let c = bias_correct(&f, BiasMethod::Margin { rows: 16 }).unwrap();
            let (b, _) = c.bias_subtracted.unwrap();
            assert!((b - 517.0).abs() < 0.05 * params.readout_sigma, "cic {cic}: {b}");
        }
        let small = render_frame(&[], &CameraParams::default(), 1).unwrap();
        assert!(bias_correct(&small, BiasMethod::Margin { rows: 40 }).is_err());
    }

    #[test]
    fn pixel_mapping_round_trip() {
        let p = CameraParams::default();
        let (r, c) = p.to_pixel([1.3e-6, -2.2e-6]);
        let back = p.to_object(r, c);
        assert!((back[0] - 1.3e-6).abs() < 1e-15 && (back[1] + 2.2e-6).abs() < 1e-15);
        assert!(p.warnings().is_empty());
        let coarse = CameraParams { magnification: 20.0, ..p };
        assert_eq!(coarse.warnings().len(), 1);
    }
}
