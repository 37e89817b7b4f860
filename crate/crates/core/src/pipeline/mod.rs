//! Image analysis: binarization, elliptical low-pass filtering, peak
//! localization and the two-peak detection histogram fit.

mod histogram;
mod scan;

pub use histogram::{bootstrap_detection_se, fit_detection_histogram, DetectionFit, SkewNormal};
pub use scan::{
    imaging_time_scan, imaging_time_scan_with, spot_growth_exponent, summarize, ImagingScanSetup, ScanRow, Shot, ShotResult, ShotSink,
    SCAN_CSV_HEADER,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraParams, Frame};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Binarization threshold in units of the readout noise.
    pub binarize_k: f64,
    /// (major, minor) kernel standard deviations, pixels.
    pub kernel_sigmas: [f64; 2],
    /// Angle of the kernel major axis from the column (x) axis, radians.
    pub kernel_angle: f64,
    pub histogram_bins: usize,
    /// Exclude a band of `ceil(σ_major)` pixels at the frame edge from the
    /// maximum search.
    pub exclude_border: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            binarize_k: 6.5,
            kernel_sigmas: [10.4, 8.0],
            kernel_angle: 0.0,
            histogram_bins: 40,
            exclude_border: true,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_k > 0.0) {
            return Err(Error::invalid("binarize_k must be positive"));
        }
        if !(self.kernel_sigmas.iter().all(|s| *s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("kernel sigmas must be positive"));
        }
        if self.histogram_bins < 10 {
            return Err(Error::invalid("histogram_bins must be at least 10"));
        }
        Ok(())
    }

    pub fn border(&self) -> usize {
        if self.exclude_border {
            self.kernel_sigmas[0].max(self.kernel_sigmas[1]).ceil() as usize
        } else {
            0
        }
    }
}

/// Pixel = 1 iff bias-corrected counts exceed `binarize_k·readout_sigma`.
pub fn binarize(frame: &Frame, cfg: &AnalysisConfig) -> Result<Array2<u8>> {
    cfg.validate()?;
    if frame.bias_subtracted.is_none() {
        return Err(Error::invalid("binarize expects a bias-corrected frame"));
    }
    let sigma = frame.params.readout_sigma;
    if !(sigma > 0.0) {
        return Err(Error::invalid("frame metadata lacks a positive readout_sigma"));
    }
    let level = cfg.binarize_k * sigma;
    Ok(frame.counts.mapv(|c| u8::from(c > level)))
}

/// Normalized elliptical Gaussian kernel truncated at 4σ. Returns the kernel
/// and the (row, col) offset of its centre.
pub fn kernel(cfg: &AnalysisConfig) -> (Array2<f64>, (usize, usize)) {
    let [s_major, s_minor] = cfg.kernel_sigmas;
    let (sin, cos) = cfg.kernel_angle.sin_cos();
    // extent of the rotated ellipse along rows (y) and columns (x)
    let half_x = (4.0 * (s_major * cos).hypot(s_minor * sin)).ceil() as usize;
    let half_y = (4.0 * (s_major * sin).hypot(s_minor * cos)).ceil() as usize;
    let mut k = Array2::zeros((2 * half_y + 1, 2 * half_x + 1));
    for ((r, c), v) in k.indexed_iter_mut() {
        let dy = r as f64 - half_y as f64;
        let dx = c as f64 - half_x as f64;
        let u = dx * cos + dy * sin;
        let w = -dx * sin + dy * cos;
        *v = (-0.5 * (u * u / (s_major * s_major) + w * w / (s_minor * s_minor))).exp();
    }
    let total = k.sum();
    k.mapv_inplace(|v| v / total);
    (k, (half_y, half_x))
}

/// Convolution of a binary image with the normalized kernel, zero padding.
///
/// Binarized frames are sparse, so each set pixel scatters one copy of the
/// kernel.
pub fn lowpass(binary: &Array2<u8>, cfg: &AnalysisConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (k, (hy, hx)) = kernel(cfg);
    let (rows, cols) = binary.dim();
    let mut out = Array2::zeros((rows, cols));
    for ((r, c), _) in binary.indexed_iter().filter(|(_, &b)| b != 0) {
        let r0 = r.saturating_sub(hy);
        let r1 = (r + hy + 1).min(rows);
        let c0 = c.saturating_sub(hx);
        let c1 = (c + hx + 1).min(cols);
        for rr in r0..r1 {
            let kr = rr + hy - r;
            for cc in c0..c1 {
                out[(rr, cc)] += k[(kr, cc + hx - c)];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// (row, col) of the maximum.
    pub pixel: [usize; 2],
    /// Object-plane position of the pixel centre, m.
    pub position: [f64; 2],
    pub peak_value: f64,
    pub is_atom: bool,
}

/// Global maximum of the filtered image outside the border band; ties go to
/// the lowest row-major index. `is_atom` is left false: it is set once a
/// detection threshold is known.
pub fn localize(filtered: &Array2<f64>, cfg: &AnalysisConfig, camera: &CameraParams) -> Result<Localization> {
    let (rows, cols) = filtered.dim();
    let b = cfg.border();
    if rows <= 2 * b || cols <= 2 * b {
        return Err(Error::invalid(format!(
            "frame {rows}×{cols} leaves no pixels inside the {b}-pixel border band"
        )));
    }
    let mut best = (b, b);
    for r in b..rows - b {
        for c in b..cols - b {
            if filtered[(r, c)] > filtered[best] {
                best = (r, c);
            }
        }
    }
    Ok(Localization {
        pixel: [best.0, best.1],
        position: camera.to_object(best.0 as f64 + 0.5, best.1 as f64 + 0.5),
        peak_value: filtered[best],
        is_atom: false,
    })
}

/// Binarize, filter and localize one bias-corrected frame.
pub fn analyze_frame(frame: &Frame, cfg: &AnalysisConfig) -> Result<Localization> {
    let binary = binarize(frame, cfg)?;
    let filtered = lowpass(&binary, cfg)?;
    localize(&filtered, cfg, &frame.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{bias_correct, render_frame, BiasMethod};

    fn no_border() -> AnalysisConfig {
        AnalysisConfig { exclude_border: false, ..Default::default() }
    }

    #[test]
    fn kernel_is_normalized_and_oriented() {
        let cfg = AnalysisConfig::default();
        let (k, (hy, hx)) = kernel(&cfg);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(hx > hy, "major axis should run along columns");
        let turned = AnalysisConfig { kernel_angle: std::f64::consts::FRAC_PI_2, ..cfg };
        let (_, (hy2, hx2)) = kernel(&turned);
        assert_eq!((hy2, hx2), (hx, hy));
    }

    #[test]
    fn single_pixel_reproduces_kernel() {
        let cfg = AnalysisConfig { kernel_sigmas: [3.0, 2.0], ..no_border() };
        let (k, (hy, hx)) = kernel(&cfg);
        let mut img = Array2::<u8>::zeros((41, 41));
        img[(20, 20)] = 1;
        let out = lowpass(&img, &cfg).unwrap();
        for ((r, c), v) in k.indexed_iter() {
            assert_eq!(out[(20 + r - hy, 20 + c - hx)], *v);
        }
        let loc = localize(&out, &cfg, &CameraParams::default()).unwrap();
        assert_eq!(loc.pixel, [20, 20]);
    }

    #[test]
    fn flat_input_gives_flat_interior() {
        let cfg = AnalysisConfig { kernel_sigmas: [3.0, 2.0], ..no_border() };
        let img = Array2::<u8>::ones((60, 60));
        let out = lowpass(&img, &cfg).unwrap();
        let (_, (hy, hx)) = kernel(&cfg);
        for r in hy..60 - hy {
            for c in hx..60 - hx {
                assert!((out[(r, c)] - 1.0).abs() < 1e-12);
            }
        }
        assert!(out[(0, 0)] < 0.5);
    }

    #[test]
    fn zero_frame_binarizes_to_zero_and_ties_pick_first() {
        let params = CameraParams { readout_sigma: 30.0, cic_rate: 0.0, ..Default::default() };
        let mut frame = render_frame(&[], &params, 0).unwrap();
        frame.counts.fill(params.bias);
        let frame = bias_correct(&frame, BiasMethod::Recorded).unwrap();
        let bin = binarize(&frame, &AnalysisConfig::default()).unwrap();
        assert!(bin.iter().all(|&b| b == 0));

        let mut img = Array2::<f64>::zeros((30, 30));
        img[(12, 20)] = 1.0;
        img[(17, 3)] = 1.0;
        let loc = localize(&img, &no_border(), &params).unwrap();
        assert_eq!(loc.pixel, [12, 20]);
    }

    #[test]
    fn binarize_requires_bias_correction_and_noise_metadata() {
        let params = CameraParams::default();
        let frame = render_frame(&[], &params, 0).unwrap();
        assert!(binarize(&frame, &AnalysisConfig::default()).is_err());
        let mut corrected = bias_correct(&frame, BiasMethod::Recorded).unwrap();
        corrected.params.readout_sigma = 0.0;
        assert!(binarize(&corrected, &AnalysisConfig::default()).is_err());
    }

    #[test]
    fn border_band_is_excluded() {
        let cfg = AnalysisConfig::default();
        let mut img = Array2::<f64>::zeros((64, 64));
        img[(2, 2)] = 5.0;
        img[(30, 30)] = 1.0;
        let loc = localize(&img, &cfg, &CameraParams::default()).unwrap();
        assert_eq!(loc.pixel, [30, 30]);
        let tiny = Array2::<f64>::zeros((20, 20));
        assert!(localize(&tiny, &cfg, &CameraParams::default()).is_err());
    }
}
