use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{analyze_frame, bootstrap_detection_se, fit_detection_histogram, AnalysisConfig, Localization};
use crate::camera::{bias_correct, render_frame, BiasMethod, CameraParams, Frame, TruthAtom};
use crate::error::{Error, Result};
use crate::montecarlo::{fluorescence_walk, integrate_trajectory, sample_atoms, AtomSample, EmissionEvent, ImagingParams, ThermalSource};
use crate::optics::{DipoleTrap, Potential};
use crate::rng::{child_seed, domain, stream};

/// Free-space imaging experiment: release, short time of flight, then
/// fluorescence in the light sheet.
#[derive(Clone, Debug)]
pub struct ImagingScanSetup {
    pub source: ThermalSource,
    /// `duration` is replaced by each scanned time.
    pub imaging: ImagingParams,
    pub lightsheet: Option<DipoleTrap>,
    pub camera: CameraParams,
    /// s.
    pub time_of_flight: f64,
    /// Integration step for the time of flight, s.
    pub dt: f64,
    /// Probability that a shot holds an atom.
    pub occupancy: f64,
    /// Bootstrap resamples for the fidelity error (0 disables).
    pub bootstrap_resamples: usize,
}

/// One simulated exposure.
#[derive(Clone, Debug)]
pub struct Shot {
    pub frame: Frame,
    /// Atom at the start of the exposure, if the shot was loaded. The frame
    /// truth holds the mean position over the exposure.
    pub atom: Option<AtomSample>,
    /// Collected photon positions relative to `atom`'s start position, m.
    pub photon_offsets: Vec<[f64; 2]>,
}

impl ImagingScanSetup {
    fn fields(&self) -> Vec<&dyn Potential> {
        self.lightsheet.iter().map(|t| t as &dyn Potential).collect()
    }

    /// Shot `index` with exposure `duration`. Shots with equal `(seed,
    /// index)` share atom, occupancy and camera noise across durations.
    pub fn shot(&self, atom: &AtomSample, duration: f64, seed: u64, index: u64) -> Result<Shot> {
        let loaded = stream(seed, domain::SHOT_OCCUPANCY, index).random::<f64>() < self.occupancy;
        let camera_seed = child_seed(seed, index);
        if !loaded {
            let frame = render_frame(&[], &self.camera, camera_seed)?;
            return Ok(Shot { frame, atom: None, photon_offsets: Vec::new() });
        }
        let fields = self.fields();
        let start = integrate_trajectory(atom, &fields, self.time_of_flight, self.dt)?;
        let imaging = ImagingParams { duration, ..self.imaging.clone() };
        let mut rng = stream(seed, domain::FLUORESCENCE, index);
        let walk = fluorescence_walk(&start, &imaging, &fields, &mut rng)?;
        let mut frame = render_frame(&walk.events, &self.camera, camera_seed)?;
        frame.truth = vec![TruthAtom { position: mean_position(&walk.events).unwrap_or([start.position.x, start.position.y]), m_f: start.m_f }];
        let photon_offsets = walk
            .collected()
            .map(|e| [e.position[0] - start.position.x, e.position[1] - start.position.y])
            .collect();
        Ok(Shot { frame, atom: Some(start), photon_offsets })
    }
}

/// Mean atom position over all scattering events: the position a frame of
/// the exposure reports.
fn mean_position(events: &[EmissionEvent]) -> Option<[f64; 2]> {
    let n = events.len() as f64;
    (!events.is_empty()).then(|| {
        let (x, y) = events.iter().fold((0.0, 0.0), |(x, y), e| (x + e.position[0], y + e.position[1]));
        [x / n, y / n]
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    /// Exposure, s.
    pub time: f64,
    pub infidelity: f64,
    /// Bootstrap standard error (NaN when not computed).
    pub infidelity_se: f64,
    /// Spread of the aggregate collected-photon cloud, m.
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub threshold: f64,
    /// Fraction of shots whose thresholded label matches the truth.
    pub label_accuracy: f64,
    /// Per-axis RMS error between localized positions and the mean atom
    /// position during the exposure, over loaded, detected shots, m.
    pub localization_rms: f64,
    pub shots: usize,
    pub loaded: usize,
    /// Why the histogram fit failed; fit-derived columns are then NaN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

pub const SCAN_CSV_HEADER: &str =
    "t_s,infidelity,infidelity_se,sigma_major_m,sigma_minor_m,threshold,label_accuracy,localization_rms_m,shots,loaded";

impl ScanRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.time,
            self.infidelity,
            self.infidelity_se,
            self.sigma_major,
            self.sigma_minor,
            self.threshold,
            self.label_accuracy,
            self.localization_rms,
            self.shots,
            self.loaded
        )
    }
}

/// Per-shot analysis result kept for aggregation.
/// Per-shot inputs to one scan row.
#[derive(Clone, Debug)]
pub struct ShotResult {
    pub loc: Localization,
    /// Mean true position of a loaded shot.
    pub truth: Option<[f64; 2]>,
    /// Collected photon offsets from the exposure-start position.
    pub photons: Vec<[f64; 2]>,
}

impl ShotResult {
    pub fn from_frame(frame: &Frame, photons: Vec<[f64; 2]>, cfg: &AnalysisConfig) -> Result<Self> {
        let corrected = bias_correct(frame, BiasMethod::Recorded)?;
        Ok(ShotResult { loc: analyze_frame(&corrected, cfg)?, truth: frame.truth.first().map(|t| t.position), photons })
    }
}

/// Called with `(time, shot index, shot)` for every simulated exposure.
pub type ShotSink<'a> = &'a (dyn Fn(f64, u64, &Shot) -> Result<()> + Sync);

/// Principal standard deviations of a 2-D point cloud (major first).
pub fn principal_sigmas(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    if points.len() < 2 {
        return [f64::NAN; 2];
    }
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = Vector2::new(p[0] - mx, p[1] - my);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = cov.symmetric_eigenvalues();
    let (a, b) = (eig[0].max(eig[1]), eig[0].min(eig[1]));
    [a.max(0.0).sqrt(), b.max(0.0).sqrt()]
}

/// Detection infidelity and photon-cloud size versus exposure time.
///
/// Every time point reuses the same atoms, occupancy draws and camera noise
/// (common random numbers), so differences between points reflect the
/// exposure alone.
pub fn imaging_time_scan(
    times: &[f64],
    shots_per_time: usize,
    setup: &ImagingScanSetup,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<Vec<ScanRow>> {
    imaging_time_scan_with(times, shots_per_time, setup, cfg, seed, None)
}

/// As [`imaging_time_scan`], handing every shot to `sink` as well.
pub fn imaging_time_scan_with(
    times: &[f64],
    shots_per_time: usize,
    setup: &ImagingScanSetup,
    cfg: &AnalysisConfig,
    seed: u64,
    sink: Option<ShotSink>,
) -> Result<Vec<ScanRow>> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::invalid("scan times must be positive"));
    }
    if !(0.0..=1.0).contains(&setup.occupancy) {
        return Err(Error::invalid("occupancy must lie in [0, 1]"));
    }
    let atoms = sample_atoms(&setup.source, shots_per_time, seed)?;
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let results: Vec<ShotResult> = atoms
            .par_iter()
            .enumerate()
            .map(|(i, atom)| {
                let shot = setup.shot(atom, t, seed, i as u64)?;
                if let Some(sink) = sink {
                    sink(t, i as u64, &shot)?;
                }
                ShotResult::from_frame(&shot.frame, shot.photon_offsets, cfg)
            })
            .collect::<Result<_>>()?;
        rows.push(summarize(t, &results, setup.bootstrap_resamples, cfg, seed)?);
    }
    Ok(rows)
}

/// One scan row from the analysed shots of exposure `t`.
pub fn summarize(t: f64, results: &[ShotResult], bootstrap_resamples: usize, cfg: &AnalysisConfig, seed: u64) -> Result<ScanRow> {
    let peaks: Vec<f64> = results.iter().map(|r| r.loc.peak_value).collect();
    let photons: Vec<[f64; 2]> = results.iter().flat_map(|r| r.photons.iter().copied()).collect();
    let [sigma_major, sigma_minor] = principal_sigmas(&photons);
    let loaded = results.iter().filter(|r| r.truth.is_some()).count();
    let fit = match fit_detection_histogram(&peaks, cfg) {
        Ok(fit) => fit,
        Err(Error::Fit(msg)) => {
            return Ok(ScanRow {
                time: t,
                infidelity: f64::NAN,
                infidelity_se: f64::NAN,
                sigma_major,
                sigma_minor,
                threshold: f64::NAN,
                label_accuracy: f64::NAN,
                localization_rms: f64::NAN,
                shots: results.len(),
                loaded,
                fit_error: Some(msg),
            })
        }
        Err(e) => return Err(e),
    };
    let se = if bootstrap_resamples > 0 {
        bootstrap_detection_se(&peaks, cfg, bootstrap_resamples, child_seed(seed, t.to_bits()))?
    } else {
        f64::NAN
    };
    let correct = results.iter().filter(|r| fit.is_atom(r.loc.peak_value) == r.truth.is_some()).count();
    let errs: Vec<f64> = results
        .iter()
        .filter(|r| fit.is_atom(r.loc.peak_value))
        .filter_map(|r| r.truth.map(|p| (r.loc.position[0] - p[0]).powi(2) + (r.loc.position[1] - p[1]).powi(2)))
        .collect();
    Ok(ScanRow {
        time: t,
        infidelity: 1.0 - fit.fidelity,
        infidelity_se: se,
        sigma_major,
        sigma_minor,
        threshold: fit.threshold,
        label_accuracy: correct as f64 / results.len() as f64,
        localization_rms: (errs.iter().sum::<f64>() / (2 * errs.len()).max(1) as f64).sqrt(),
        shots: results.len(),
        loaded,
        fit_error: None,
    })
}

/// Power-law exponents of `σ_major(t)` and `σ_minor(t)` by log-log least
/// squares.
pub fn spot_growth_exponent(rows: &[ScanRow]) -> [f64; 2] {
    let slope = |ys: Vec<f64>| {
        let xs: Vec<f64> = rows.iter().map(|r| r.time.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    };
    [
        slope(rows.iter().map(|r| r.sigma_major.ln()).collect()),
        slope(rows.iter().map(|r| r.sigma_minor.ln()).collect()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_sigmas_of_axis_aligned_cloud() {
        let pts: Vec<[f64; 2]> = (0..4)
            .flat_map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [[3.0 * s, 0.0], [0.0, s]]
            })
            .collect();
        let [a, b] = principal_sigmas(&pts);
        assert!(a > b);
        let n = pts.len() as f64;
        assert!((a - (4.0 * 9.0 / (n - 1.0)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exponent_of_exact_power_law() {
        let rows: Vec<ScanRow> = [5e-6, 10e-6, 20e-6]
            .iter()
            .map(|&t| ScanRow {
                time: t,
                infidelity: 0.0,
                infidelity_se: f64::NAN,
                sigma_major: 2.0 * t.powf(1.5),
                sigma_minor: t.powf(1.5),
                threshold: 0.0,
                label_accuracy: 1.0,
                localization_rms: 0.0,
                shots: 1,
                loaded: 1,
                fit_error: None,
            })
            .collect();
        let [a, b] = spot_growth_exponent(&rows);
        assert!((a - 1.5).abs() < 1e-12 && (b - 1.5).abs() < 1e-12);
    }
}
