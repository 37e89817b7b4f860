//! Run configuration: one TOML document with a section per subsystem.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides. Every quantity is in SI units unless its name says otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraParams;
use crate::constants::{self, BOLTZMANN, SR87_MASS};
use crate::error::{Error, Result};
use crate::montecarlo::{
    EmissionPattern, ImagingParams, OsgSequence, RecaptureSetup, SamplingMode, SpinPreparation, ThermalSource,
    TrapModel,
};
use crate::optics::{DipoleTrap, GaussianBeam, OsgPotential, PolarizabilitySpec};
use crate::pipeline::{AnalysisConfig, ImagingScanSetup};
use crate::spin::FieldSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ImagingScan,
    OsgMap,
    Quench,
    ReleaseRecapture,
    Analyze,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::ImagingScan => "imaging-scan",
            Experiment::OsgMap => "osg-map",
            Experiment::Quench => "quench",
            Experiment::ReleaseRecapture => "release-recapture",
            Experiment::Analyze => "analyze",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub atoms: AtomsConfig,
    pub tweezer: TweezerConfig,
    pub lightsheet: LightSheetConfig,
    pub osg: OsgConfig,
    pub imaging: ImagingConfig,
    pub camera: CameraParams,
    pub analysis: AnalysisConfig,
    pub scan: ScanConfig,
    pub osg_map: OsgMapConfig,
    pub quench: QuenchConfig,
    pub recapture: RecaptureConfig,
    pub analyze: AnalyzeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtomsConfig {
    /// K.
    pub temperature: f64,
    pub sampling: SamplingMode,
    /// Spin state for the Stern-Gerlach map.
    pub preparation: SpinPreparation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TweezerConfig {
    /// m.
    pub waist: f64,
    /// m.
    pub wavelength: f64,
    /// Depth at release, K.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightSheetConfig {
    /// Waist across the sheet (z), m.
    pub waist_z: f64,
    /// In-plane waist (y), m.
    pub waist_y: f64,
    /// m.
    pub wavelength: f64,
    /// K.
    pub depth: f64,
    /// Keep the sheet on during free-space imaging.
    pub on_during_imaging: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OsgConfig {
    /// W.
    pub power: f64,
    /// m.
    pub waist: f64,
    /// Displacement of the beam centre from the tweezer along −y, m.
    pub offset: f64,
    /// m.
    pub wavelength: f64,
    /// Atomic units.
    pub alpha_scalar: f64,
    /// Atomic units.
    pub alpha_tensor: f64,
    /// s.
    pub pulse_time: f64,
    /// s.
    pub expansion_time: f64,
    /// s.
    pub dt_pulse: f64,
    /// s.
    pub dt_expansion: f64,
    /// Spontaneous scattering during the pulse, 1/s.
    pub scatter_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    /// Exposure for the Stern-Gerlach map, s.
    pub duration: f64,
    /// I/I_sat.
    pub saturation: f64,
    /// Γ, rad/s.
    pub linewidth: f64,
    /// m.
    pub wavelength: f64,
    pub beam_axis: [f64; 3],
    /// s.
    pub alternation_period: f64,
    pub alternation_start: f64,
    pub dark_branching: f64,
    pub numerical_aperture: f64,
    /// Optical transmission from the atoms to the camera.
    pub transmission: f64,
    pub emission_pattern: EmissionPattern,
    /// Free flight between release and the exposure (free-space imaging), s.
    pub time_of_flight: f64,
    /// s.
    pub dt: f64,
    /// Probability that a shot holds an atom.
    pub occupancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Exposures, s.
    pub times: Vec<f64>,
    pub shots_per_time: usize,
    pub bootstrap_resamples: usize,
    /// Write every frame (16-bit PNG + JSON sidecar) under `frames/`.
    pub save_frames: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OsgMapConfig {
    pub shots: usize,
    /// Mixture components (spin regions).
    pub components: usize,
    /// (rows, cols) of the camera frame; rows run along the separation axis.
    pub frame_shape: [usize; 2],
    /// Object-plane point imaged onto the frame centre, m.
    pub frame_center: [f64; 2],
    pub restarts: usize,
    pub bootstrap_resamples: usize,
    /// Monte-Carlo samples per fidelity evaluation (minimum).
    pub fidelity_samples: usize,
    /// Write every frame (16-bit PNG + JSON sidecar) under `frames/`.
    pub save_frames: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuenchConfig {
    /// G.
    pub b_guide: [f64; 3],
    /// G.
    pub amplitude: f64,
    pub axis: [f64; 3],
    /// s.
    pub rise_time: f64,
    pub detection_angle_deg: f64,
    /// Hz/G.
    pub g_factor: f64,
    /// Fraction prepared in m = +9/2 (the rest in +7/2).
    pub p_prep: f64,
    /// s.
    pub t_max: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecaptureConfig {
    /// s.
    pub hold_times: Vec<f64>,
    pub atoms: usize,
    pub gravity: bool,
    /// Fit the temperature back from the simulated curve.
    pub fit: bool,
    /// Temperature search interval for the fit, K.
    pub fit_bounds: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Directory of PNG frames with JSON sidecars.
    pub frames_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: Experiment::ImagingScan,
            seed: 1,
            atoms: AtomsConfig::default(),
            tweezer: TweezerConfig::default(),
            lightsheet: LightSheetConfig::default(),
            osg: OsgConfig::default(),
            imaging: ImagingConfig::default(),
            camera: CameraParams::default(),
            analysis: AnalysisConfig::default(),
            scan: ScanConfig::default(),
            osg_map: OsgMapConfig::default(),
            quench: QuenchConfig::default(),
            recapture: RecaptureConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl Default for AtomsConfig {
    fn default() -> Self {
        AtomsConfig {
            temperature: 750e-9,
            sampling: SamplingMode::ClassicalBoltzmann,
            preparation: SpinPreparation::Unpolarized,
        }
    }
}

impl Default for TweezerConfig {
    fn default() -> Self {
        TweezerConfig { waist: 1.35e-6, wavelength: 813e-9, depth: 3.7e-6 }
    }
}

impl Default for LightSheetConfig {
    fn default() -> Self {
        LightSheetConfig { waist_z: 20e-6, waist_y: 200e-6, wavelength: 1040e-9, depth: 60e-6, on_during_imaging: true }
    }
}

impl Default for OsgConfig {
    fn default() -> Self {
        OsgConfig {
            power: 2.8e-3,
            waist: 4.0e-6,
            offset: 2.0e-6,
            wavelength: 689e-9,
            alpha_scalar: 7.2e3,
            alpha_tensor: 42.5e3,
            pulse_time: 5e-6,
            expansion_time: 94e-6,
            dt_pulse: 10e-9,
            dt_expansion: 100e-9,
            scatter_rate: 0.0,
        }
    }
}

impl Default for ImagingConfig {
    fn default() -> Self {
        ImagingConfig {
            duration: 15e-6,
            saturation: 20.0,
            linewidth: constants::BLUE_LINEWIDTH,
            wavelength: constants::BLUE_WAVELENGTH,
            beam_axis: [1.0, 0.0, 0.0],
            alternation_period: 500e-9,
            alternation_start: 0.5,
            dark_branching: 1.0 / 20000.0,
            numerical_aperture: 0.55,
            transmission: 0.5,
            emission_pattern: EmissionPattern::Isotropic,
            time_of_flight: 5e-6,
            dt: 100e-9,
            occupancy: 0.5,
        }
    }
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            times: (0..9).map(|i| (9.0 + 2.0 * i as f64) * 1e-6).collect(),
            shots_per_time: 2000,
            bootstrap_resamples: 0,
            save_frames: false,
        }
    }
}

impl Default for OsgMapConfig {
    fn default() -> Self {
        OsgMapConfig {
            shots: 8000,
            components: 4,
            frame_shape: [112, 96],
            frame_center: [0.0, 5e-6],
            restarts: 10,
            bootstrap_resamples: 100,
            fidelity_samples: 1_000_000,
            save_frames: false,
        }
    }
}

impl Default for QuenchConfig {
    fn default() -> Self {
        let f = FieldSchedule::default();
        QuenchConfig {
            b_guide: f.b_guide,
            amplitude: f.b_quench_amplitude,
            axis: f.quench_axis,
            rise_time: f.rise_time_tau,
            detection_angle_deg: f.detection_axis_angle.to_degrees(),
            g_factor: f.g_factor,
            p_prep: 1.0,
            t_max: 0.5,
            points: 501,
        }
    }
}

impl Default for RecaptureConfig {
    fn default() -> Self {
        RecaptureConfig {
            hold_times: (0..=12).map(|i| i as f64 * 5e-6).collect(),
            atoms: 10_000,
            gravity: false,
            fit: true,
            fit_bounds: [100e-9, 5e-6],
        }
    }
}

/// Where a default comes from, shown by `describe-config`.
const SOURCES: &[(&str, &str)] = &[
    ("experiment", "experiment to run"),
    ("seed", "run seed; all random streams derive from it"),
    ("atoms.temperature", "reference experiment: release-recapture temperature 750(100) nK"),
    ("atoms.sampling", "assumption: classical thermal phase-space sampling"),
    ("atoms.preparation", "assumption: unpolarized spin mixture for the region map"),
    ("tweezer.waist", "reference experiment: tweezer waist 1.35(8) um"),
    ("tweezer.wavelength", "reference experiment: 813 nm tweezer"),
    ("tweezer.depth", "reference experiment: final tweezer depth kB x 3.7 uK"),
    ("lightsheet.waist_z", "reference experiment: light sheet waist 20 um along z"),
    ("lightsheet.waist_y", "reference experiment: light sheet waist 200 um along y"),
    ("lightsheet.wavelength", "reference experiment: 1040 nm light sheet"),
    ("lightsheet.depth", "reference experiment: maximal light sheet depth kB x 60 uK"),
    ("lightsheet.on_during_imaging", "assumption: the sheet confines the atoms while imaging"),
    ("osg.power", "reference experiment: Stern-Gerlach beam power 2.8 mW"),
    ("osg.waist", "reference experiment: Stern-Gerlach beam waist 4.0(2) um"),
    ("osg.offset", "reference experiment: beam centre displaced 2 um from the tweezer"),
    ("osg.wavelength", "reference experiment: intercombination line, 689 nm"),
    ("osg.alpha_scalar", "reference experiment: scalar polarizability 7.2e3 a.u."),
    ("osg.alpha_tensor", "reference experiment: tensor polarizability 42.5e3 a.u."),
    ("osg.pulse_time", "reference experiment: 5 us pulse"),
    ("osg.expansion_time", "reference experiment: 94 us in-plane expansion"),
    ("osg.dt_pulse", "numerical: integration step during the pulse"),
    ("osg.dt_expansion", "numerical: integration step during the expansion"),
    ("osg.scatter_rate", "assumption: spontaneous scattering during the pulse neglected"),
    ("imaging.duration", "reference experiment: 15 us exposure"),
    ("imaging.saturation", "reference experiment: beam intensity about 20 I_sat"),
    ("imaging.linewidth", "literature: 461 nm transition linewidth 2pi x 30.5 MHz"),
    ("imaging.wavelength", "reference experiment: 461 nm imaging transition"),
    ("imaging.beam_axis", "assumption: imaging beams along x"),
    ("imaging.alternation_period", "reference experiment: beams alternate every 500 ns"),
    ("imaging.alternation_start", "assumption: half-length first pulse, zero mean absorbed momentum"),
    ("imaging.dark_branching", "literature: dark-state branching 1:50000 to 1:20000, upper end"),
    ("imaging.numerical_aperture", "reference experiment: objective NA 0.55"),
    ("imaging.transmission", "assumption: optical transmission to the camera"),
    ("imaging.emission_pattern", "assumption: isotropic emission"),
    ("imaging.time_of_flight", "reference experiment: 5 us time of flight before free-space imaging"),
    ("imaging.dt", "numerical: integration step for the time of flight"),
    ("imaging.occupancy", "reference experiment: tweezer holds one atom with about 50% probability"),
    ("camera.readout_sigma", "assumption: absolute readout noise scale (cancels in the threshold)"),
    ("camera.gain_over_readout", "reference experiment: g / sigma_read = 35"),
    ("camera.cic_rate", "reference experiment: clock-induced charge 2% per pixel"),
    ("camera.bias", "assumption: camera bias"),
    ("camera.pixel_pitch", "assumption: 16 um EMCCD pixel"),
    ("camera.magnification", "reference experiment: total magnification 47.8"),
    ("camera.quantum_efficiency", "assumption: back-illuminated sensor QE"),
    ("camera.psf_sigma", "derived: diffraction-limited 0.21 lambda / NA"),
    ("camera.frame_shape", "assumption: 64 x 64 frame around the tweezer"),
    ("camera.center", "assumption: frame centred on the tweezer"),
    ("analysis.binarize_k", "reference experiment: single-photon threshold 6.5 sigma_read"),
    ("analysis.kernel_sigmas", "reference experiment: elliptical kernel sigmas 10.4 and 8 pixels"),
    ("analysis.kernel_angle", "assumption: kernel major axis along x"),
    ("analysis.histogram_bins", "assumption: about sqrt(shots) bins"),
    ("analysis.exclude_border", "assumption: kernel-wide border excluded from the peak search"),
    ("scan.times", "reference experiment: exposure scan range"),
    ("scan.shots_per_time", "assumption: shots per exposure"),
    ("scan.bootstrap_resamples", "assumption: fidelity bootstrap off by default"),
    ("scan.save_frames", "output: write frames for later analysis"),
    ("osg_map.shots", "assumption: about 4000 loaded shots at 50% occupancy"),
    ("osg_map.components", "reference experiment: four resolved spin regions"),
    ("osg_map.frame_shape", "assumption: frame covering the full separation"),
    ("osg_map.frame_center", "assumption: frame centred between the outermost regions"),
    ("osg_map.restarts", "assumption: EM restarts"),
    ("osg_map.bootstrap_resamples", "assumption: bootstrap resamples for fidelity errors"),
    ("osg_map.fidelity_samples", "numerical: Monte-Carlo samples per fidelity estimate"),
    ("osg_map.save_frames", "output: write frames for later analysis"),
    ("quench.b_guide", "reference experiment: 80 mG guide field along x"),
    ("quench.amplitude", "reference experiment: quench field 1.158 G"),
    ("quench.axis", "assumption: quench field transverse to the guide (z)"),
    ("quench.rise_time", "reference experiment: 1/e rise time 0.3 ms"),
    ("quench.detection_angle_deg", "reference experiment: detection basis tilted by 5 degrees"),
    ("quench.g_factor", "derived: nuclear moment -1.0936 nuclear magnetons, I = 9/2"),
    ("quench.p_prep", "assumption: perfect optical pumping"),
    ("quench.t_max", "assumption: hold times up to 500 ms"),
    ("quench.points", "assumption: hold-time samples"),
    ("recapture.hold_times", "assumption: release times"),
    ("recapture.atoms", "assumption: simulated atoms per curve"),
    ("recapture.gravity", "assumption: gravity negligible on 100 us scales"),
    ("recapture.fit", "assumption: self-consistent temperature fit"),
    ("recapture.fit_bounds", "assumption: temperature search interval"),
    ("analyze.frames_dir", "input: directory of stored frames"),
];

impl RunConfig {
    /// Parses a TOML document on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            path: "<file>".into(),
            msg: e.message().to_string(),
        })?;
        Self::from_table(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().message().to_string(),
            }
        })
    }

    /// Applies `section.key=value` overrides. Values are TOML literals; a
    /// bare word is taken as a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config { path: "<config>".into(), msg: e.to_string() })?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config {
                path: item.clone(),
                msg: "override must have the form key=value".into(),
            })?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            set_path(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    /// Checks every field; errors name the offending path.
    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(path, format!("must be positive and finite, got {v}")))
            }
        };
        let non_negative = |path: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(path, format!("must be non-negative and finite, got {v}")))
            }
        };
        let probability = |path: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(config_error(path, format!("must lie in [0, 1], got {v}")))
            }
        };
        if !matches!(self.atoms.sampling, SamplingMode::GroundStateWigner) {
            positive("atoms.temperature", self.atoms.temperature)?;
        }
        if let SpinPreparation::Populations(p) = &self.atoms.preparation {
            if p.iter().any(|v| !(*v >= 0.0)) || !(p.iter().sum::<f64>() > 0.0) {
                return Err(config_error("atoms.preparation", "populations must be non-negative, not all zero"));
            }
        }
        positive("tweezer.waist", self.tweezer.waist)?;
        positive("tweezer.wavelength", self.tweezer.wavelength)?;
        positive("tweezer.depth", self.tweezer.depth)?;
        positive("lightsheet.waist_z", self.lightsheet.waist_z)?;
        positive("lightsheet.waist_y", self.lightsheet.waist_y)?;
        positive("lightsheet.wavelength", self.lightsheet.wavelength)?;
        positive("lightsheet.depth", self.lightsheet.depth)?;
        non_negative("osg.power", self.osg.power)?;
        positive("osg.waist", self.osg.waist)?;
        non_negative("osg.offset", self.osg.offset.abs())?;
        positive("osg.wavelength", self.osg.wavelength)?;
        for (path, v) in [("osg.alpha_scalar", self.osg.alpha_scalar), ("osg.alpha_tensor", self.osg.alpha_tensor)] {
            if !v.is_finite() {
                return Err(config_error(path, "must be finite"));
            }
        }
        non_negative("osg.pulse_time", self.osg.pulse_time)?;
        non_negative("osg.expansion_time", self.osg.expansion_time)?;
        positive("osg.dt_pulse", self.osg.dt_pulse)?;
        positive("osg.dt_expansion", self.osg.dt_expansion)?;
        non_negative("osg.scatter_rate", self.osg.scatter_rate)?;
        let im = &self.imaging;
        positive("imaging.duration", im.duration)?;
        non_negative("imaging.saturation", im.saturation)?;
        positive("imaging.linewidth", im.linewidth)?;
        positive("imaging.wavelength", im.wavelength)?;
        if !(im.beam_axis.iter().all(|v| v.is_finite()) && im.beam_axis.iter().any(|v| *v != 0.0)) {
            return Err(config_error("imaging.beam_axis", "must be a finite non-zero vector"));
        }
        positive("imaging.alternation_period", im.alternation_period)?;
        if !(0.0..1.0).contains(&im.alternation_start) {
            return Err(config_error("imaging.alternation_start", "must lie in [0, 1)"));
        }
        probability("imaging.dark_branching", im.dark_branching)?;
        if !(im.numerical_aperture > 0.0 && im.numerical_aperture < 1.0) {
            return Err(config_error("imaging.numerical_aperture", "must lie in (0, 1)"));
        }
        probability("imaging.transmission", im.transmission)?;
        non_negative("imaging.time_of_flight", im.time_of_flight)?;
        positive("imaging.dt", im.dt)?;
        probability("imaging.occupancy", im.occupancy)?;
        self.camera.validate().map_err(|e| config_error("camera", e.to_string()))?;
        self.analysis.validate().map_err(|e| config_error("analysis", e.to_string()))?;
        if self.scan.times.is_empty() {
            return Err(config_error("scan.times", "must not be empty"));
        }
        for t in &self.scan.times {
            positive("scan.times", *t)?;
        }
        if self.scan.shots_per_time < 500 {
            return Err(config_error("scan.shots_per_time", "histogram fits need at least 500 shots"));
        }
        if self.scan.bootstrap_resamples != 0 && self.scan.bootstrap_resamples < 10 {
            return Err(config_error("scan.bootstrap_resamples", "use 0 to disable or at least 10"));
        }
        let om = &self.osg_map;
        if om.components == 0 || om.components > 5 {
            return Err(config_error("osg_map.components", "must lie in 1..=5"));
        }
        if om.shots < 500 {
            return Err(config_error("osg_map.shots", "histogram fits need at least 500 shots"));
        }
        if om.frame_shape.contains(&0) {
            return Err(config_error("osg_map.frame_shape", "must be non-empty"));
        }
        if om.restarts == 0 {
            return Err(config_error("osg_map.restarts", "must be at least 1"));
        }
        if om.bootstrap_resamples != 0 && om.bootstrap_resamples < 100 {
            return Err(config_error("osg_map.bootstrap_resamples", "use 0 to disable or at least 100"));
        }
        if om.fidelity_samples < 1000 {
            return Err(config_error("osg_map.fidelity_samples", "must be at least 1000"));
        }
        let q = &self.quench;
        self.field_schedule().validate().map_err(|e| config_error("quench", e.to_string()))?;
        positive("quench.rise_time", q.rise_time)?;
        probability("quench.p_prep", q.p_prep)?;
        non_negative("quench.t_max", q.t_max)?;
        if q.points == 0 {
            return Err(config_error("quench.points", "must be at least 1"));
        }
        let r = &self.recapture;
        if r.hold_times.is_empty() {
            return Err(config_error("recapture.hold_times", "must not be empty"));
        }
        for t in &r.hold_times {
            non_negative("recapture.hold_times", *t)?;
        }
        if r.atoms < 1000 {
            return Err(config_error("recapture.atoms", "must be at least 1000"));
        }
        if !(r.fit_bounds[0] > 0.0 && r.fit_bounds[1] > r.fit_bounds[0]) {
            return Err(config_error("recapture.fit_bounds", "must satisfy 0 < lo < hi"));
        }
        if self.experiment == Experiment::Analyze && self.analyze.frames_dir.is_none() {
            return Err(config_error("analyze.frames_dir", "required for analyze"));
        }
        if self.experiment == Experiment::Analyze && !self.analyze.frames_dir.as_ref().is_some_and(|d| d.is_dir()) {
            return Err(config_error("analyze.frames_dir", "not a directory"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every leaf setting with its value and the source of its default.
    pub fn describe(&self) -> Vec<(String, String, &'static str)> {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &toml::Value::Table(table), &mut out);
        if self.analyze.frames_dir.is_none() {
            out.push(("analyze.frames_dir".into(), "(unset)".into()));
        }
        out.into_iter()
            .map(|(path, value)| {
                let source = SOURCES
                    .iter()
                    .find(|(p, _)| *p == path || path.starts_with(&format!("{p}.")))
                    .map(|(_, s)| *s)
                    .unwrap_or("");
                (path, value, source)
            })
            .collect()
    }

    pub fn thermal_source(&self) -> Result<ThermalSource> {
        let trap = self.tweezer_trap()?;
        let mut source = ThermalSource::new(
            self.atoms.temperature,
            TrapModel::cropped(trap, SR87_MASS),
            self.atoms.sampling,
        );
        source.mass = SR87_MASS;
        Ok(source)
    }

    pub fn tweezer_trap(&self) -> Result<DipoleTrap> {
        let beam = GaussianBeam {
            power: 1.0,
            waist: [self.tweezer.waist; 2],
            center: [0.0; 3],
            propagation_axis: [0.0, 0.0, 1.0],
            transverse_axis: [1.0, 0.0, 0.0],
            wavelength: self.tweezer.wavelength,
            divergence: true,
        };
        DipoleTrap::new(beam, self.tweezer.depth * BOLTZMANN)
    }

    pub fn lightsheet_trap(&self) -> Result<DipoleTrap> {
        let beam = GaussianBeam {
            power: 1.0,
            waist: [self.lightsheet.waist_z, self.lightsheet.waist_y],
            center: [0.0; 3],
            propagation_axis: [1.0, 0.0, 0.0],
            transverse_axis: [0.0, 0.0, 1.0],
            wavelength: self.lightsheet.wavelength,
            divergence: true,
        };
        DipoleTrap::new(beam, self.lightsheet.depth * BOLTZMANN)
    }

    pub fn osg_potential(&self) -> Result<OsgPotential> {
        let beam = GaussianBeam {
            power: self.osg.power,
            waist: [self.osg.waist; 2],
            center: [0.0, -self.osg.offset, 0.0],
            propagation_axis: [0.0, 0.0, 1.0],
            transverse_axis: [1.0, 0.0, 0.0],
            wavelength: self.osg.wavelength,
            divergence: false,
        };
        let pol = PolarizabilitySpec {
            alpha_scalar: self.osg.alpha_scalar,
            alpha_tensor: self.osg.alpha_tensor,
            ..PolarizabilitySpec::default()
        };
        OsgPotential::new(beam, pol)
    }

    pub fn osg_sequence(&self) -> Result<OsgSequence> {
        Ok(OsgSequence {
            osg: self.osg_potential()?,
            lightsheet: self.lightsheet_trap()?,
            pulse_time: self.osg.pulse_time,
            expansion_time: self.osg.expansion_time,
            dt_pulse: self.osg.dt_pulse,
            dt_expansion: self.osg.dt_expansion,
            scatter_rate: self.osg.scatter_rate,
            scatter_wavelength: self.osg.wavelength,
            seed: self.seed,
        })
    }

    pub fn imaging_params(&self) -> ImagingParams {
        let im = &self.imaging;
        ImagingParams {
            duration: im.duration,
            saturation: im.saturation,
            linewidth: im.linewidth,
            wavelength: im.wavelength,
            beam_axis: im.beam_axis,
            alternation_period: im.alternation_period,
            alternation_start: im.alternation_start,
            dark_branching: im.dark_branching,
            collection_efficiency: ImagingParams::solid_angle_fraction(im.numerical_aperture) * im.transmission,
            emission_pattern: im.emission_pattern,
        }
    }

    /// Free-space imaging setup (release, time of flight, exposure).
    pub fn imaging_setup(&self) -> Result<ImagingScanSetup> {
        Ok(ImagingScanSetup {
            source: self.thermal_source()?,
            imaging: self.imaging_params(),
            lightsheet: if self.lightsheet.on_during_imaging { Some(self.lightsheet_trap()?) } else { None },
            camera: self.camera.clone(),
            time_of_flight: self.imaging.time_of_flight,
            dt: self.imaging.dt,
            occupancy: self.imaging.occupancy,
            bootstrap_resamples: self.scan.bootstrap_resamples,
        })
    }

    pub fn field_schedule(&self) -> FieldSchedule {
        let q = &self.quench;
        FieldSchedule {
            b_guide: q.b_guide,
            b_quench_amplitude: q.amplitude,
            quench_axis: q.axis,
            rise_time_tau: q.rise_time,
            detection_axis_angle: q.detection_angle_deg.to_radians(),
            g_factor: q.g_factor,
        }
    }

    pub fn quench_times(&self) -> Vec<f64> {
        let q = &self.quench;
        if q.points == 1 {
            return vec![0.0];
        }
        (0..q.points).map(|i| q.t_max * i as f64 / (q.points - 1) as f64).collect()
    }

    pub fn recapture_setup(&self) -> Result<RecaptureSetup> {
        Ok(RecaptureSetup { trap: self.tweezer_trap()?, gravity: self.recapture.gravity })
    }
}

fn config_error(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next.as_table_mut().ok_or_else(|| config_error(key, format!("`{part}` is not a section")))?;
    }
    Err(config_error(key, "empty key"))
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) if !is_enum_table(prefix) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&path, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Externally tagged enums serialize as one-key tables; show them whole.
fn is_enum_table(path: &str) -> bool {
    matches!(path, "atoms.preparation" | "imaging.emission_pattern")
}
