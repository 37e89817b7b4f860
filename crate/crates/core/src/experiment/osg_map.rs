use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{bias_correct, BiasMethod, Frame};
use crate::classifier::{
    assign, bootstrap_errors, fidelity, fit_gmm, region_labels, BootstrapErrors, FidelityOptions, FidelityReport,
    GmmConfig, MixtureModel, RegionLabel,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::montecarlo::{assign_spins, osg_sequence, sample_atoms, AtomSample};
use crate::pipeline::{analyze_frame, fit_detection_histogram, DetectionFit, Localization};
use crate::rng::{child_seed, domain};

/// One Stern-Gerlach shot after analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapShot {
    pub index: usize,
    pub localization: Localization,
    /// m_F of the atom, `None` for an empty shot.
    pub m_f: Option<f64>,
    /// Mean true position over the exposure, m.
    pub truth: Option<[f64; 2]>,
    /// Index of the assigned region for detected atoms.
    pub region: Option<usize>,
}

/// True spread of one region's atoms at the end of the expansion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueRegion {
    pub label: RegionLabel,
    pub atoms: usize,
    /// Mean position relative to the tweezer, m.
    pub mean: [f64; 2],
    /// Standard deviation along the separation axis (y), m.
    pub sigma_along: f64,
    /// Standard deviation across it (x), m.
    pub sigma_across: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsgMapResult {
    pub detection: DetectionFit,
    pub model: MixtureModel,
    pub report: FidelityReport,
    pub bootstrap: Option<BootstrapErrors>,
    pub truth: Vec<TrueRegion>,
    /// Fraction of detected, loaded atoms assigned to the region holding
    /// their true |m_F|, per region.
    pub assignment_accuracy: Vec<f64>,
    pub shots: Vec<MapShot>,
}

/// Simulated frames of the Stern-Gerlach map with their atoms.
pub struct MapFrames {
    pub frames: Vec<Frame>,
    /// Atoms at the end of the expansion, one per shot.
    pub atoms: Vec<AtomSample>,
    pub loaded: Vec<bool>,
}

/// Release, Stern-Gerlach pulse, expansion and one exposure per shot.
pub fn simulate_map_frames(cfg: &RunConfig) -> Result<MapFrames> {
    let n = cfg.osg_map.shots;
    let seed = cfg.seed;
    let mut atoms = sample_atoms(&cfg.thermal_source()?, n, seed)?;
    assign_spins(&mut atoms, &cfg.atoms.preparation, seed)?;
    let expanded = osg_sequence(&atoms, &cfg.osg_sequence()?)?;
    let mut setup = cfg.imaging_setup()?;
    setup.time_of_flight = 0.0;
    setup.camera.frame_shape = cfg.osg_map.frame_shape;
    setup.camera.center = cfg.osg_map.frame_center;
    let shots: Vec<(Frame, bool)> = expanded
        .par_iter()
        .enumerate()
        .map(|(i, atom)| {
            let shot = setup.shot(atom, cfg.imaging.duration, seed, i as u64)?;
            Ok((shot.frame, shot.atom.is_some()))
        })
        .collect::<Result<_>>()?;
    let (frames, loaded) = shots.into_iter().unzip();
    Ok(MapFrames { frames, atoms: expanded, loaded })
}

/// Localizes every frame, thresholds the peak histogram and classifies the
/// detected atoms into spin regions.
pub fn analyze_map(frames: &[Frame], cfg: &RunConfig) -> Result<OsgMapResult> {
    let locs: Vec<Localization> = frames
        .par_iter()
        .map(|f| analyze_frame(&bias_correct(f, BiasMethod::Recorded)?, &cfg.analysis))
        .collect::<Result<_>>()?;
    let peaks: Vec<f64> = locs.iter().map(|l| l.peak_value).collect();
    let detection = fit_detection_histogram(&peaks, &cfg.analysis)?;
    let points: Vec<[f64; 2]> = locs.iter().filter(|l| detection.is_atom(l.peak_value)).map(|l| l.position).collect();
    let gmm = gmm_config(cfg);
    let k = cfg.osg_map.components;
    let model = fit_gmm(&points, k, &gmm, cfg.seed)?;
    let opts = FidelityOptions {
        min_samples: cfg.osg_map.fidelity_samples,
        origin: [0.0, 0.0],
        seed: child_seed(cfg.seed, domain::FIDELITY_MC),
        ..Default::default()
    };
    let mut report = fidelity(&model, &opts)?;
    let bootstrap = if cfg.osg_map.bootstrap_resamples > 0 {
        let boot = bootstrap_errors(&points, &model, &gmm, cfg.osg_map.bootstrap_resamples, &opts, cfg.seed)?;
        for (r, se) in report.regions.iter_mut().zip(&boot.se) {
            r.bootstrap_se = Some(*se);
        }
        Some(boot)
    } else {
        None
    };

    let mut shots = Vec::with_capacity(frames.len());
    for (i, (frame, mut loc)) in frames.iter().zip(locs).enumerate() {
        loc.is_atom = detection.is_atom(loc.peak_value);
        let region = if loc.is_atom { Some(assign(&model, loc.position)?) } else { None };
        let truth = frame.truth.first();
        shots.push(MapShot {
            index: i,
            localization: loc,
            m_f: truth.map(|t| t.m_f),
            truth: truth.map(|t| t.position),
            region,
        });
    }
    let labels = region_labels(k, gmm.twice_f)?;
    let assignment_accuracy = labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let mine: Vec<&MapShot> =
                shots.iter().filter(|s| s.region.is_some() && s.m_f.is_some_and(|m| label.contains(m))).collect();
            mine.iter().filter(|s| s.region == Some(j)).count() as f64 / mine.len().max(1) as f64
        })
        .collect();
    Ok(OsgMapResult { detection, model, report, bootstrap, truth: Vec::new(), assignment_accuracy, shots })
}

pub fn gmm_config(cfg: &RunConfig) -> GmmConfig {
    GmmConfig { restarts: cfg.osg_map.restarts, ..GmmConfig::default() }
}

/// Per-region statistics of the true atom positions after the expansion.
pub fn true_regions(atoms: &[AtomSample], k: usize) -> Result<Vec<TrueRegion>> {
    let labels = region_labels(k, 9)?;
    Ok(labels
        .into_iter()
        .map(|label| {
            let pts: Vec<[f64; 2]> =
                atoms.iter().filter(|a| label.contains(a.m_f)).map(|a| [a.position.x, a.position.y]).collect();
            let n = pts.len().max(1) as f64;
            let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
            let sd = |ax: usize| (pts.iter().map(|p| (p[ax] - mean[ax]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            TrueRegion { atoms: pts.len(), mean, sigma_along: sd(1), sigma_across: sd(0), label }
        })
        .collect())
}

/// Full Stern-Gerlach map experiment.
pub fn osg_map(cfg: &RunConfig) -> Result<(OsgMapResult, MapFrames)> {
    let sim = simulate_map_frames(cfg)?;
    if !sim.loaded.iter().any(|l| *l) {
        return Err(Error::invalid("no shot holds an atom"));
    }
    let mut result = analyze_map(&sim.frames, cfg)?;
    result.truth = true_regions(&sim.atoms, cfg.osg_map.components)?;
    Ok((result, sim))
}
