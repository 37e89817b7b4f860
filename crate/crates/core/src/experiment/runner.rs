use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::osg_map::{analyze_map, osg_map, OsgMapResult};
use crate::camera::Frame;
use crate::classifier::RegionReport;
use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::io::{frame_stem, read_frames_dir, write_csv, write_frame, write_json, FrameSidecar, StoredFrame, FRAME_FORMAT};
use crate::montecarlo::{fit_temperature, release_recapture, TemperatureFit};
use crate::pipeline::{
    imaging_time_scan_with, spot_growth_exponent, summarize, ScanRow, Shot, ShotResult, SCAN_CSV_HEADER,
};
use crate::rng::{child_seed, domain};
use crate::spin::{quench_experiment, PopulationRecord};

pub const MANIFEST_FORMAT: &str = "osg-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REGIONS_CSV_HEADER: &str =
    "region,weight,center_x_m,center_y_m,distance_m,sigma_major_m,sigma_minor_m,fidelity,false_positive,missed,integration_se,bootstrap_se";
pub const LOCATIONS_CSV_HEADER: &str = "shot,x_m,y_m,peak,is_atom,region,m_f,true_x_m,true_y_m";
pub const RECAPTURE_CSV_HEADER: &str = "hold_s,probability,error";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything needed to reproduce a run: the full configuration plus
/// provenance of the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub experiment: Experiment,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: RunConfig,
    pub timings: Vec<Timing>,
    pub outputs: Vec<OutputFile>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::invalid(format!("unknown manifest format `{}`", m.format)));
        }
        if m.config.hash() != m.config_hash {
            return Err(Error::invalid("manifest config does not match its hash"));
        }
        Ok(m)
    }
}

/// Result of [`run`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Human-readable result lines.
    pub summary: Vec<String>,
}

/// Name of the output directory of a configuration.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    format!("{}-{}", cfg.experiment.name(), &cfg.hash()[..12])
}

/// Runs the configured experiment and writes its outputs under
/// `<output_root>/<experiment>-<hash prefix>/`. Outputs are assembled in a
/// scratch directory and moved into place only on success.
pub fn run(cfg: &RunConfig, output_root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(output_root).map_err(|e| Error::io(output_root, e))?;
    let name = run_dir_name(cfg);
    let dir = output_root.join(&name);
    let scratch = output_root.join(format!(".{name}.partial-{}", std::process::id()));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    fs::create_dir(&scratch).map_err(|e| Error::io(&scratch, e))?;
    let result = run_into(cfg, &scratch).and_then(|(manifest, summary)| {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&scratch, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunOutcome { dir, manifest, summary })
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&scratch);
    }
    result
}

/// Re-runs the configuration stored in a manifest.
pub fn rerun(manifest: &Path, output_root: &Path) -> Result<RunOutcome> {
    run(&RunManifest::read(manifest)?.config, output_root)
}

struct Recorder {
    timings: Vec<Timing>,
    warnings: Vec<String>,
    summary: Vec<String>,
    clock: Instant,
}

impl Recorder {
    fn lap(&mut self, stage: &str) {
        self.timings.push(Timing { stage: stage.into(), seconds: self.clock.elapsed().as_secs_f64() });
        self.clock = Instant::now();
    }
}

fn run_into(cfg: &RunConfig, dir: &Path) -> Result<(RunManifest, Vec<String>)> {
    let mut rec = Recorder { timings: Vec::new(), warnings: Vec::new(), summary: Vec::new(), clock: Instant::now() };
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    match cfg.experiment {
        Experiment::ImagingScan => imaging_scan(cfg, dir, &mut rec)?,
        Experiment::OsgMap => map(cfg, dir, &mut rec)?,
        Experiment::Quench => quench(cfg, dir, &mut rec)?,
        Experiment::ReleaseRecapture => recapture(cfg, dir, &mut rec)?,
        Experiment::Analyze => analyze(cfg, dir, &mut rec)?,
    }
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        timings: rec.timings,
        outputs: list_outputs(dir)?,
        warnings: rec.warnings,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok((manifest, rec.summary))
}

fn list_outputs(dir: &Path) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(OutputFile {
            path: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn report<T: Serialize>(path: &Path, cfg: &RunConfig, seed: u64, body: &T) -> Result<()> {
    write_json(path, &Report { config_hash: cfg.hash(), seed, body })
}

fn frames_dir(dir: &Path) -> Result<PathBuf> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    Ok(frames)
}

fn sidecar(cfg: &RunConfig, seed: u64, shot: u64, exposure: f64, osg: bool, photon_offsets: Vec<[f64; 2]>) -> FrameSidecar {
    FrameSidecar {
        format: FRAME_FORMAT.into(),
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed,
        shot,
        exposure,
        osg,
        camera: Default::default(),
        truth: Vec::new(),
        dropped_events: 0,
        clipped_pixels: 0,
        photon_offsets,
    }
}

#[derive(Serialize)]
struct ScanReport<'a> {
    rows: &'a [ScanRow],
    /// Power-law exponents of the spot's major and minor σ versus exposure.
    spot_exponent: Option<[f64; 2]>,
}

fn write_scan(cfg: &RunConfig, seed: u64, dir: &Path, rows: &[ScanRow], rec: &mut Recorder) -> Result<()> {
    write_csv(&dir.join("detection.csv"), SCAN_CSV_HEADER, rows.iter().map(ScanRow::csv_row))?;
    let spot_exponent =
        (rows.len() >= 2 && rows.iter().all(|r| r.sigma_major > 0.0)).then(|| spot_growth_exponent(rows));
    report(&dir.join("detection.json"), cfg, seed, &ScanReport { rows, spot_exponent })?;
    for r in rows {
        rec.summary.push(match &r.fit_error {
            None => format!(
                "t = {:5.1} µs  fidelity {:.4}  threshold {:.3}  σ {:.2}/{:.2} µm",
                r.time * 1e6,
                1.0 - r.infidelity,
                r.threshold,
                r.sigma_major * 1e6,
                r.sigma_minor * 1e6
            ),
            Some(e) => format!("t = {:5.1} µs  fit failed: {e}", r.time * 1e6),
        });
    }
    if let Some([a, b]) = spot_exponent {
        rec.summary.push(format!("spot growth exponent {a:.2} (major) {b:.2} (minor)"));
    }
    Ok(())
}

fn imaging_scan(cfg: &RunConfig, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let setup = cfg.imaging_setup()?;
    let frames = if cfg.scan.save_frames { Some(frames_dir(dir)?) } else { None };
    let save = |t: f64, i: u64, shot: &Shot| -> Result<()> {
        match &frames {
            Some(d) => write_frame(d, &frame_stem(t, i), &shot.frame, &sidecar(cfg, cfg.seed, i, t, false, shot.photon_offsets.clone()))
                .map(|_| ()),
            None => Ok(()),
        }
    };
    let rows = imaging_time_scan_with(&cfg.scan.times, cfg.scan.shots_per_time, &setup, &cfg.analysis, cfg.seed, Some(&save))?;
    rec.lap("simulate and analyze");
    write_scan(cfg, cfg.seed, dir, &rows, rec)?;
    rec.lap("write");
    Ok(())
}

#[derive(Serialize)]
struct MapReport<'a> {
    #[serde(flatten)]
    result: &'a OsgMapResult,
    /// Distance between the outermost region centres along the separation
    /// axis, m.
    outer_separation: f64,
}

/// Region rows in the stable CSV layout.
pub fn regions_csv_rows(regions: &[RegionReport]) -> Vec<String> {
    regions
        .iter()
        .map(|r| {
            format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3e},{}",
                r.label,
                r.weight,
                r.center[0],
                r.center[1],
                r.center_distance,
                r.sigma_major,
                r.sigma_minor,
                r.fidelity,
                r.false_positive,
                r.missed,
                r.integration_se,
                r.bootstrap_se.map(|s| format!("{s:.3e}")).unwrap_or_default()
            )
        })
        .collect()
}

/// Distance between the first and last region centres along the model's
/// separation axis.
pub fn outer_separation(result: &OsgMapResult) -> f64 {
    let m = &result.model;
    let along = |c: [f64; 2]| c[0] * m.separation_axis[0] + c[1] * m.separation_axis[1];
    match (m.means.first(), m.means.last()) {
        (Some(a), Some(b)) => (along(*a) - along(*b)).abs(),
        _ => 0.0,
    }
}

fn write_map(cfg: &RunConfig, seed: u64, dir: &Path, result: &OsgMapResult, rec: &mut Recorder) -> Result<()> {
    let separation = outer_separation(result);
    report(&dir.join("regions.json"), cfg, seed, &MapReport { result, outer_separation: separation })?;
    write_csv(&dir.join("regions.csv"), REGIONS_CSV_HEADER, regions_csv_rows(&result.report.regions))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    write_csv(
        &dir.join("locations.csv"),
        LOCATIONS_CSV_HEADER,
        result.shots.iter().map(|s| {
            format!(
                "{},{:.9e},{:.9e},{:.9e},{},{},{},{},{}",
                s.index,
                s.localization.position[0],
                s.localization.position[1],
                s.localization.peak_value,
                s.localization.is_atom as u8,
                s.region.map(|r| r.to_string()).unwrap_or_default(),
                s.m_f.map(|m| m.to_string()).unwrap_or_default(),
                opt(s.truth.map(|t| t[0])),
                opt(s.truth.map(|t| t[1])),
            )
        }),
    )?;
    rec.summary.push(format!(
        "detection fidelity {:.4}, {} atoms classified",
        result.detection.fidelity, result.model.points
    ));
    for r in &result.report.regions {
        let se = r.bootstrap_se.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
        rec.summary.push(format!(
            "{:>10}  y = {:6.2} µm  σ {:.2}/{:.2} µm  fidelity {:.4}{se}",
            r.label.to_string(),
            r.center[1] * 1e6,
            r.sigma_major * 1e6,
            r.sigma_minor * 1e6,
            r.fidelity
        ));
    }
    rec.summary.push(format!("outermost separation {:.2} µm", separation * 1e6));
    Ok(())
}

fn map(cfg: &RunConfig, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let (result, sim) = osg_map(cfg)?;
    rec.lap("simulate and analyze");
    if cfg.osg_map.save_frames {
        let frames = frames_dir(dir)?;
        let t = cfg.imaging.duration;
        sim.frames.par_iter().enumerate().try_for_each(|(i, f)| {
            write_frame(&frames, &frame_stem(t, i as u64), f, &sidecar(cfg, cfg.seed, i as u64, t, true, Vec::new())).map(|_| ())
        })?;
    }
    write_map(cfg, cfg.seed, dir, &result, rec)?;
    rec.lap("write");
    Ok(())
}

fn quench(cfg: &RunConfig, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let records = quench_experiment(&cfg.field_schedule(), &cfg.quench_times(), cfg.quench.p_prep)?;
    rec.lap("evolve");
    write_csv(&dir.join("quench.csv"), PopulationRecord::CSV_HEADER, records.iter().map(PopulationRecord::csv_row))?;
    if let Some(last) = records.last() {
        rec.summary.push(format!(
            "t = {:.3} s  |m_F| populations 9/2 {:.4}  7/2 {:.4}  5/2 {:.4}  merged {:.4}",
            last.time, last.p_abs[0], last.p_abs[1], last.p_abs[2], last.p_abs[3]
        ));
    }
    rec.lap("write");
    Ok(())
}

#[derive(Serialize)]
struct RecaptureReport<'a> {
    points: &'a [crate::montecarlo::RecapturePoint],
    temperature_fit: Option<&'a TemperatureFit>,
}

fn recapture(cfg: &RunConfig, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let source = cfg.thermal_source()?;
    let setup = cfg.recapture_setup()?;
    let r = &cfg.recapture;
    let points = release_recapture(&source, &setup, &r.hold_times, r.atoms, cfg.seed)?;
    rec.lap("simulate");
    let fit = if r.fit {
        let fit = fit_temperature(&points, &source, &setup, r.atoms, child_seed(cfg.seed, domain::RECAPTURE), (r.fit_bounds[0], r.fit_bounds[1]))?;
        rec.lap("fit");
        Some(fit)
    } else {
        None
    };
    write_csv(
        &dir.join("recapture.csv"),
        RECAPTURE_CSV_HEADER,
        points.iter().map(|p| format!("{:e},{:.9e},{:.9e}", p.time, p.probability, p.error)),
    )?;
    report(&dir.join("recapture.json"), cfg, cfg.seed, &RecaptureReport { points: &points, temperature_fit: fit.as_ref() })?;
    for p in &points {
        rec.summary.push(format!("hold {:5.1} µs  recaptured {:.4} ± {:.4}", p.time * 1e6, p.probability, p.error));
    }
    if let Some(f) = &fit {
        rec.summary.push(format!("fitted temperature {:.1} nK (true {:.1} nK)", f.temperature * 1e9, cfg.atoms.temperature * 1e9));
    }
    rec.lap("write");
    Ok(())
}

/// Frames of one exposure and kind.
struct Group {
    osg: bool,
    exposure: f64,
    frames: Vec<StoredFrame>,
}

fn group_frames(frames: Vec<StoredFrame>) -> Vec<Group> {
    let mut groups: BTreeMap<(bool, u64), Vec<StoredFrame>> = BTreeMap::new();
    for f in frames {
        groups.entry((f.sidecar.osg, f.sidecar.exposure.to_bits())).or_default().push(f);
    }
    groups
        .into_iter()
        .map(|((osg, bits), frames)| Group { osg, exposure: f64::from_bits(bits), frames })
        .collect()
}

fn group_seed(group: &Group, warnings: &Mutex<Vec<String>>) -> u64 {
    let seed = group.frames[0].sidecar.seed;
    if group.frames.iter().any(|f| f.sidecar.seed != seed || f.sidecar.config_hash != group.frames[0].sidecar.config_hash) {
        warnings.lock().expect("warnings lock").push(format!(
            "frames at {:.1} µs come from several runs; using seed {seed}",
            group.exposure * 1e6
        ));
    }
    seed
}

fn analyze(cfg: &RunConfig, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let src = cfg
        .analyze
        .frames_dir
        .as_ref()
        .ok_or_else(|| Error::Config { path: "analyze.frames_dir".into(), msg: "required for analyze".into() })?;
    let (frames, warnings) = read_frames_dir(src)?;
    rec.warnings.extend(warnings);
    rec.lap("read");
    let warnings = Mutex::new(Vec::new());
    let mut rows = Vec::new();
    let mut scan_seed = None;
    let mut maps = 0;
    for group in group_frames(frames) {
        let seed = group_seed(&group, &warnings);
        if group.osg {
            if maps > 0 {
                warnings.lock().expect("warnings lock").push(format!(
                    "ignoring Stern-Gerlach frames at {:.1} µs; only one map per analysis",
                    group.exposure * 1e6
                ));
                continue;
            }
            let run_cfg = RunConfig { seed, ..cfg.clone() };
            let plain: Vec<Frame> = group.frames.into_iter().map(|f| f.frame).collect();
            let result = analyze_map(&plain, &run_cfg)?;
            write_map(cfg, seed, dir, &result, rec)?;
            maps += 1;
        } else {
            scan_seed.get_or_insert(seed);
            let results: Vec<ShotResult> = group
                .frames
                .into_par_iter()
                .map(|f| ShotResult::from_frame(&f.frame, f.sidecar.photon_offsets, &cfg.analysis))
                .collect::<Result<_>>()?;
            rows.push(summarize(group.exposure, &results, cfg.scan.bootstrap_resamples, &cfg.analysis, seed)?);
        }
    }
    rec.lap("analyze");
    if !rows.is_empty() {
        write_scan(cfg, scan_seed.unwrap_or(cfg.seed), dir, &rows, rec)?;
    }
    rec.warnings.extend(warnings.into_inner().expect("warnings lock"));
    rec.lap("write");
    Ok(())
}
