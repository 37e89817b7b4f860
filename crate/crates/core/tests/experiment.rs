use std::fs;
use std::path::{Path, PathBuf};

use osg_core::config::{Experiment, RunConfig};
use osg_core::experiment::*;
use osg_core::spin::{quench_experiment, PopulationRecord};

fn config(experiment: Experiment, sets: &[&str]) -> RunConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    let mut cfg = RunConfig::default().with_overrides(&sets).unwrap();
    cfg.experiment = experiment;
    cfg
}

fn small_map(save: bool) -> RunConfig {
    let save = format!("osg_map.save_frames={save}");
    config(
        Experiment::OsgMap,
        &["osg_map.shots=2000", "osg_map.bootstrap_resamples=0", "osg_map.fidelity_samples=100000", &save],
    )
}

fn small_scan(save: bool) -> RunConfig {
    let save = format!("scan.save_frames={save}");
    config(Experiment::ImagingScan, &["scan.shots_per_time=600", "scan.times=[12e-6, 16e-6]", &save])
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn quench_run_writes_the_population_table() {
    let root = tempfile::tempdir().unwrap();
    let cfg = config(Experiment::Quench, &["quench.points=21", "quench.t_max=0.02"]);
    let out = run(&cfg, root.path()).unwrap();
    assert_eq!(out.dir, root.path().join(run_dir_name(&cfg)));
    assert!(run_dir_name(&cfg).starts_with("quench-"));
    let text = fs::read_to_string(out.dir.join("quench.csv")).unwrap();
    let direct = quench_experiment(&cfg.field_schedule(), &cfg.quench_times(), cfg.quench.p_prep).unwrap();
    let expect: Vec<String> =
        std::iter::once(PopulationRecord::CSV_HEADER.to_string()).chain(direct.iter().map(|r| r.csv_row())).collect();
    assert_eq!(text.lines().collect::<Vec<_>>(), expect);
    let manifest = RunManifest::read(&out.dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.config_hash, cfg.hash());
    assert!(manifest.outputs.iter().any(|o| o.path == "quench.csv"));
    assert!(!manifest.timings.is_empty());
    let reloaded = RunConfig::from_file(&out.dir.join("config.toml")).unwrap();
    assert_eq!(reloaded, cfg);
}

#[test]
fn identical_configs_give_identical_files() {
    let configs = [
        config(Experiment::Quench, &["quench.points=11", "quench.t_max=0.01"]),
        config(Experiment::ReleaseRecapture, &["recapture.atoms=2000", "recapture.hold_times=[0.0, 2e-5, 4e-5]"]),
        small_scan(false),
        small_map(false),
    ];
    for cfg in configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = run(&cfg, a.path()).unwrap();
        let second = run(&cfg, b.path()).unwrap();
        let files = data_files(&first.dir);
        assert!(files.len() >= 2, "{:?}", cfg.experiment);
        assert_eq!(files, data_files(&second.dir), "{:?}", cfg.experiment);
        let again = rerun(&first.dir.join(MANIFEST_FILE), b.path()).unwrap();
        assert_eq!(files, data_files(&again.dir), "{:?}", cfg.experiment);
        for (name, _) in &files {
            if name.ends_with(".json") {
                let v = json(&first.dir.join(name));
                assert_eq!(v["config_hash"], cfg.hash());
                assert_eq!(v["seed"], cfg.seed);
            }
        }
    }
}

#[test]
fn seeds_change_the_data() {
    let root = tempfile::tempdir().unwrap();
    let a = config(Experiment::ReleaseRecapture, &["recapture.atoms=2000", "recapture.fit=false"]);
    let b = RunConfig { seed: 2, ..a.clone() };
    let ra = run(&a, root.path()).unwrap();
    let rb = run(&b, root.path()).unwrap();
    assert_ne!(ra.dir, rb.dir);
    assert_ne!(fs::read(ra.dir.join("recapture.csv")).unwrap(), fs::read(rb.dir.join("recapture.csv")).unwrap());
}

fn analyze_config(frames: &Path, base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.experiment = Experiment::Analyze;
    cfg.analyze.frames_dir = Some(frames.to_path_buf());
    cfg
}

/// Copies frames under scrambled names in reverse order.
fn shuffled_copy(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    let mut stems: Vec<PathBuf> =
        fs::read_dir(src).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().unwrap() == "json").collect();
    stems.sort();
    stems.reverse();
    for (i, p) in stems.iter().enumerate() {
        let name = format!("{:08x}", (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 32);
        fs::copy(p, dst.join(format!("{name}.json"))).unwrap();
        fs::copy(p.with_extension("png"), dst.join(format!("{name}.png"))).unwrap();
    }
}

#[test]
fn stored_map_frames_reproduce_the_in_process_result() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_map(true);
    let sim = run(&cfg, root.path()).unwrap();
    let frames = sim.dir.join("frames");
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 2 * cfg.osg_map.shots);

    let analyzed = run(&analyze_config(&frames, &cfg), root.path()).unwrap();
    let a = json(&sim.dir.join("regions.json"));
    let b = json(&analyzed.dir.join("regions.json"));
    for key in ["detection", "model", "report", "assignment_accuracy", "outer_separation"] {
        assert_eq!(a[key], b[key], "{key}");
    }
    for f in ["regions.csv", "locations.csv"] {
        assert_eq!(fs::read(sim.dir.join(f)).unwrap(), fs::read(analyzed.dir.join(f)).unwrap(), "{f}");
    }

    let shuffled = root.path().join("shuffled");
    shuffled_copy(&frames, &shuffled);
    let again = run(&analyze_config(&shuffled, &cfg), root.path()).unwrap();
    assert_eq!(json(&again.dir.join("regions.json"))["report"], b["report"]);
    assert_eq!(fs::read(again.dir.join("locations.csv")).unwrap(), fs::read(analyzed.dir.join("locations.csv")).unwrap());
}

#[test]
fn stored_scan_frames_reproduce_the_detection_table() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_scan(true);
    let sim = run(&cfg, root.path()).unwrap();
    let frames = sim.dir.join("frames");
    fs::write(frames.join("broken.json"), "{\"format\": 3}").unwrap();
    let analyzed = run(&analyze_config(&frames, &cfg), root.path()).unwrap();
    assert_eq!(fs::read(sim.dir.join("detection.csv")).unwrap(), fs::read(analyzed.dir.join("detection.csv")).unwrap());
    assert_eq!(analyzed.manifest.warnings.len(), 1, "{:?}", analyzed.manifest.warnings);
    assert!(analyzed.manifest.warnings[0].contains("broken.json"));
}

#[test]
fn failed_runs_leave_no_output() {
    let root = tempfile::tempdir().unwrap();
    let empty = root.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("junk.json"), "not json").unwrap();
    let cfg = analyze_config(&empty, &RunConfig::default());
    assert!(run(&cfg, root.path()).is_err());
    let left: Vec<_> = fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("empty")]);

    let missing = analyze_config(&root.path().join("nope"), &RunConfig::default());
    assert!(matches!(run(&missing, root.path()), Err(osg_core::Error::Config { .. })));
}

#[test]
fn manifest_rejects_tampered_config() {
    let root = tempfile::tempdir().unwrap();
    let cfg = config(Experiment::Quench, &["quench.points=3"]);
    let out = run(&cfg, root.path()).unwrap();
    let path = out.dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("\"points\": 3", "\"points\": 4", 1);
    fs::write(&path, text).unwrap();
    assert!(RunManifest::read(&path).is_err());
}
