use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn osg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osg"))
        .env("OSG_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .expect("osg runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> String {
    stdout(o).lines().find_map(|l| l.strip_prefix("output ")).expect("output line").to_string()
}

#[test]
fn quench_writes_csv_and_manifest() {
    let root = tempfile::tempdir().unwrap();
    let o = osg(root.path(), &["quench", "--set", "quench.points=5", "--set", "quench.t_max=0.004"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    assert!(dir.starts_with(root.path().to_str().unwrap()));
    let csv = fs::read_to_string(Path::new(&dir).join("quench.csv")).unwrap();
    assert!(csv.starts_with("t_s,p_9half,p_7half,p_5half,p_merged"));
    assert_eq!(csv.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&dir).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "quench");
    assert_eq!(manifest["config"]["quench"]["points"], 5);
}

#[test]
fn config_file_flags_and_seed_precedence() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("run.toml");
    fs::write(&file, "seed = 5\n[quench]\npoints = 7\nt_max = 0.01\n").unwrap();
    let f = file.to_str().unwrap();
    let o = osg(root.path(), &["describe-config", "--toml", "--config", f, "--set", "quench.points=9", "--seed", "11"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed = 11"));
    assert!(text.contains("points = 9"));
    assert!(text.contains("t_max = 0.01"));
}

#[test]
fn describe_config_lists_values_with_sources() {
    let root = tempfile::tempdir().unwrap();
    let o = osg(root.path(), &["describe-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["osg.power", "tweezer.waist", "camera.cic_rate", "imaging.duration", "quench.amplitude", "seed"] {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key} missing"));
        assert!(line.split_whitespace().count() >= 3, "{line}");
    }
    assert!(text.lines().last().unwrap().starts_with("config hash "));
}

#[test]
fn config_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let o = osg(root.path(), &["quench", "--set", "quench.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("quench.bogus"));
    let o = osg(root.path(), &["osg-map", "--set", "osg.waist=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("osg.waist"));
    let o = osg(root.path(), &["analyze", root.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = osg(root.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
}

#[test]
fn runtime_failures_exit_with_three_and_clean_up() {
    let root = tempfile::tempdir().unwrap();
    let frames = root.path().join("frames");
    fs::create_dir(&frames).unwrap();
    fs::write(frames.join("a.json"), "{}").unwrap();
    let out = root.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_osg"))
        .args(["--output-root", out.to_str().unwrap(), "analyze", frames.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn rerun_reproduces_data_files() {
    let root = tempfile::tempdir().unwrap();
    let o = osg(root.path(), &["release-recapture", "--set", "recapture.atoms=1000", "--set", "recapture.fit=false"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let before = fs::read(Path::new(&dir).join("recapture.csv")).unwrap();
    let other = tempfile::tempdir().unwrap();
    let manifest = Path::new(&dir).join("manifest.json");
    let o = osg(other.path(), &["rerun", manifest.to_str().unwrap()]);
    assert!(o.status.success());
    let again = run_dir(&o);
    assert_eq!(fs::read(Path::new(&again).join("recapture.csv")).unwrap(), before);
    let o = osg(other.path(), &["rerun", root.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
