use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osg_core::config::{Experiment, RunConfig};
use osg_core::experiment::{run, RunManifest, RunOutcome};
use osg_core::Error;

/// Simulates single-atom imaging and optical Stern-Gerlach spin readout of
/// strontium-87 and analyses the resulting frames.
#[derive(Parser)]
#[command(name = "osg", version)]
struct Cli {
    /// Directory that receives one subdirectory per run.
    #[arg(long, global = true, env = "OSG_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detection fidelity and spot size versus exposure time.
    ImagingScan(ConfigArgs),
    /// Stern-Gerlach map: spin regions and their fidelities.
    OsgMap(ConfigArgs),
    /// Spin populations after a magnetic-field quench.
    Quench(ConfigArgs),
    /// Release-recapture curve and temperature fit.
    ReleaseRecapture(ConfigArgs),
    /// Analyse stored frames (PNG + JSON sidecar).
    Analyze {
        frames_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print every configuration value with its source.
    DescribeConfig {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the effective configuration as TOML instead.
        #[arg(long)]
        toml: bool,
    },
    /// Run the configuration stored in a run manifest again.
    Rerun { manifest: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set imaging.duration=20e-6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, experiment: Option<Experiment>, frames_dir: Option<&Path>) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        if let Some(e) = experiment {
            cfg.experiment = e;
        }
        if let Some(d) = frames_dir {
            cfg.analyze.frames_dir = Some(d.to_path_buf());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status: 2 for configuration errors, 3 for failures while running.
fn fail(err: &Error, config_stage: bool) -> ExitCode {
    eprintln!("error: {err}");
    let config_error = config_stage || matches!(err, Error::Config { .. });
    ExitCode::from(if config_error { 2 } else { 3 })
}

fn report(outcome: &RunOutcome) {
    for line in &outcome.summary {
        println!("{line}");
    }
    for w in &outcome.manifest.warnings {
        eprintln!("warning: {w}");
    }
    println!("config hash {}", outcome.manifest.config_hash);
    println!("output {}", outcome.dir.display());
}

fn execute(cfg: &RunConfig, root: &Path) -> ExitCode {
    for w in cfg.camera.warnings() {
        eprintln!("warning: {w}");
    }
    match run(cfg, root) {
        Ok(outcome) => {
            report(&outcome);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, false),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, experiment) = match &cli.command {
        Command::ImagingScan(a) => (a, Experiment::ImagingScan),
        Command::OsgMap(a) => (a, Experiment::OsgMap),
        Command::Quench(a) => (a, Experiment::Quench),
        Command::ReleaseRecapture(a) => (a, Experiment::ReleaseRecapture),
        Command::Analyze { frames_dir, config } => {
            return match config.load(Some(Experiment::Analyze), Some(frames_dir)) {
                Ok(cfg) => execute(&cfg, &cli.output_root),
                Err(e) => fail(&e, true),
            };
        }
        Command::DescribeConfig { config, toml } => {
            let cfg = match config.load(None, None) {
                Ok(cfg) => cfg,
                Err(e) => return fail(&e, true),
            };
            if *toml {
                print!("{}", cfg.to_toml());
            } else {
                let rows = cfg.describe();
                let wp = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
                let wv = rows.iter().map(|r| r.1.len().min(40)).max().unwrap_or(0);
                for (path, value, source) in rows {
                    println!("{path:wp$}  {value:wv$}  {source}");
                }
                println!("config hash {}", cfg.hash());
            }
            return ExitCode::SUCCESS;
        }
        Command::Rerun { manifest } => {
            return match RunManifest::read(manifest) {
                Ok(m) => execute(&m.config, &cli.output_root),
                Err(e) => fail(&e, true),
            };
        }
    };
    match args.load(Some(experiment), None) {
        Ok(cfg) => execute(&cfg, &cli.output_root),
        Err(e) => fail(&e, true),
    }
}
