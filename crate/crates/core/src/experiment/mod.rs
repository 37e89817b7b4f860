mod osg_map;
mod runner;

pub use osg_map::{analyze_map, gmm_config, osg_map, simulate_map_frames, true_regions, MapFrames, MapShot, OsgMapResult, TrueRegion};
pub use runner::{
    outer_separation, regions_csv_rows, rerun, run, run_dir_name, OutputFile, RunManifest, RunOutcome, Timing,
    LOCATIONS_CSV_HEADER, MANIFEST_FILE, MANIFEST_FORMAT, RECAPTURE_CSV_HEADER, REGIONS_CSV_HEADER,
};
