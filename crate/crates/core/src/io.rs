//! Frame files: 16-bit grayscale PNG counts with a JSON sidecar.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraParams, Frame, TruthAtom};
use crate::config::Experiment;
use crate::error::{Error, Result};

pub const FRAME_FORMAT: &str = "osg-frame/1";

/// Metadata stored next to every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSidecar {
    pub format: String,
    pub experiment: Experiment,
    pub config_hash: String,
    pub seed: u64,
    pub shot: u64,
    /// s.
    pub exposure: f64,
    /// Frame taken after a Stern-Gerlach pulse.
    pub osg: bool,
    pub camera: CameraParams,
    pub truth: Vec<TruthAtom>,
    pub dropped_events: usize,
    /// Pixels clipped to the 16-bit range on writing.
    pub clipped_pixels: usize,
    /// Collected photon offsets from the exposure-start position, m.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub photon_offsets: Vec<[f64; 2]>,
}

/// A frame read back from disk.
#[derive(Clone, Debug)]
pub struct StoredFrame {
    pub frame: Frame,
    pub sidecar: FrameSidecar,
    pub path: PathBuf,
}

/// File stem for a frame: exposure in ns and shot index.
pub fn frame_stem(exposure: f64, shot: u64) -> String {
    format!("t{:06}ns_s{:06}", (exposure * 1e9).round() as u64, shot)
}

/// Writes `<dir>/<stem>.png` and `<dir>/<stem>.json`. The sidecar's camera,
/// truth, dropped-event and clip fields are taken from the frame.
pub fn write_frame(dir: &Path, stem: &str, frame: &Frame, sidecar: &FrameSidecar) -> Result<PathBuf> {
    if frame.bias_subtracted.is_some() {
        return Err(Error::invalid("only raw frames are stored"));
    }
    let (rows, cols) = frame.shape();
    let mut bytes = Vec::with_capacity(rows * cols * 2);
    let mut clipped = 0;
    for &c in frame.counts.iter() {
        let v = c.round();
        if !(0.0..=65535.0).contains(&v) {
            clipped += 1;
        }
        bytes.extend_from_slice(&(v.clamp(0.0, 65535.0) as u16).to_be_bytes());
    }
    let png_path = dir.join(format!("{stem}.png"));
    let file = File::create(&png_path).map_err(|e| Error::io(&png_path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::Image(e.to_string()))?;
    w.finish().map_err(|e| Error::Image(e.to_string()))?;

    let meta = FrameSidecar {
        camera: frame.params.clone(),
        truth: frame.truth.clone(),
        dropped_events: frame.dropped_events,
        clipped_pixels: clipped,
        ..sidecar.clone()
    };
    let json_path = dir.join(format!("{stem}.json"));
    write_json(&json_path, &meta)?;
    Ok(png_path)
}

/// Reads a frame from its sidecar path; the PNG shares the stem.
pub fn read_frame(json_path: &Path) -> Result<StoredFrame> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: FrameSidecar = serde_json::from_str(&text)?;
    if sidecar.format != FRAME_FORMAT {
        return Err(Error::invalid(format!("unknown frame format `{}`", sidecar.format)));
    }
    sidecar.camera.validate()?;
    let png_path = json_path.with_extension("png");
    let file = File::open(&png_path).map_err(|e| Error::io(&png_path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Image(format!("{}: expected 16-bit grayscale", png_path.display())));
    }
    let (cols, rows) = (info.width as usize, info.height as usize);
    if [rows, cols] != sidecar.camera.frame_shape {
        return Err(Error::Image(format!(
            "{}: {rows}×{cols} pixels, sidecar says {:?}",
            png_path.display(),
            sidecar.camera.frame_shape
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
    reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let counts: Vec<f64> = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64).collect();
    let counts = Array2::from_shape_vec((rows, cols), counts).map_err(|e| Error::Image(e.to_string()))?;
    let frame = Frame {
        counts,
        params: sidecar.camera.clone(),
        truth: sidecar.truth.clone(),
        dropped_events: sidecar.dropped_events,
        bias_subtracted: None,
    };
    Ok(StoredFrame { frame, sidecar, path: png_path })
}

/// Reads every frame in `dir`, sorted by exposure and shot. Unreadable
/// frames are skipped and reported as warnings.
pub fn read_frames_dir(dir: &Path) -> Result<(Vec<StoredFrame>, Vec<String>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecars: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    let mut frames = Vec::new();
    let mut warnings = Vec::new();
    for p in sidecars {
        match read_frame(&p) {
            Ok(f) => frames.push(f),
            Err(e) => warnings.push(format!("skipping {}: {e}", p.display())),
        }
    }
    if frames.is_empty() {
        let mut msg = format!("no readable frames in {}", dir.display());
        for w in &warnings {
            msg.push_str("\n  ");
            msg.push_str(w);
        }
        return Err(Error::invalid(msg));
    }
    frames.sort_by(|a, b| {
        a.sidecar.exposure.total_cmp(&b.sidecar.exposure).then(a.sidecar.shot.cmp(&b.sidecar.shot))
    });
    Ok((frames, warnings))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a header line followed by one line per row.
pub fn write_csv<I: IntoIterator<Item = String>>(path: &Path, header: &str, rows: I) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: &str| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put(header)?;
    for r in rows {
        put(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
