//! On-disk dataset layout, ingestion and a seed-deterministic synthetic
//! generator.
//!
//! ```text
//! <root>/
//!   labels.csv                 id,label   (label in 0..3)
//!   excluded_channels.txt      optional, one channel name per line
//!   samples/<id>/frames/frame_000.png … frame_029.png   224×224
//!   samples/<id>/fnirs.csv     HbO_01..HbO_24,HbR_01..HbR_24, one row per time step
//! ```
//!
//! Frames are validated at ingestion but decoded lazily; thirty full
//! `f64` frames per sample would not fit in memory for even modest sets.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::waveform::{Modality, Series, SIZE};

pub const FRAMES_PER_SAMPLE: usize = 30;
pub const CHANNELS_PER_GROUP: usize = 24;
pub const NUM_CLASSES: usize = 3;

pub const LABELS_FILE: &str = "labels.csv";
pub const EXCLUDED_FILE: &str = "excluded_channels.txt";
pub const SAMPLES_DIR: &str = "samples";
pub const FNIRS_FILE: &str = "fnirs.csv";

pub fn hbo_name(i: usize) -> String {
    format!("HbO_{:02}", i + 1)
}

pub fn hbr_name(i: usize) -> String {
    format!("HbR_{:02}", i + 1)
}

/// The 48 expected fNIRS column names, HbO first.
pub fn channel_names() -> Vec<String> {
    (0..CHANNELS_PER_GROUP)
        .map(hbo_name)
        .chain((0..CHANNELS_PER_GROUP).map(hbr_name))
        .collect()
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

/// One labelled recording.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub frame_paths: Vec<PathBuf>,
    /// Usable HbO channels as `(column name, series)`, exclusions removed.
    pub hbo: Vec<(String, Series)>,
    pub hbr: Vec<(String, Series)>,
}

impl Sample {
    /// Decodes every frame into a `[3, 224, 224]` tensor in `[0, 1]`.
    pub fn load_frames(&self) -> Result<Vec<Tensor>> {
        self.frame_paths.iter().map(|p| load_frame(p)).collect()
    }

    pub fn hbo_series(&self) -> Vec<Series> {
        self.hbo.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn hbr_series(&self) -> Vec<Series> {
        self.hbr.iter().map(|(_, s)| s.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub excluded: Vec<String>,
}

impl Dataset {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a 224×224 PNG as a `[3, 224, 224]` tensor.
pub fn load_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != SIZE || img.height() as usize != SIZE {
        return Err(Error::Data(format!(
            "{}: frame is {}x{}, expected {SIZE}x{SIZE}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let plane = SIZE * SIZE;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, SIZE, SIZE], data)
}

fn data_err<T>(msg: String) -> Result<T> {
    Err(Error::Data(msg))
}

/// Channel names listed in `excluded_channels.txt`; blank lines and `#`
/// comments are ignored. A missing file means no exclusions.
pub fn read_exclusions(root: &Path) -> Result<Vec<String>> {
    let path = root.join(EXCLUDED_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let known = channel_names();
    let mut out = Vec::new();
    for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let name = line.split('#').next().unwrap_or("").trim();
        if name.is_empty() {
            continue;
        }
        if !known.iter().any(|k| k == name) {
            return data_err(format!("{EXCLUDED_FILE} line {}: unknown channel {name:?}", n + 1));
        }
        if !out.iter().any(|o| o == name) {
            out.push(name.to_string());
        }
    }
    Ok(out)
}

/// `(id, label)` pairs from `labels.csv`.
pub fn read_labels(root: &Path) -> Result<Vec<(String, usize)>> {
    let path = root.join(LABELS_FILE);
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return data_err(format!("{LABELS_FILE} row {}: expected id,label", r + 1));
        };
        let label: usize = label
            .trim()
            .parse()
            .ok()
            .filter(|&l| l < NUM_CLASSES)
            .ok_or_else(|| Error::Data(format!("{LABELS_FILE} row {}: sample {id}: bad label {label:?}", r + 1)))?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

/// Parses `fnirs.csv` into 48 columns (in header order HbO_01..HbR_24).
pub fn read_fnirs(path: &Path, id: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("sample {id}: {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected = channel_names();
    if header.len() != expected.len() {
        return data_err(format!(
            "sample {id}: fnirs.csv has {} columns, expected {}",
            header.len(),
            expected.len()
        ));
    }
    let order: Vec<usize> = expected
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("sample {id}: fnirs.csv lacks column {name}")))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); expected.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return data_err(format!(
                "sample {id}: fnirs.csv row {row} has {} fields, expected {}",
                rec.len(),
                header.len()
            ));
        }
        for (c, &src) in order.iter().enumerate() {
            let v: f64 = rec[src].trim().parse().map_err(|_| {
                Error::Data(format!("sample {id}: fnirs.csv row {row}: bad value {:?}", &rec[src]))
            })?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

/// Loads and validates a dataset rooted at `root`.
pub fn ingest(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let excluded = read_exclusions(root)?;
    let labels = read_labels(root)?;
    if labels.is_empty() {
        return data_err(format!("{}: no labelled samples", root.display()));
    }
    let names = channel_names();
    let mut samples = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        let dir = root.join(SAMPLES_DIR).join(&id);
        if !dir.is_dir() {
            return data_err(format!("sample {id}: directory {} is missing", dir.display()));
        }
        let mut frame_paths = Vec::with_capacity(FRAMES_PER_SAMPLE);
        for i in 0..FRAMES_PER_SAMPLE {
            let p = dir.join("frames").join(frame_name(i));
            let (w, h) = image::image_dimensions(&p)
                .map_err(|e| Error::Data(format!("sample {id}: frame {i}: {e}")))?;
            if w as usize != SIZE || h as usize != SIZE {
                return data_err(format!("sample {id}: frame {i} is {w}x{h}, expected {SIZE}x{SIZE}"));
            }
            frame_paths.push(p);
        }
        let cols = read_fnirs(&dir.join(FNIRS_FILE), &id)?;
        let mut hbo = Vec::new();
        let mut hbr = Vec::new();
        for (c, values) in cols.into_iter().enumerate() {
            let name = &names[c];
            if excluded.contains(name) {
                continue;
            }
            let kind = if c < CHANNELS_PER_GROUP { Modality::FnirsHbo } else { Modality::FnirsHbr };
            let series = Series::new(values, kind).map_err(|e| Error::Data(format!("sample {id}: {name}: {e}")))?;
            if c < CHANNELS_PER_GROUP {
                hbo.push((name.clone(), series));
            } else {
                hbr.push((name.clone(), series));
            }
        }
        samples.push(Sample {
            id,
            label,
            frame_paths,
            hbo,
            hbr,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        samples,
        excluded,
    })
}

// ------------------------------------------------------------- synthetic

/// Generator settings for a class-separable synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub seed: u64,
    /// Amplitude of the uniform noise added to frames and fNIRS; smaller is
    /// easier.
    pub noise: f64,
    pub frames: usize,
    /// Time steps per fNIRS channel.
    pub fnirs_len: usize,
    /// Written to `excluded_channels.txt` when non-empty.
    pub excluded: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 10,
            seed: 0,
            noise: 0.1,
            frames: FRAMES_PER_SAMPLE,
            fnirs_len: 120,
            excluded: Vec::new(),
        }
    }
}

/// Frames as interleaved RGB bytes plus the 48 fNIRS columns.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Vec<u8>>,
    pub fnirs: Vec<Vec<f64>>,
}

impl RawSample {
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        let plane = SIZE * SIZE;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in self.frames[i].chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(&[3, SIZE, SIZE], data).expect("frame shape")
    }

    pub fn frame_tensors(&self) -> Vec<Tensor> {
        (0..self.frames.len()).map(|i| self.frame_tensor(i)).collect()
    }

    /// Usable channels after dropping `excluded` names, split by group.
    pub fn series(&self, excluded: &[String]) -> Result<(Vec<Series>, Vec<Series>)> {
        let names = channel_names();
        let mut hbo = Vec::new();
        let mut hbr = Vec::new();
        for (c, col) in self.fnirs.iter().enumerate() {
            if excluded.contains(&names[c]) {
                continue;
            }
            if c < CHANNELS_PER_GROUP {
                hbo.push(Series::new(col.clone(), Modality::FnirsHbo)?);
            } else {
                hbr.push(Series::new(col.clone(), Modality::FnirsHbr)?);
            }
        }
        Ok((hbo, hbr))
    }
}

fn sample_id(label: usize, i: usize) -> String {
    format!("c{label}_{i:04}")
}

/// Class textures: horizontal grating, vertical grating, checkerboard.
fn texture(label: usize, x: f64, y: f64, phase: f64) -> f64 {
    use std::f64::consts::TAU;
    match label {
        0 => (TAU * y / 16.0 + phase).sin(),
        1 => (TAU * x / 16.0 + phase).sin(),
        _ => (TAU * x / 32.0 + phase).sin().signum() * (TAU * y / 32.0).sin().signum(),
    }
}

/// Generates sample `index` of class `label`. Each sample draws from its
/// own rng stream so any subset can be regenerated independently.
pub fn synth_sample(spec: &SyntheticSpec, label: usize, index: usize) -> RawSample {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((label * 1_000_003 + index) as u64);
    let phase = rng.gen_range(0.0..TAU);
    let tint: [f64; 3] = [rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0)];
    let frames = (0..spec.frames)
        .map(|f| {
            let drift = phase + f as f64 * 0.05;
            let mut buf = Vec::with_capacity(3 * SIZE * SIZE);
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let t = texture(label, x as f64, y as f64, drift);
                    for tc in tint {
                        let v = 0.5 + 0.35 * t * tc + spec.noise * rng.gen_range(-1.0..1.0);
                        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            buf
        })
        .collect();
    // Cycles over the window: distinct dominant frequencies per class.
    let freq = [1.0, 3.0, 6.0][label.min(2)];
    let amp = [0.5, 1.0, 1.5][label.min(2)];
    let n = spec.fnirs_len;
    let fnirs = (0..2 * CHANNELS_PER_GROUP)
        .map(|c| {
            let ph = rng.gen_range(0.0..TAU);
            let sign = if c < CHANNELS_PER_GROUP { 1.0 } else { -0.5 };
            (0..n)
                .map(|t| {
                    let u = t as f64 / n as f64;
                    sign * amp * ((TAU * freq * u + ph).sin() + 0.3 * (TAU * 2.0 * freq * u + ph).sin())
                        + spec.noise * amp * rng.gen_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();
    RawSample {
        id: sample_id(label, index),
        label,
        frames,
        fnirs,
    }
}

/// All samples of `spec`, interleaved by class.
pub fn synth_all(spec: &SyntheticSpec) -> impl Iterator<Item = RawSample> + '_ {
    (0..spec.per_class).flat_map(move |i| (0..NUM_CLASSES).map(move |l| synth_sample(spec, l, i)))
}

fn write_fnirs(path: &Path, cols: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(channel_names())?;
    for t in 0..cols[0].len() {
        w.write_record(cols.iter().map(|c| c[t].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one sample's directory under `root`.
pub fn write_sample(root: &Path, s: &RawSample) -> Result<()> {
    let dir = root.join(SAMPLES_DIR).join(&s.id);
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for (i, f) in s.frames.iter().enumerate() {
        image::save_buffer(frames.join(frame_name(i)), f, SIZE as u32, SIZE as u32, image::ExtendedColorType::Rgb8)?;
    }
    write_fnirs(&dir.join(FNIRS_FILE), &s.fnirs)
}

/// Writes the full synthetic dataset to `out_dir`; same spec, same bytes.
pub fn synth(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<()> {
    let root = out_dir.as_ref();
    fs::create_dir_all(root.join(SAMPLES_DIR))?;
    let mut labels = csv::Writer::from_path(root.join(LABELS_FILE))?;
    labels.write_record(["id", "label"])?;
    for s in synth_all(spec) {
        write_sample(root, &s)?;
        labels.write_record([s.id.as_str(), &s.label.to_string()])?;
    }
    labels.flush()?;
    let excl = root.join(EXCLUDED_FILE);
    if spec.excluded.is_empty() {
        if excl.exists() {
            fs::remove_file(excl)?;
        }
    } else {
        let mut f = fs::File::create(excl)?;
        for name in &spec.excluded {
            writeln!(f, "{name}")?;
        }
    }
    Ok(())
}
