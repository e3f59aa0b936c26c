//! Synthetic gaze-annotated shortcut-learning benchmark.
//!
//! Each image is smoothed noise; positives carry one faint Gaussian lesion.
//! A bright corner tag co-occurs with the positive label with correlation
//! `rho_train` in the training split and `rho_test` in the test split.
//! Gaze fixations cluster on the lesion for positives and are short and
//! scattered for negatives.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{load_gaze_csv, save_gaze_csv, Fixation, GazeRecord};
use crate::pgm::{dequantize, load_pgm16, quantize, save_pgm16};
use crate::rng::{derive_seed, normal, rng_from_seed, SeededRng};
use crate::tensor::Tensor;

const STREAM_SAMPLE: u64 = 0x5341_4d50;
const STREAM_SPLIT: u64 = 0x5350_4c54;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Fraction of positives in each split.
    pub positive_fraction: f64,
    pub rho_train: f64,
    pub rho_test: f64,
    pub background_mean: f64,
    pub background_std: f64,
    /// Gaussian blur applied to the background noise, in pixels.
    pub background_smoothing: f64,
    pub lesion_amplitude: [f64; 2],
    pub lesion_sigma: [f64; 2],
    pub tag_size: usize,
    pub tag_intensity: f64,
    /// Fixations per positive image, inclusive range.
    pub lesion_fixations: [usize; 2],
    /// Fixations per negative image, inclusive range.
    pub scatter_fixations: [usize; 2],
    pub lesion_duration_ms: [f64; 2],
    pub scatter_duration_ms: [f64; 2],
    /// Standard deviation of fixation scatter around the lesion centre.
    pub fixation_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            train_size: 2000,
            test_size: 500,
            positive_fraction: 0.5,
            rho_train: 0.95,
            rho_test: 0.0,
            background_mean: 0.35,
            background_std: 0.08,
            background_smoothing: 1.0,
            lesion_amplitude: [0.12, 0.2],
            lesion_sigma: [1.5, 2.5],
            tag_size: 3,
            tag_intensity: 0.95,
            lesion_fixations: [3, 5],
            scatter_fixations: [4, 7],
            lesion_duration_ms: [200.0, 600.0],
            scatter_duration_ms: [40.0, 120.0],
            fixation_jitter: 1.0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0] >= lo && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::Config(format!(
            "dataset.{name} must be an ordered range ≥ {lo}, got {r:?}"
        )));
    }
    Ok(())
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::contract(
                "generate_dataset",
                "train_size and test_size must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::contract(
                "generate_dataset",
                "positive_fraction must lie in [0, 1]",
            ));
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(-1.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("dataset.{name} must lie in [-1, 1]")));
            }
        }
        let margin = self.tag_size + 3;
        if self.image_size < 2 * margin + 2 {
            return Err(Error::Config(format!(
                "dataset.image_size {} is too small",
                self.image_size
            )));
        }
        check_range("lesion_amplitude", self.lesion_amplitude, 0.0)?;
        check_range("lesion_sigma", self.lesion_sigma, 1e-6)?;
        check_range("lesion_duration_ms", self.lesion_duration_ms, 0.0)?;
        check_range("scatter_duration_ms", self.scatter_duration_ms, 0.0)?;
        for (name, r) in [
            ("lesion_fixations", self.lesion_fixations),
            ("scatter_fixations", self.scatter_fixations),
        ] {
            if r[0] == 0 || r[1] < r[0] {
                return Err(Error::Config(format!("dataset.{name} must be an ordered range ≥ 1")));
            }
        }
        if !(self.background_std >= 0.0 && self.background_smoothing >= 0.0 && self.fixation_jitter >= 0.0) {
            return Err(Error::Config("dataset noise parameters must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]` on the 16-bit grid.
    pub image: Tensor,
    pub label: usize,
    pub gaze: GazeRecord,
    pub shortcut_tag_present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

fn uniform(rng: &mut SeededRng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Separable Gaussian blur of an `n × n` image with clamped edges.
fn blur(data: &mut [f64], n: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], dst: &mut [f64], horizontal: bool| {
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let off = k as isize - radius;
                    let idx = if horizontal {
                        r * n + (c as isize + off).clamp(0, n as isize - 1) as usize
                    } else {
                        (r as isize + off).clamp(0, n as isize - 1) as usize * n + c
                    };
                    acc += w * src[idx];
                }
                dst[r * n + c] = acc / norm;
            }
        }
    };
    let mut tmp = vec![0.0; data.len()];
    pass(data, &mut tmp, true);
    pass(&tmp, data, false);
}

/// Draws one sample. `positive` and `tagged` are fixed by the caller so the
/// class balance and tag correlation are exact.
pub fn generate_sample(cfg: &DatasetConfig, id: String, positive: bool, tagged: bool, seed: u64) -> SyntheticSample {
    let n = cfg.image_size;
    let mut rng = rng_from_seed(seed);
    let mut noise: Vec<f64> = (0..n * n).map(|_| normal(&mut rng)).collect();
    blur(&mut noise, n, cfg.background_smoothing);
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let sd = (noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / noise.len() as f64).sqrt();
    let scale = if sd > 0.0 { cfg.background_std / sd } else { 0.0 };
    let mut img: Vec<f64> = noise.iter().map(|v| cfg.background_mean + (v - mean) * scale).collect();

    // lesion centres and fixations stay clear of the tag corner
    let lo = (cfg.tag_size + 3) as f64;
    let hi = (n - 4) as f64;
    let mut fixations = Vec::new();
    if positive {
        let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let amp = uniform(&mut rng, cfg.lesion_amplitude);
        let sigma = uniform(&mut rng, cfg.lesion_sigma);
        for r in 0..n {
            for c in 0..n {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                img[r * n + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let k = rng.random_range(cfg.lesion_fixations[0]..=cfg.lesion_fixations[1]);
        for _ in 0..k {
            fixations.push(Fixation {
                x: cx + cfg.fixation_jitter * normal(&mut rng),
                y: cy + cfg.fixation_jitter * normal(&mut rng),
                duration: uniform(&mut rng, cfg.lesion_duration_ms),
            });
        }
    } else {
        let k = rng.random_range(cfg.scatter_fixations[0]..=cfg.scatter_fixations[1]);
        for _ in 0..k {
            fixations.push(Fixation {
                x: rng.random_range(lo..hi),
                y: rng.random_range(lo..hi),
                duration: uniform(&mut rng, cfg.scatter_duration_ms),
            });
        }
    }
    if tagged {
        for r in 1..1 + cfg.tag_size {
            for c in 1..1 + cfg.tag_size {
                img[r * n + c] = cfg.tag_intensity;
            }
        }
    }
    for f in &mut fixations {
        f.x = round_coord(f.x.clamp(0.0, (n - 1) as f64));
        f.y = round_coord(f.y.clamp(0.0, (n - 1) as f64));
        f.duration = f.duration.round();
    }
    let data = img.into_iter().map(|v| dequantize(quantize(v))).collect();
    SyntheticSample {
        gaze: GazeRecord {
            image_id: id.clone(),
            fixations,
        },
        id,
        image: Tensor::new([1, n, n], data).expect("image shape"),
        label: positive as usize,
        shortcut_tag_present: tagged,
    }
}

/// Coordinates are kept to two decimals so they survive the CSV text form.
fn round_coord(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn generate_split(cfg: &DatasetConfig, split: Split, size: usize, rho: f64, seed: u64) -> Vec<SyntheticSample> {
    let n_pos = (size as f64 * cfg.positive_fraction).round() as usize;
    let n_neg = size - n_pos;
    let tag_pos = (n_pos as f64 * (1.0 + rho) / 2.0).round() as usize;
    let tag_neg = (n_neg as f64 * (1.0 - rho) / 2.0).round() as usize;
    let mut slots: Vec<(bool, bool)> = (0..n_pos)
        .map(|i| (true, i < tag_pos))
        .chain((0..n_neg).map(|i| (false, i < tag_neg)))
        .collect();
    slots.shuffle(&mut rng_from_seed(derive_seed(seed, STREAM_SPLIT, split.stream())));
    slots
        .into_iter()
        .enumerate()
        .map(|(i, (positive, tagged))| {
            let sub = derive_seed(seed, STREAM_SAMPLE + split.stream(), i as u64);
            generate_sample(cfg, format!("{}-{i:05}", split.name()), positive, tagged, sub)
        })
        .collect()
}

/// Deterministic train and test splits for `seed`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_split(cfg, Split::Train, cfg.train_size, cfg.rho_train, seed),
        test: generate_split(cfg, Split::Test, cfg.test_size, cfg.rho_test, seed),
    })
}

/// Pearson correlation between tag presence and label.
pub fn tag_label_correlation(samples: &[SyntheticSample]) -> f64 {
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| s.shortcut_tag_present as u8 as f64).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub generator: DatasetConfig,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    image_id: String,
    label: usize,
    shortcut_tag: u8,
}

fn write_split(dir: &Path, split: Split, samples: &[SyntheticSample]) -> Result<()> {
    let sub = dir.join(split.name());
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let labels_path = sub.join("labels.csv");
    let file = std::fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let err = |e: csv::Error| Error::format("labels csv", e.to_string());
    for s in samples {
        save_pgm16(sub.join(format!("{}.pgm", s.id)), &s.image)?;
        w.serialize(LabelRow {
            image_id: s.id.clone(),
            label: s.label,
            shortcut_tag: s.shortcut_tag_present as u8,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    let gaze: Vec<GazeRecord> = samples.iter().map(|s| s.gaze.clone()).collect();
    save_gaze_csv(sub.join("gaze.csv"), &gaze)
}

/// Writes `manifest.json` plus a `train/` and `test/` directory, each with
/// 16-bit PGM images, `labels.csv` and `gaze.csv`.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset, cfg: &DatasetConfig, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_split(dir, Split::Train, &data.train)?;
    write_split(dir, Split::Test, &data.test)?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        seed,
        generator: cfg.clone(),
        train_size: data.train.len(),
        test_size: data.test.len(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_split(dir: &Path, split: Split) -> Result<Vec<SyntheticSample>> {
    let sub = dir.join(split.name());
    let labels_path = sub.join("labels.csv");
    let file = std::fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    let gaze = load_gaze_csv(sub.join("gaze.csv"))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::format("labels csv", e.to_string()))?;
        let img = load_pgm16(sub.join(format!("{}.pgm", row.image_id)))?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let record = gaze
            .iter()
            .find(|g| g.image_id == row.image_id)
            .cloned()
            .unwrap_or_else(|| GazeRecord {
                image_id: row.image_id.clone(),
                fixations: Vec::new(),
            });
        out.push(SyntheticSample {
            id: row.image_id,
            image: img.reshape([1, h, w])?,
            label: row.label,
            gaze: record,
            shortcut_tag_present: row.shortcut_tag != 0,
        });
    }
    Ok(out)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if m.schema_version != MANIFEST_SCHEMA {
        return Err(Error::format(
            "manifest",
            format!("unsupported schema {}", m.schema_version),
        ));
    }
    Ok(m)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m = load_manifest(dir)?;
    let data = Dataset {
        train: read_split(dir, Split::Train)?,
        test: read_split(dir, Split::Test)?,
    };
    if data.train.len() != m.train_size || data.test.len() != m.test_size {
        return Err(Error::format("dataset", "split sizes disagree with manifest.json"));
    }
    Ok(data)
}
