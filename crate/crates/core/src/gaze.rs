//! Eye-gaze guidance: fixation heatmaps, gaze-mask image enhancement,
//! gaze-derived token attention and the attention alignment loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    /// Pixel column.
    pub x: f64,
    /// Pixel row.
    pub y: f64,
    /// Milliseconds.
    pub duration: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeRecord {
    pub image_id: String,
    pub fixations: Vec<Fixation>,
}

/// Peak-normalised gaze density `[H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMask {
    pub mask: Tensor,
}

impl GazeMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        GazeMask {
            mask: Tensor::zeros([h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// Duration-weighted sum of isotropic Gaussians centred on the fixations,
/// peak-normalised. Out-of-bounds fixations are clamped to the border. When
/// every duration is zero the fixations are weighted equally.
pub fn heatmap_from_fixations(record: &GazeRecord, sigma: f64, h: usize, w: usize) -> Result<GazeMask> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(
            "heatmap_from_fixations",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    if let Some(f) = record
        .fixations
        .iter()
        .find(|f| f.duration.is_nan() || f.duration < 0.0 || !f.x.is_finite() || !f.y.is_finite())
    {
        return Err(Error::contract(
            "heatmap_from_fixations",
            format!("invalid fixation {f:?} in {}", record.image_id),
        ));
    }
    let mut mask = Tensor::zeros([h, w]);
    if record.fixations.is_empty() || h == 0 || w == 0 {
        return Ok(GazeMask { mask });
    }
    let uniform = record.fixations.iter().all(|f| f.duration == 0.0);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = mask.data_mut();
    for f in &record.fixations {
        let fx = f.x.clamp(0.0, (w - 1) as f64);
        let fy = f.y.clamp(0.0, (h - 1) as f64);
        let weight = if uniform { 1.0 } else { f.duration };
        for r in 0..h {
            let dy = r as f64 - fy;
            for c in 0..w {
                let dx = c as f64 - fx;
                data[r * w + c] += weight * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    let peak = data.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        data.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(GazeMask { mask })
}

fn check_mask(op: &'static str, image: &Tensor, mask: &GazeMask) -> Result<()> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2..] != *mask.mask.shape() {
        return Err(Error::dim(op, s, mask.mask.shape()));
    }
    Ok(())
}

/// `I ⊙ (1 + αM)` without clipping. The mask is broadcast over every
/// leading axis of `image` (`[..., H, W]`).
pub fn apply_gaze_mask_raw(image: &Tensor, mask: &GazeMask, alpha: f64) -> Result<Tensor> {
    check_mask("apply_gaze_mask", image, mask)?;
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::contract(
            "apply_gaze_mask",
            format!("alpha must be nonnegative, got {alpha}"),
        ));
    }
    let m = mask.mask.data();
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(m.len().max(1)) {
        for (v, &mv) in plane.iter_mut().zip(m) {
            *v *= 1.0 + alpha * mv;
        }
    }
    Ok(out)
}

/// [`apply_gaze_mask_raw`] followed by clipping to the `[0, 1]` image range.
pub fn apply_gaze_mask(image: &Tensor, mask: &GazeMask, alpha: f64) -> Result<Tensor> {
    Ok(apply_gaze_mask_raw(image, mask, alpha)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Mask mass summed per `patch × patch` cell, `[H/p, W/p]`.
pub fn pool_mask(mask: &GazeMask, patch: usize) -> Result<Tensor> {
    let (h, w) = (mask.height(), mask.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(
            "gaze_token_attention",
            format!("{h}×{w} mask is not divisible into {patch}×{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros([gh, gw]);
    let m = mask.mask.data();
    let o = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            o[(r / patch) * gw + c / patch] += m[r * w + c];
        }
    }
    Ok(out)
}

/// Patch-pooled gaze as a probability vector over the `N` tokens; uniform
/// when the mask is empty.
pub fn gaze_distribution(mask: &GazeMask, patch: usize) -> Result<Vec<f64>> {
    let pooled = pool_mask(mask, patch)?.into_data();
    let total: f64 = pooled.iter().sum();
    let n = pooled.len();
    Ok(if total > 0.0 {
        pooled.into_iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    })
}

/// Gaze attention target `A_g`: every row is the gaze distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTokenAttention {
    pub matrix: Tensor,
}

pub fn gaze_token_attention(mask: &GazeMask, patch: usize) -> Result<GazeTokenAttention> {
    let g = gaze_distribution(mask, patch)?;
    let n = g.len();
    let matrix = Tensor::from_fn([n, n], |i| g[i % n]);
    Ok(GazeTokenAttention { matrix })
}

/// Mean squared difference between attention maps of equal shape.
pub fn alignment_loss(a_t: &Tensor, a_g: &Tensor) -> Result<f64> {
    if a_t.shape() != a_g.shape() {
        return Err(Error::dim("alignment_loss", a_t.shape(), a_g.shape()));
    }
    let n = a_t.numel().max(1) as f64;
    Ok(a_t
        .data()
        .iter()
        .zip(a_g.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// [`alignment_loss`] recorded on a tape; differentiable in `a_t`.
pub fn alignment_loss_on_tape(tape: &mut Tape, a_t: Var, a_g: &Tensor) -> Result<Var> {
    if tape.shape(a_t) != a_g.shape() {
        return Err(Error::dim("alignment_loss", tape.shape(a_t), a_g.shape()));
    }
    tape.mse(a_t, a_g)
}

pub fn total_loss(cls_loss: f64, align_loss: f64, lambda: f64) -> f64 {
    cls_loss + lambda * align_loss
}

/// `cls + λ·align` on a tape.
pub fn total_loss_on_tape(tape: &mut Tape, cls: Var, align: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(align, lambda)?;
    tape.add(cls, weighted)
}

#[derive(Debug, Serialize, Deserialize)]
struct GazeRow {
    image_id: String,
    x: f64,
    y: f64,
    duration_ms: f64,
}

/// Parses `image_id,x,y,duration_ms` rows (header required) into records in
/// first-appearance order.
pub fn read_gaze_csv(reader: impl std::io::Read) -> Result<Vec<GazeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format("gaze csv", e.to_string()))?
        .clone();
    let expected = ["image_id", "x", "y", "duration_ms"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::format(
            "gaze csv",
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut records: Vec<GazeRecord> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for row in rdr.deserialize::<GazeRow>() {
        let row = row.map_err(|e| Error::format("gaze csv", e.to_string()))?;
        if row.duration_ms.is_nan() || row.duration_ms < 0.0 {
            return Err(Error::format(
                "gaze csv",
                format!("negative duration for {}", row.image_id),
            ));
        }
        let i = *index.entry(row.image_id.clone()).or_insert_with(|| {
            records.push(GazeRecord {
                image_id: row.image_id.clone(),
                fixations: Vec::new(),
            });
            records.len() - 1
        });
        records[i].fixations.push(Fixation {
            x: row.x,
            y: row.y,
            duration: row.duration_ms,
        });
    }
    Ok(records)
}

pub fn write_gaze_csv(writer: impl std::io::Write, records: &[GazeRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let err = |e: csv::Error| Error::format("gaze csv", e.to_string());
    w.write_record(["image_id", "x", "y", "duration_ms"]).map_err(err)?;
    for r in records {
        for f in &r.fixations {
            w.serialize(GazeRow {
                image_id: r.image_id.clone(),
                x: f.x,
                y: f.y,
                duration_ms: f.duration,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::format("gaze csv", e.to_string()))
}

pub fn load_gaze_csv(path: impl AsRef<Path>) -> Result<Vec<GazeRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_gaze_csv(std::io::BufReader::new(file))
}

pub fn save_gaze_csv(path: impl AsRef<Path>, records: &[GazeRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_gaze_csv(std::io::BufWriter::new(file), records)
}
