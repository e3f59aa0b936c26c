//! Training loop, evaluation and the ablation sweep.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, save_checkpoint};
use crate::config::{OutputConfig, TrainConfig};
use crate::data::{generate_dataset, load_dataset, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::gaze::{
    alignment_loss_on_tape, apply_gaze_mask, gaze_distribution, heatmap_from_fixations, total_loss_on_tape, GazeMask,
};
use crate::metrics::{accuracy, attention_gaze_ssim, f1_score, roc_auc};
use crate::model::{EgSpikeFormer, ForwardOptions};
use crate::optim::{clip_grad_norm, Sgd};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const METRICS_SCHEMA: u32 = 1;
const STREAM_SHUFFLE: u64 = 0x5348_5546;

/// A split turned into model inputs.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    /// `[C, H, W]` per sample, gaze-enhanced when requested.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub masks: Vec<GazeMask>,
    /// Patch-pooled gaze distribution per sample.
    pub gaze: Vec<Vec<f64>>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_batch(&self, index: &[usize]) -> Tensor {
        stack(index.iter().map(|&i| &self.images[i]))
    }

    /// `[B, N, N]` gaze attention targets.
    pub fn gaze_batch(&self, index: &[usize]) -> Tensor {
        let n = self.gaze.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(index.len() * n * n);
        for &i in index {
            for _ in 0..n {
                data.extend_from_slice(&self.gaze[i]);
            }
        }
        Tensor::new([index.len(), n, n], data).expect("gaze batch shape")
    }
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let mut count = 0;
    for t in items {
        if count == 0 {
            shape = t.shape().to_vec();
        }
        data.extend_from_slice(t.data());
        count += 1;
    }
    shape.insert(0, count);
    Tensor::new(shape, data).expect("stacked shape")
}

/// Builds heatmaps, optional gaze enhancement (gain `alpha`) and token targets.
pub fn prepare_split(samples: &[SyntheticSample], cfg: &TrainConfig, alpha: f64) -> Result<PreparedSplit> {
    let size = cfg.model.image_size;
    let mut out = PreparedSplit {
        images: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        masks: Vec::with_capacity(samples.len()),
        gaze: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        if s.image.shape() != [cfg.model.in_channels, size, size] {
            return Err(Error::dim(
                "prepare_split",
                s.image.shape(),
                &[cfg.model.in_channels, size, size],
            ));
        }
        let mask = heatmap_from_fixations(&s.gaze, cfg.heatmap_sigma(), size, size)?;
        out.images.push(apply_gaze_mask(&s.image, &mask, alpha)?);
        out.gaze.push(gaze_distribution(&mask, cfg.model.patch_size)?);
        out.masks.push(mask);
        out.labels.push(s.label);
    }
    Ok(out)
}

/// Gaze-mask gain used on training images.
pub fn train_alpha(cfg: &TrainConfig) -> f64 {
    if cfg.enable_gm {
        cfg.alpha
    } else {
        0.0
    }
}

/// Gaze-mask gain used on evaluation images.
pub fn test_alpha(cfg: &TrainConfig) -> f64 {
    if cfg.enable_gm && cfg.gm_at_test {
        cfg.alpha
    } else {
        0.0
    }
}

/// Test-split scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    /// Absent when the split holds a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    /// Mean per-image SSIM between token attention and gaze.
    pub ssim: f64,
    #[serde(skip)]
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

pub fn evaluate(
    model: &mut EgSpikeFormer,
    split: &PreparedSplit,
    timesteps: usize,
    batch_size: usize,
) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::contract("evaluate", "empty split"));
    }
    let patch = model.config.patch_size;
    let grid = model.config.grid();
    let mut scores = Vec::with_capacity(split.len());
    let mut predictions = Vec::with_capacity(split.len());
    let mut ssim_sum = 0.0;
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let inf = model.infer(&split.image_batch(chunk), timesteps)?;
        let k = inf.logits.shape()[1];
        let n = grid * grid;
        for (row, &i) in chunk.iter().enumerate() {
            let logits = &inf.logits.data()[row * k..(row + 1) * k];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            scores.push(if k > 1 { (logits[1] - max).exp() / z } else { 1.0 });
            let best = logits
                .iter()
                .enumerate()
                .fold(0, |b, (j, &l)| if l > logits[b] { j } else { b });
            predictions.push(best);
            let att = Tensor::new([n, n], inf.attention.data()[row * n * n..(row + 1) * n * n].to_vec())?;
            ssim_sum += attention_gaze_ssim(&att, &split.masks[i], patch)?;
        }
    }
    let auc = roc_auc(&scores, &split.labels)?;
    if auc.is_none() {
        log::warn!("evaluation split holds a single class; AUC is undefined");
    }
    Ok(Evaluation {
        samples: split.len(),
        accuracy: accuracy(&predictions, &split.labels)?,
        auc,
        f1: f1_score(&predictions, &split.labels)?,
        ssim: ssim_sum / split.len() as f64,
        scores,
        predictions,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub epoch: usize,
    pub cls_loss: f64,
    pub align_loss: f64,
    pub total_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_f1: Option<f64>,
    pub test_ssim: Option<f64>,
    /// Not persisted so that logs of identical runs compare equal.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: EgSpikeFormer,
    pub rows: Vec<MetricsRow>,
    pub evaluation: Evaluation,
}

fn write_rows(out: &OutputConfig, rows: &[MetricsRow]) -> Result<()> {
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let path = out.metrics_path();
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serialises"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if out.metrics_csv {
        let path = path.with_extension("csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format("metrics csv", e.to_string()))?;
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::format("metrics csv", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Trains a fresh model on `data.train` and evaluates on `data.test`. With
/// `output` set, the checkpoint and metrics log are written there, and a
/// non-finite loss or gradient leaves the last completed epoch's weights at
/// [`OutputConfig::last_good_path`].
pub fn train_model(cfg: &TrainConfig, data: &Dataset, output: Option<&OutputConfig>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = prepare_split(&data.train, cfg, train_alpha(cfg))?;
    let test = prepare_split(&data.test, cfg, test_alpha(cfg))?;
    if train.is_empty() {
        return Err(Error::contract("train_model", "empty training split"));
    }
    let mut model = EgSpikeFormer::new(cfg.model.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rows = Vec::new();
    let mut last_good = encode_checkpoint(&model)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut evaluation = None;

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let (mut cls_sum, mut align_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let step = train_step(&mut model, &mut sgd, cfg, &train, batch);
            let loss = match step {
                Ok(v) => v,
                Err(err @ Error::NonFinite(_)) => {
                    if let Some(out) = output {
                        let good = decode_checkpoint(&last_good)?;
                        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
                        save_checkpoint(&good, out.last_good_path())?;
                        write_rows(out, &rows)?;
                        log::error!(
                            "training diverged in epoch {epoch}; wrote {}",
                            out.last_good_path().display()
                        );
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            };
            let b = batch.len() as f64;
            cls_sum += loss.cls * b;
            align_sum += loss.align * b;
            total_sum += loss.total * b;
            seen += batch.len();
        }
        last_good = encode_checkpoint(&model)?;
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let eval = if due {
            Some(evaluate(&mut model, &test, cfg.timesteps, cfg.eval_batch_size)?)
        } else {
            None
        };
        let n = seen as f64;
        let row = MetricsRow {
            schema_version: METRICS_SCHEMA,
            epoch,
            cls_loss: cls_sum / n,
            align_loss: align_sum / n,
            total_loss: total_sum / n,
            test_accuracy: eval.as_ref().map(|e| e.accuracy),
            test_auc: eval.as_ref().and_then(|e| e.auc),
            test_f1: eval.as_ref().map(|e| e.f1),
            test_ssim: eval.as_ref().map(|e| e.ssim),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} (cls {:.4}, align {:.5}){}",
            cfg.epochs,
            row.total_loss,
            row.cls_loss,
            row.align_loss,
            eval.as_ref()
                .map(|e| format!(", test acc {:.3} ssim {:.3}", e.accuracy, e.ssim))
                .unwrap_or_default()
        );
        rows.push(row);
        if eval.is_some() {
            evaluation = eval;
        }
    }

    let evaluation = evaluation.expect("final epoch is evaluated");
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        save_checkpoint(&model, out.checkpoint_path())?;
        write_rows(out, &rows)?;
    }
    Ok(TrainOutcome {
        model,
        rows,
        evaluation,
    })
}

/// Per-batch loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub cls: f64,
    /// Zero when alignment is disabled.
    pub align: f64,
    pub total: f64,
}

fn record_loss(
    model: &mut EgSpikeFormer,
    tape: &mut Tape,
    b: &crate::params::Bindings,
    cfg: &TrainConfig,
    split: &PreparedSplit,
    batch: &[usize],
) -> Result<(Var, BatchLoss)> {
    let images = split.image_batch(batch);
    let labels: Vec<usize> = batch.iter().map(|&i| split.labels[i]).collect();
    let out = model.forward(tape, b, &images, ForwardOptions::train(cfg.timesteps))?;
    let cls = tape.softmax_cross_entropy(out.logits, &labels)?;
    let (total, align) = if cfg.enable_alh {
        let align = alignment_loss_on_tape(tape, out.attention, &split.gaze_batch(batch))?;
        (
            total_loss_on_tape(tape, cls, align, cfg.lambda_loss)?,
            tape.value(align).item(),
        )
    } else {
        (cls, 0.0)
    };
    let loss = BatchLoss {
        cls: tape.value(cls).item(),
        align,
        total: tape.value(total).item(),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {}", loss.total)));
    }
    Ok((total, loss))
}

/// Training-mode loss of `model` on `batch` without touching the model.
pub fn batch_loss(
    model: &EgSpikeFormer,
    cfg: &TrainConfig,
    split: &PreparedSplit,
    batch: &[usize],
) -> Result<BatchLoss> {
    let mut probe = model.clone();
    let mut tape = Tape::new();
    let b = probe.params.bind_constants(&mut tape);
    Ok(record_loss(&mut probe, &mut tape, &b, cfg, split, batch)?.1)
}

fn train_step(
    model: &mut EgSpikeFormer,
    sgd: &mut Sgd,
    cfg: &TrainConfig,
    split: &PreparedSplit,
    batch: &[usize],
) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let (total, loss) = record_loss(model, &mut tape, &b, cfg, split, batch)?;
    tape.backward(total)?;
    model.params.pull_grads(&tape, &b)?;
    if cfg.max_grad_norm > 0.0 {
        clip_grad_norm(model.params.tensors_mut(), cfg.max_grad_norm);
    }
    sgd.step_store(&mut model.params)?;
    Ok(loss)
}

/// Loads `cfg.data_dir` or generates the synthetic benchmark from `cfg.seed`.
pub fn dataset_for(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.dataset, cfg.seed),
    }
}

/// One ablation configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub gm: bool,
    pub alh: bool,
    pub timesteps: usize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let parts = match (self.gm, self.alh) {
            (true, true) => "GM+ALH",
            (true, false) => "GM",
            (false, true) => "ALH",
            (false, false) => "none",
        };
        format!("{parts}/T{}", self.timesteps)
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.enable_gm = self.gm;
        cfg.enable_alh = self.alh;
        cfg.timesteps = self.timesteps;
        cfg
    }
}

/// The GM × ALH × timesteps grid.
pub fn ablation_cells(timesteps: &[usize]) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &t in timesteps {
        for gm in [false, true] {
            for alh in [false, true] {
                cells.push(AblationCell { gm, alh, timesteps: t });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub cell: String,
    pub gm: bool,
    pub alh: bool,
    pub timesteps: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub label: String,
    pub runs: usize,
    pub median_accuracy: f64,
    pub median_auc: Option<f64>,
    pub median_f1: f64,
    pub median_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, gm: bool, alh: bool, timesteps: usize) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|s| s.cell == AblationCell { gm, alh, timesteps })
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.runs {
            w.serialize(r)
                .map_err(|e| Error::format("ablation csv", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::format("ablation csv", e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>4} {:>9} {:>9} {:>9} {:>9}\n",
            "cell", "runs", "accuracy", "auc", "f1", "ssim"
        );
        for c in &self.summary {
            let auc = c.median_auc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "{:<14} {:>4} {:>9.4} {:>9} {:>9.4} {:>9.4}\n",
                c.label, c.runs, c.median_accuracy, auc, c.median_f1, c.median_ssim
            ));
        }
        s
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Trains every cell for every seed. Within a seed all cells see the same
/// data and the same initial weights. `on_run` is called after each run.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    base.validate()?;
    let fixed = match &base.data_dir {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        let generated;
        let data = match &fixed {
            Some(d) => d,
            None => {
                generated = generate_dataset(&base.dataset, seed)?;
                &generated
            }
        };
        for cell in cells {
            let mut cfg = cell.apply(base);
            cfg.seed = seed;
            let outcome = train_model(&cfg, data, None)?;
            let e = outcome.evaluation;
            let run = AblationRun {
                cell: cell.label(),
                gm: cell.gm,
                alh: cell.alh,
                timesteps: cell.timesteps,
                seed,
                accuracy: e.accuracy,
                auc: e.auc,
                f1: e.f1,
                ssim: e.ssim,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    let summary = cells
        .iter()
        .map(|cell| {
            let mine: Vec<&AblationRun> = runs
                .iter()
                .filter(|r| r.gm == cell.gm && r.alh == cell.alh && r.timesteps == cell.timesteps)
                .collect();
            let pick =
                |f: fn(&AblationRun) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let aucs: Vec<f64> = mine.iter().filter_map(|r| r.auc).collect();
            CellSummary {
                cell: *cell,
                label: cell.label(),
                runs: mine.len(),
                median_accuracy: pick(|r| r.accuracy),
                median_auc: median(&aucs),
                median_f1: pick(|r| r.f1),
                median_ssim: pick(|r| r.ssim),
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}

/// Writes `report` as `ablation.csv` and `ablation_summary.json` under `dir`.
pub fn save_ablation(dir: &Path, report: &AblationReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("ablation.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(file)?;
    let json_path = dir.join("ablation_summary.json");
    let mut text = serde_json::to_string_pretty(&report.summary).expect("summary serialises");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}
