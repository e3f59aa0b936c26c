//! Classification metrics and attention–gaze SSIM.

use crate::error::{Error, Result};
use crate::gaze::{pool_mask, GazeMask};
use crate::tensor::Tensor;

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_len("accuracy", predictions.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::contract("accuracy", "empty split"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary F1 of class 1; zero when there are no true positives.
pub fn f1_score(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_len("f1_score", predictions.len(), labels.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    })
}

/// ROC AUC as the Mann–Whitney statistic with midranks for ties. `None`
/// when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<Option<f64>> {
    check_len("roc_auc", scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean SSIM over every full 11×11 Gaussian window (σ 1.5), dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::dim("ssim", a.shape(), b.shape()));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("{h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = win[i * SSIM_WINDOW + j];
                    let (xv, yv) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                    mx += k * xv;
                    my += k * yv;
                    sxx += k * xv * xv;
                    syy += k * yv * yv;
                    sxy += k * xv * yv;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn peak_normalize(v: &mut [f64]) {
    let peak = v.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        v.iter_mut().for_each(|x| *x /= peak);
    }
}

/// Nearest-neighbour upsampling of a `[h, w]` grid by an integer factor.
pub fn upsample(grid: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let (oh, ow) = (h * factor, w * factor);
    Tensor::from_fn([oh, ow], |i| grid.data()[(i / ow / factor) * w + (i % ow) / factor])
}

/// Attention received per token (column sums of an `[N, N]` map), peak
/// normalised and laid out on the `grid × grid` patch grid.
pub fn attention_grid(attention: &Tensor, grid: usize) -> Result<Tensor> {
    let n = grid * grid;
    if attention.shape() != [n, n] {
        return Err(Error::dim("attention_grid", attention.shape(), &[n, n]));
    }
    let mut cols = vec![0.0; n];
    for row in attention.data().chunks(n) {
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    peak_normalize(&mut cols);
    Tensor::new([grid, grid], cols)
}

/// Patch-pooled gaze mass, peak normalised, `[H/p, W/p]`.
pub fn gaze_grid(mask: &GazeMask, patch: usize) -> Result<Tensor> {
    let mut pooled = pool_mask(mask, patch)?.into_data();
    peak_normalize(&mut pooled);
    Tensor::new([mask.height() / patch, mask.width() / patch], pooled)
}

/// SSIM between a model attention map and a gaze mask, both reduced to the
/// patch grid and upsampled back to image resolution.
pub fn attention_gaze_ssim(attention: &Tensor, mask: &GazeMask, patch: usize) -> Result<f64> {
    let g = gaze_grid(mask, patch)?;
    let a = attention_grid(attention, g.shape()[0])?;
    ssim(&upsample(&a, patch), &upsample(&g, patch))
}
