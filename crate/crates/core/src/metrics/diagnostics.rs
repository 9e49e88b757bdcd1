use std::fmt::Write as _;

use crate::data::{Image, Manifest};
use crate::error::{Error, Result};
use crate::model::DeiqtModel;
use crate::tensor::{Real, Tensor};
use crate::training::TrainLog;

/// Mean pairwise cosine similarity of the `L` quality embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDiagnostics {
    /// `L × L`, row-major.
    pub matrix: Vec<Vec<f64>>,
    /// Per image, max minus min panel score.
    pub spread: Vec<f64>,
}

impl PanelDiagnostics {
    pub fn size(&self) -> usize {
        self.matrix.len()
    }

    /// Mean over entries with `i != j`; zero for a single member.
    pub fn mean_off_diagonal(&self) -> f64 {
        let l = self.size();
        if l < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    sum += self.matrix[i][j];
                }
            }
        }
        sum / (l * (l - 1)) as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "panel={} mean_off_diagonal={} images={}\n",
            self.size(),
            self.mean_off_diagonal(),
            self.spread.len()
        );
        for (i, row) in self.matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "row={i} {}", cells.join(" "));
        }
        for (i, s) in self.spread.iter().enumerate() {
            let _ = writeln!(out, "image={i} spread={s}");
        }
        out
    }
}

pub(crate) fn cosine_matrix(rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("quality embedding {i} has zero norm")));
    }
    let l = rows.len();
    let mut m = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in i..l {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            let c = if i == j { 1.0 } else { (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0) };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Cosine similarity of the quality embeddings on each image's center crop,
/// averaged over the manifest.
pub fn panel_cosine<T: Real>(model: &DeiqtModel<T>, manifest: &Manifest) -> Result<PanelDiagnostics> {
    if manifest.is_empty() {
        return Err(Error::Data("panel_cosine needs at least one image".into()));
    }
    let crop = model.config().crop_size;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut spread = Vec::with_capacity(manifest.len());
    for s in manifest.samples() {
        let img = s.image.load()?.center_crop(crop)?;
        let pred = model.predict(&img.to_tensor())?;
        let q = pred.quality_embeddings.to_f64_vec();
        let d = pred.quality_embeddings.cols();
        let rows: Vec<&[f64]> = q.chunks(d).collect();
        let m = cosine_matrix(&rows)?;
        match &mut acc {
            None => acc = Some(m),
            Some(a) => {
                for (ra, rm) in a.iter_mut().zip(&m) {
                    for (x, y) in ra.iter_mut().zip(rm) {
                        *x += y;
                    }
                }
            }
        }
        let scores: Vec<f64> = pred.panel_scores.iter().map(|v| v.as_f64()).collect();
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        spread.push(hi - lo);
    }
    let n = manifest.len() as f64;
    let mut matrix = acc.expect("non-empty manifest");
    for (i, row) in matrix.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 1.0 } else { *v / n };
        }
    }
    Ok(PanelDiagnostics { matrix, spread })
}

/// CLS gradient histogram for one logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHistogram {
    pub step: u64,
    pub counts: Vec<usize>,
    /// Population variance of the gradient entries.
    pub variance: f64,
}

/// Histograms over shared bin edges for a whole training log.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHistograms {
    /// `bins + 1` increasing edges, symmetric around zero.
    pub edges: Vec<f64>,
    pub steps: Vec<GradHistogram>,
}

impl GradHistograms {
    pub fn variances(&self) -> Vec<f64> {
        self.steps.iter().map(|h| h.variance).collect()
    }

    pub fn to_text(&self) -> String {
        let edges: Vec<String> = self.edges.iter().map(|e| format!("{e:e}")).collect();
        let mut out = format!("edges={}\n", edges.join(","));
        for h in &self.steps {
            let counts: Vec<String> = h.counts.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "step={} variance={} counts={}", h.step, h.variance, counts.join(","));
        }
        out
    }
}

/// Bin index for `v` on `edges`; the last bin is closed on the right.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Histograms of the per-step CLS gradient entries on `bins` equal-width
/// bins spanning `[-M, M]`, `M` the largest magnitude anywhere in the log.
pub fn cls_grad_stats(log: &TrainLog, bins: usize) -> Result<GradHistograms> {
    let records: Vec<_> = log.records.iter().filter(|r| !r.cls_grad.is_empty()).collect();
    if records.is_empty() {
        return Err(Error::Data("training log has no CLS gradient snapshots".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    for r in &records {
        if let Some(g) = r.cls_grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("CLS gradient {g} at step {}", r.step)));
        }
    }
    let max = records
        .iter()
        .flat_map(|r| r.cls_grad.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let m = if max > 0.0 { max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| -m + 2.0 * m * i as f64 / bins as f64).collect();
    let steps = records
        .iter()
        .map(|r| {
            let mut counts = vec![0; bins];
            for &g in &r.cls_grad {
                counts[bin_of(g, &edges)] += 1;
            }
            let n = r.cls_grad.len() as f64;
            let mean = r.cls_grad.iter().sum::<f64>() / n;
            let variance = r.cls_grad.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
            GradHistogram {
                step: r.step,
                counts,
                variance,
            }
        })
        .collect();
    Ok(GradHistograms { edges, steps })
}

/// Index of the first step whose trailing `window`-mean falls below
/// `fraction` of the mean over the first `window` steps, if any.
pub fn steps_to_decay(series: &[f64], fraction: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    if series.len() < w {
        return None;
    }
    let initial = series[..w].iter().sum::<f64>() / w as f64;
    let mut sum: f64 = series[..w].iter().sum();
    for i in w..series.len() {
        sum += series[i] - series[i - w];
        if sum / (w as f64) < fraction * initial {
            return Some(i);
        }
    }
    None
}

/// Heat map from `[heads, L, N]` attention weights: mean over heads and
/// panel members, laid out on the `grid × grid` patch grid, upsampled by
/// `patch` with nearest neighbor, and divided by its maximum.
pub fn attention_map_from_weights<T: Real>(weights: &Tensor<T>, grid: usize, patch: usize) -> Result<Tensor<f64>> {
    let s = weights.shape();
    if s.len() != 3 || s[2] != grid * grid {
        return Err(Error::shape(
            "attention_map",
            format!("weights {s:?} for a {grid}x{grid} grid"),
        ));
    }
    let (heads, l, n) = (s[0], s[1], s[2]);
    let w = weights.to_f64_vec();
    let mut cell = vec![0.0; n];
    for row in w.chunks(n) {
        for (c, v) in cell.iter_mut().zip(row) {
            *c += v;
        }
    }
    let denom = (heads * l) as f64;
    for c in &mut cell {
        *c /= denom;
    }
    let max = cell.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate("attention weights are all zero".into()));
    }
    let side = grid * patch;
    Ok(Tensor::from_fn([side, side], |i| {
        let (y, x) = (i / side, i % side);
        cell[(y / patch) * grid + x / patch] / max
    }))
}

/// Attention heat map of the last decoder layer over the center crop.
pub fn attention_map<T: Real>(model: &DeiqtModel<T>, image: &Image) -> Result<Tensor<f64>> {
    let cfg = model.config();
    if !cfg.variant.has_decoder() {
        return Err(Error::Contract(format!(
            "variant {} has no decoder attention to map",
            cfg.variant
        )));
    }
    let crop = image.center_crop(cfg.crop_size)?;
    let pred = model.predict(&crop.to_tensor())?;
    let last = pred.attention_maps.last().expect("decoder depth >= 1");
    attention_map_from_weights(last, cfg.grid(), cfg.patch_size)
}
