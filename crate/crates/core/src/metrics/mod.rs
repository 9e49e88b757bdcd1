//! Rank and linear correlation, crop-ensemble evaluation, and model
//! diagnostics (panel similarity, CLS gradient histograms, attention maps).

mod diagnostics;
pub mod svg;

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::model::DeiqtModel;
use crate::tensor::{Real, Rng, Tensor};
use crate::training::sample_crops;

pub use diagnostics::{
    attention_map, attention_map_from_weights, cls_grad_stats, panel_cosine, steps_to_decay, GradHistogram,
    GradHistograms, PanelDiagnostics,
};

/// Fractional (1-based, tie-averaged) ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::shape(
            "correlation",
            format!("{} predictions vs {} labels", pred.len(), label.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::Degenerate(format!("need n >= 2 samples, got {}", pred.len())));
    }
    if let Some(v) = pred.iter().chain(label).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("correlation input {v}")));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate(format!("{what}: predictions have zero variance")));
    }
    if syy == 0.0 {
        return Err(Error::Degenerate(format!("{what}: labels have zero variance")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation with average ranks for ties.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    let (rp, rl) = (average_ranks(pred), average_ranks(label));
    let integral = |r: &[f64]| r.iter().all(|v| v.fract() == 0.0);
    if integral(&rp) && integral(&rl) {
        // no ties: the squared-rank-difference form is exact in floating point
        let n = rp.len() as f64;
        let d2: f64 = rp.iter().zip(&rl).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    pearson(&rp, &rl, "srcc")
}

/// Pearson linear correlation on raw values.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    pearson(pred, label, "plcc")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub srcc: f64,
    pub plcc: f64,
    /// `(prediction, label)` per image, in manifest order.
    pub pairs: Vec<(f64, f64)>,
    pub n: usize,
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Result<EvalReport> {
        let (pred, label): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        Ok(EvalReport {
            srcc: srcc(&pred, &label)?,
            plcc: plcc(&pred, &label)?,
            n: pairs.len(),
            pairs,
        })
    }

    pub fn summary_line(&self) -> String {
        format!("n={} srcc={:.6} plcc={:.6}", self.n, self.srcc, self.plcc)
    }

    /// Summary line followed by one `pred=... label=...` line per image.
    pub fn to_text(&self) -> String {
        let mut out = self.summary_line();
        out.push('\n');
        for (i, (p, l)) in self.pairs.iter().enumerate() {
            let _ = writeln!(out, "image={i} pred={p} label={l}");
        }
        out
    }
}

/// Mean prediction over `crops_per_image` random crops per image. Crop
/// positions depend only on `(seed, image index)`.
pub fn predict_manifest<T: Real>(
    model: &DeiqtModel<T>,
    manifest: &Manifest,
    crops_per_image: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if manifest.is_empty() {
        return Err(Error::Data("evaluation manifest is empty".into()));
    }
    if crops_per_image == 0 {
        return Err(Error::Config("crops_per_image must be positive".into()));
    }
    let crop = model.config().crop_size;
    let root = Rng::new(seed);
    manifest
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let img = s.image.load()?;
            let crops = sample_crops(&img, crops_per_image, crop, &mut root.derive(i as u64))?;
            let tensors: Vec<Tensor<T>> = crops.iter().map(|c| c.to_tensor()).collect();
            let refs: Vec<&Tensor<T>> = tensors.iter().collect();
            let scores = model.predict_batch(&refs)?;
            Ok(scores.iter().map(|s| s.as_f64()).sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

pub fn evaluate<T: Real>(
    model: &DeiqtModel<T>,
    manifest: &Manifest,
    crops_per_image: usize,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict_manifest(model, manifest, crops_per_image, seed)?;
    EvalReport::from_pairs(preds.into_iter().zip(manifest.scores()).collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample standard deviation (`n - 1`); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}
