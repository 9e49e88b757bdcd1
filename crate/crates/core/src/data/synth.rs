use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use super::image::Image;
use super::manifest::{ImageRef, Manifest, Sample};
use crate::error::{Error, Result};
use crate::tensor::Rng;

const BLUR_MAX_SIGMA: f64 = 2.5;
const NOISE_MAX_STD: f64 = 0.2;
const CONTRAST_MAX_LOSS: f64 = 0.8;
const TEXTURE_AMPLITUDE: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    GaussianBlur,
    WhiteNoise,
    ContrastReduction,
    Blockiness,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::GaussianBlur,
        DistortionKind::WhiteNoise,
        DistortionKind::ContrastReduction,
        DistortionKind::Blockiness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::WhiteNoise => "white_noise",
            DistortionKind::ContrastReduction => "contrast_reduction",
            DistortionKind::Blockiness => "blockiness",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown distortion kind `{s}` (expected gaussian_blur, white_noise, contrast_reduction or blockiness)"
                ))
            })
    }
}

/// One distortion at `level` of `levels` graded steps; level 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: usize,
    pub levels: usize,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: usize, levels: usize) -> Result<Self> {
        if levels < 2 || level >= levels {
            return Err(Error::Config(format!(
                "distortion level {level} outside 0..{levels} (need levels >= 2)"
            )));
        }
        Ok(DistortionSpec { kind, level, levels })
    }

    /// Normalized severity in `[0, 1]`.
    pub fn severity(&self) -> f64 {
        self.level as f64 / (self.levels - 1) as f64
    }

    /// Kind-specific parameter: blur sigma, noise std, contrast factor or
    /// block side in pixels.
    pub fn strength(&self) -> f64 {
        let s = self.severity();
        match self.kind {
            DistortionKind::GaussianBlur => BLUR_MAX_SIGMA * s,
            DistortionKind::WhiteNoise => NOISE_MAX_STD * s,
            DistortionKind::ContrastReduction => 1.0 - CONTRAST_MAX_LOSS * s,
            DistortionKind::Blockiness => (self.level + 1) as f64,
        }
    }

    /// Proxy quality label: 1 for pristine, 0 for the strongest level.
    pub fn score(&self) -> f64 {
        1.0 - self.severity()
    }
}

/// Applies `spec`; output is clamped to `[0, 1]`. `rng` is only consumed by
/// white noise.
pub fn apply_distortion(image: &Image, spec: DistortionSpec, rng: &mut Rng) -> Image {
    if spec.level == 0 {
        return image.clone();
    }
    let mut out = match spec.kind {
        DistortionKind::GaussianBlur => gaussian_blur(image, spec.strength()),
        DistortionKind::WhiteNoise => {
            let std = spec.strength();
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + std * rng.normal()) as f32;
            }
            out
        }
        DistortionKind::ContrastReduction => {
            let factor = spec.strength();
            let mut out = image.clone();
            for c in 0..out.channels() {
                let plane = out.plane_mut(c);
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                for v in plane {
                    *v = (mean + (*v as f64 - mean) * factor) as f32;
                }
            }
            out
        }
        DistortionKind::Blockiness => block_means(image, spec.level + 1),
    };
    out.clamp01();
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for w in &mut k {
        *w /= total;
    }
    k
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`), periodic in `2n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        period as usize - 1 - m
    }
}

// With symmetric reflection the blur equals a circular convolution of the
// mirrored signal, so it never increases variance.
fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..image.channels() {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kw) in k.iter().enumerate() {
                    acc += kw * src[y * w + reflect(x as isize + j as isize - r, w)] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kw) in k.iter().enumerate() {
                    acc += kw * tmp[reflect(y as isize + j as isize - r, h) * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

fn block_means(image: &Image, block: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0f64;
                for y in by..ey {
                    for x in bx..ex {
                        sum += src[y * w + x] as f64;
                    }
                }
                let mean = (sum / ((ey - by) * (ex - bx)) as f64) as f32;
                for y in by..ey {
                    for x in bx..ex {
                        dst[y * w + x] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Procedural pristine RGB images: a color gradient, a few hard-edged
/// shapes, and a band-limited sinusoid texture, stretched to a common
/// dynamic range and quantized to 8 bits.
pub fn gen_base_images(count: usize, hw: usize, rng: &Rng) -> Vec<Image> {
    (0..count)
        .into_par_iter()
        .map(|i| base_image(hw, &mut rng.derive(i as u64)))
        .collect()
}

fn base_image(hw: usize, rng: &mut Rng) -> Image {
    let n = hw as f64;
    let mut img = Image::filled(3, hw, hw, 0.0);

    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let c0: [f64; 3] = std::array::from_fn(|_| rng.uniform());
    let c1: [f64; 3] = std::array::from_fn(|_| rng.uniform());

    struct Shape {
        circle: bool,
        cx: f64,
        cy: f64,
        r: f64,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..2 + rng.below(3))
        .map(|_| Shape {
            circle: rng.uniform() < 0.5,
            cx: rng.uniform_range(0.0, n),
            cy: rng.uniform_range(0.0, n),
            r: rng.uniform_range(0.1, 0.3) * n,
            color: std::array::from_fn(|_| rng.uniform()),
        })
        .collect();

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
            // periods between 5 and 10 pixels
            let freq = std::f64::consts::TAU / rng.uniform_range(5.0, 10.0);
            Wave {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.uniform_range(0.0, std::f64::consts::TAU),
                amp: std::array::from_fn(|_| TEXTURE_AMPLITUDE * rng.uniform_range(0.8, 1.2)),
            }
        })
        .collect();

    for y in 0..hw {
        for x in 0..hw {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((xf / n - 0.5) * dx + (yf / n - 0.5) * dy) + 0.75) / 1.5;
            let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
            for s in &shapes {
                let inside = if s.circle {
                    (xf - s.cx).powi(2) + (yf - s.cy).powi(2) < s.r * s.r
                } else {
                    (xf - s.cx).abs() < s.r && (yf - s.cy).abs() < 0.6 * s.r
                };
                if inside {
                    px = s.color;
                }
            }
            for wv in &waves {
                let v = (wv.fx * xf + wv.fy * yf + wv.phase).sin();
                for c in 0..3 {
                    px[c] += wv.amp[c] * v;
                }
            }
            for (c, &v) in px.iter().enumerate() {
                img.set(c, y, x, v as f32);
            }
        }
    }

    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    for v in img.data_mut() {
        *v = 0.02 + 0.96 * (*v - lo) / span;
    }
    img.quantize8();
    img
}

/// Every base × kind × level combination as an in-memory sample, ordered by
/// base, then kind, then level. Images are quantized to 8 bits so that a
/// PPM round trip is lossless.
pub fn gen_synthetic_dataset(
    n_base: usize,
    levels: usize,
    kinds: &[DistortionKind],
    hw: usize,
    rng: &Rng,
) -> Result<Manifest> {
    if levels < 2 {
        return Err(Error::Config(format!("levels must be >= 2, got {levels}")));
    }
    if n_base == 0 || kinds.is_empty() {
        return Err(Error::Config("need at least one base image and one distortion kind".into()));
    }
    let bases = gen_base_images(n_base, hw, &rng.derive(0));
    let noise_root = rng.derive(1);
    let jobs: Vec<(usize, usize, usize)> = (0..n_base)
        .flat_map(|b| (0..kinds.len()).flat_map(move |k| (0..levels).map(move |l| (b, k, l))))
        .collect();
    let samples = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(b, k, l))| {
            let spec = DistortionSpec::new(kinds[k], l, levels)?;
            let mut img = apply_distortion(&bases[b], spec, &mut noise_root.derive(idx as u64));
            img.quantize8();
            let name = format!("b{b:04}_{}_l{l}", kinds[k].name());
            Ok(Sample {
                image: ImageRef::memory(name, Arc::new(img)),
                score: spec.score(),
                group: format!("b{b:04}"),
                distortion: Some(spec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(
        samples,
        format!(
            "synthetic: {n_base} bases x {} kinds x {levels} levels, {hw}px, seed {}",
            kinds.len(),
            rng.seed()
        ),
    )
}
