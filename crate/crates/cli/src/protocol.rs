//! Repeated-split experiment protocols.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use deiqt::data::{split, split_fixed_test, Manifest};
use deiqt::metrics::{evaluate, median, std_dev, svg};
use deiqt::tensor::derive_seed;
use deiqt::training::{fit, OptimizerState};
use deiqt::{DeiqtModel, Error, Real, Result, Rng, Variant};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Repeats,
    DataEfficiency,
    DepthAblation,
    ComponentAblation,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Repeats, Mode::DataEfficiency, Mode::DepthAblation, Mode::ComponentAblation];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Repeats => "repeats",
            Mode::DataEfficiency => "data-efficiency",
            Mode::DepthAblation => "depth-ablation",
            Mode::ComponentAblation => "component-ablation",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol mode `{s}`")))
    }
}

pub const DEPTHS: [usize; 4] = [1, 2, 4, 8];

/// One configuration swept by a mode.
#[derive(Clone, Debug)]
pub struct Setting {
    pub label: String,
    pub cfg: RunConfig,
    /// Fraction of groups used for training beside a fixed `test_frac` test side.
    pub train_frac: Option<f64>,
}

pub fn settings(mode: Mode, base: &RunConfig) -> Vec<Setting> {
    let plain = |label: String, cfg: RunConfig| Setting {
        label,
        cfg,
        train_frac: None,
    };
    match mode {
        Mode::Repeats => vec![plain(base.model.variant.name().to_string(), base.clone())],
        Mode::DataEfficiency => base
            .fractions
            .iter()
            .map(|&f| Setting {
                label: format!("train_frac={f}"),
                cfg: base.clone(),
                train_frac: Some(f),
            })
            .collect(),
        Mode::DepthAblation => DEPTHS
            .iter()
            .map(|&d| {
                let mut cfg = base.clone();
                cfg.model.decoder_depth = d;
                plain(format!("decoder_depth={d}"), cfg)
            })
            .collect(),
        Mode::ComponentAblation => Variant::ALL
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                cfg.model.variant = v;
                plain(v.name().to_string(), cfg)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub srcc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingResult {
    pub label: String,
    pub runs: Vec<RunResult>,
}

impl SettingResult {
    fn column(&self, f: impl Fn(&RunResult) -> f64) -> Vec<f64> {
        self.runs.iter().map(f).collect()
    }

    pub fn median_srcc(&self) -> f64 {
        median(&self.column(|r| r.srcc))
    }

    pub fn median_plcc(&self) -> f64 {
        median(&self.column(|r| r.plcc))
    }

    pub fn std_srcc(&self) -> f64 {
        std_dev(&self.column(|r| r.srcc))
    }

    pub fn std_plcc(&self) -> f64 {
        std_dev(&self.column(|r| r.plcc))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub mode: Mode,
    pub settings: Vec<SettingResult>,
}

impl ProtocolReport {
    /// `run ...` lines per setting followed by that setting's `summary` line.
    pub fn to_text(&self) -> String {
        let mut out = format!("protocol mode={} settings={}\n", self.mode, self.settings.len());
        for s in &self.settings {
            for r in &s.runs {
                let _ = writeln!(
                    out,
                    "run setting={} index={} seed={} n_train={} n_test={} srcc={:.6} plcc={:.6}",
                    s.label, r.run, r.seed, r.n_train, r.n_test, r.srcc, r.plcc
                );
            }
            let _ = writeln!(
                out,
                "summary setting={} runs={} median_srcc={:.6} median_plcc={:.6} std_srcc={:.6} std_plcc={:.6}",
                s.label,
                s.runs.len(),
                s.median_srcc(),
                s.median_plcc(),
                s.std_srcc(),
                s.std_plcc()
            );
        }
        out
    }

    /// Median SRCC per setting, in setting order.
    pub fn to_svg(&self) -> String {
        let points = self
            .settings
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64, s.median_srcc()))
            .collect();
        svg::lines(
            &format!("{} (median SRCC)", self.mode),
            "setting index",
            "SRCC",
            &[("median".to_string(), points)],
        )
    }
}

/// Seed of run `index`; the same across settings so every setting sees the
/// same splits and initializations.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Trains from scratch on one split and evaluates on the held-out side.
pub fn run_once<T: Real>(setting: &Setting, manifest: &Manifest, index: usize) -> Result<RunResult> {
    let cfg = &setting.cfg;
    let seed = run_seed(cfg.train.seed, index);
    let (train, test) = match setting.train_frac {
        Some(f) => split_fixed_test(manifest, cfg.test_frac, f, seed)?,
        None => split(manifest, cfg.train_frac, seed)?,
    };
    let mut model = DeiqtModel::<T>::init(cfg.model.clone(), &mut Rng::new(seed))?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut state = OptimizerState::new(model.params(), &tc);
    fit(&mut model, &train, &tc, &mut state)?;
    let report = evaluate(&model, &test, cfg.eval_crops, seed)?;
    Ok(RunResult {
        run: index,
        seed,
        n_train: train.len(),
        n_test: test.len(),
        srcc: report.srcc,
        plcc: report.plcc,
    })
}

pub fn run_protocol<T: Real>(mode: Mode, base: &RunConfig, manifest: &Manifest) -> Result<ProtocolReport> {
    base.validate()?;
    let mut out = Vec::new();
    for setting in settings(mode, base) {
        setting.cfg.model.validate()?;
        let runs = (0..base.repeats)
            .into_par_iter()
            .map(|i| run_once::<T>(&setting, manifest, i))
            .collect::<Result<Vec<_>>>()?;
        out.push(SettingResult {
            label: setting.label,
            runs,
        });
    }
    Ok(ProtocolReport { mode, settings: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_cover_the_expected_settings() {
        let base = RunConfig::default();
        let labels = |m| settings(m, &base).into_iter().map(|s| s.label).collect::<Vec<_>>();
        assert_eq!(labels(Mode::DataEfficiency), ["train_frac=0.2", "train_frac=0.4", "train_frac=0.6"]);
        assert_eq!(
            labels(Mode::DepthAblation),
            ["decoder_depth=1", "decoder_depth=2", "decoder_depth=4", "decoder_depth=8"]
        );
        assert_eq!(labels(Mode::ComponentAblation).len(), 5);
        assert_eq!(labels(Mode::Repeats), ["full"]);
    }

    #[test]
    fn run_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| run_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
