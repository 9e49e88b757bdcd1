//! Command bodies. Each writes its artifacts plus `config.txt` into the output
//! directory and returns the lines to print on stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deiqt::data::{gen_synthetic_dataset, split, Image, Manifest};
use deiqt::metrics::{attention_map, cls_grad_stats, evaluate, panel_cosine, svg, EvalReport};
use deiqt::tensor::grad_check;
use deiqt::training::{fit, OptimizerState};
use deiqt::{DeiqtModel, Error, Real, Result, Rng, Tensor};

use crate::checkpoint::{import_encoder, Checkpoint};
use crate::config::RunConfig;
use crate::protocol::{run_protocol, Mode};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-4;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `out` and echoes the effective config into it.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write(&out.join("config.txt"), cfg.to_text())
}

/// The configured manifest, or the synthetic corpus built in memory from the
/// run seed when none is set.
pub fn load_manifest(cfg: &RunConfig, path: Option<&Path>) -> Result<Manifest> {
    match path.or(cfg.manifest.as_deref()) {
        Some(p) => Manifest::read_csv(p),
        None => synthetic(cfg),
    }
}

fn synthetic(cfg: &RunConfig) -> Result<Manifest> {
    gen_synthetic_dataset(cfg.n_base, cfg.levels, &cfg.kinds, cfg.image_size, &Rng::new(cfg.train.seed))
}

fn model_for<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<DeiqtModel<T>> {
    match checkpoint {
        Some(p) => Checkpoint::<T>::load(p)?.into_model(&cfg.model),
        None => DeiqtModel::init(cfg.model.clone(), &mut Rng::new(cfg.train.seed)),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let m = synthetic(cfg)?.materialize(out)?;
    Ok(format!(
        "samples={} groups={} manifest={}\n",
        m.len(),
        m.groups().len(),
        out.join("manifest.csv").display()
    ))
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub manifest: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn train<T: Real>(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<String> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, args.manifest.as_deref())?;
    prepare_out(out, cfg)?;
    let (train_m, test_m) = split(&manifest, cfg.train_frac, cfg.train.seed)?;

    let (mut model, mut state) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::<T>::load(p)?;
            let model = ck.clone().into_model(&cfg.model)?;
            let state = ck.optimizer_state(model.params(), &cfg.train)?;
            (model, state)
        }
        None => {
            let mut model = DeiqtModel::<T>::init(cfg.model.clone(), &mut Rng::new(cfg.train.seed))?;
            if let Some(p) = &cfg.init_encoder {
                let src = Checkpoint::<T>::load(p)?;
                import_encoder(&mut model, &src.params)?;
            }
            let state = OptimizerState::new(model.params(), &cfg.train);
            (model, state)
        }
    };
    let start = state.step;
    let log = fit(&mut model, &train_m, &cfg.train, &mut state)?;
    write(&out.join("train_log.txt"), log.to_text())?;
    Checkpoint::from_model(&model, Some(&state)).save(&out.join("checkpoint.bin"))?;
    if !log.records.is_empty() {
        write(&out.join("cls_grad.txt"), cls_grad_stats(&log, cfg.hist_bins)?.to_text())?;
    }

    let train_r = evaluate(&model, &train_m, cfg.eval_crops, cfg.train.seed)?;
    let test_r = evaluate(&model, &test_m, cfg.eval_crops, cfg.train.seed)?;
    let last_loss = log.records.last().map_or(f64::NAN, |r| r.loss);
    let summary = format!(
        "steps={}..{} final_loss={last_loss}\ntrain {}\ntest {}\n",
        start,
        state.step,
        train_r.summary_line(),
        test_r.summary_line()
    );
    write(&out.join("report.txt"), &summary)?;
    write(&out.join("test_predictions.txt"), test_r.to_text())?;
    write(&out.join("test_scatter.svg"), scatter(&test_r, "test predictions"))?;
    Ok(summary)
}

fn scatter(r: &EvalReport, title: &str) -> String {
    svg::scatter(title, "label", "prediction", &r.pairs.iter().map(|&(p, l)| (l, p)).collect::<Vec<_>>())
}

pub fn eval<T: Real>(cfg: &RunConfig, out: &Path, checkpoint: &Path, manifest: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let path = manifest
        .or(cfg.test_manifest.as_deref())
        .or(cfg.manifest.as_deref())
        .ok_or_else(|| Error::Config("eval needs --manifest, test_manifest or manifest".into()))?;
    let m = Manifest::read_csv(path)?;
    let model = Checkpoint::<T>::load(checkpoint)?.into_model(&cfg.model)?;
    prepare_out(out, cfg)?;
    let report = evaluate(&model, &m, cfg.eval_crops, cfg.train.seed)?;
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("scatter.svg"), scatter(&report, "evaluation"))?;
    Ok(format!("{}\n", report.summary_line()))
}

pub fn protocol<T: Real>(cfg: &RunConfig, out: &Path, mode: Mode, manifest: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let m = load_manifest(cfg, manifest)?;
    prepare_out(out, cfg)?;
    let report = run_protocol::<T>(mode, cfg, &m)?;
    let text = report.to_text();
    write(&out.join("protocol.txt"), &text)?;
    write(&out.join("protocol.svg"), report.to_svg())?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with("run "))
        .map(|l| format!("{l}\n"))
        .collect())
}

/// Finite-difference check over every parameter, always in 64-bit.
pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let mut rng = Rng::new(cfg.train.seed);
    let model = DeiqtModel::<f64>::init(cfg.model.clone(), &mut rng)?;
    let c = &cfg.model;
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_fn([c.channels, c.crop_size, c.crop_size], |_| rng.uniform()))
        .collect();
    let targets = [rng.uniform(), rng.uniform()];
    let patches = model.patch_batch(&images.iter().collect::<Vec<_>>())?;
    let report = grad_check(model.params(), GRADCHECK_EPS, |tape, bound| {
        let pv = tape.constant(patches.clone());
        let pass = model.forward(tape, bound.clone(), pv, 2)?;
        tape.smooth_l1(pass.decoder.score, &targets, cfg.train.smooth_l1_beta)
    })?;
    let pass = report.max_rel_error <= GRADCHECK_TOLERANCE;
    let mut text = format!(
        "elements={} max_rel_error={:e} tolerance={:e} status={}\n",
        report.elements,
        report.max_rel_error,
        GRADCHECK_TOLERANCE,
        if pass { "pass" } else { "fail" }
    );
    if let Some((name, i)) = &report.worst {
        let _ = writeln!(
            text,
            "worst={name}[{i}] analytic={:e} numeric={:e}",
            report.analytic, report.numeric
        );
    }
    write(&out.join("gradcheck.txt"), &text)?;
    if !pass {
        return Err(Error::Contract(format!(
            "gradient check failed: max relative error {:e} at {:?}",
            report.max_rel_error, report.worst
        )));
    }
    Ok(text)
}

pub fn panel_sim<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<String> {
    cfg.validate()?;
    let model = model_for::<T>(cfg, checkpoint)?;
    let m = load_manifest(cfg, manifest)?;
    prepare_out(out, cfg)?;
    let diag = panel_cosine(&model, &m)?;
    write(&out.join("panel.txt"), diag.to_text())?;
    let l = diag.size();
    let flat: Vec<f64> = diag.matrix.iter().flatten().copied().collect();
    write(&out.join("panel.svg"), svg::heatmap("panel cosine similarity", l, l, &flat))?;
    Ok(format!(
        "panel={l} mean_off_diagonal={:.6} images={}\n",
        diag.mean_off_diagonal(),
        m.len()
    ))
}

pub fn attn_map<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    image: Option<&Path>,
) -> Result<String> {
    cfg.validate()?;
    let model = model_for::<T>(cfg, checkpoint)?;
    let img = match image {
        Some(p) => Image::read_pnm(p)?,
        None => {
            let m = load_manifest(cfg, None)?;
            (*m.samples()[0].image.load()?).clone()
        }
    };
    let crop = img.center_crop(cfg.model.crop_size)?;
    prepare_out(out, cfg)?;
    let map = attention_map(&model, &crop)?;
    let side = cfg.model.crop_size;
    let mut text = String::new();
    for row in map.data().chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(text, "{}", cells.join(" "));
    }
    write(&out.join("attn_map.txt"), &text)?;
    write(&out.join("attn_map.svg"), svg::heatmap("cross-attention map", side, side, map.data()))?;
    let gray = Image::new(1, side, side, map.data().iter().map(|&v| v as f32).collect())?;
    gray.write_pgm(&out.join("attn_map.pgm"))?;
    crop.write_ppm(&out.join("crop.ppm"))?;
    Ok(format!("attention map {side}x{side} written to {}\n", out.display()))
}
