//! Smooth-L1 regression on random crops with AdamW and a step-decay schedule.

use std::fmt::Write as _;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::data::{Image, Manifest};
use crate::error::{Error, Result};
use crate::model::DeiqtModel;
use crate::tensor::{ParamSet, Precision, Real, Rng, Tape, Tensor};

pub const CLS_PARAM: &str = "embed.cls_token";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub crops_per_image: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub smooth_l1_beta: f64,
    /// Min-max rescale labels to `[0, 1]` before training.
    pub normalize_scores: bool,
    /// Stop after this many optimizer steps in total (0 = no cap).
    pub max_steps: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 9,
            base_lr: 2e-4,
            lr_decay_factor: 10.0,
            decay_every_epochs: 3,
            batch_size: 16,
            crops_per_image: 10,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            smooth_l1_beta: 1.0,
            normalize_scores: false,
            max_steps: 0,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("base_lr", self.base_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("decay_every_epochs", self.decay_every_epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("crops_per_image", self.crops_per_image as f64),
            ("adam_eps", self.adam_eps),
            ("smooth_l1_beta", self.smooth_l1_beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// `base_lr / factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    Ok(cfg.base_lr / cfg.lr_decay_factor.powi((epoch / cfg.decay_every_epochs) as i32))
}

fn crop_offsets(image: &Image, n: usize, hw: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if image.height() < hw || image.width() < hw {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than the {hw}x{hw} crop; resize the image or lower crop_size",
            image.height(),
            image.width()
        )));
    }
    Ok((0..n)
        .map(|_| {
            let y = rng.below(image.height() - hw + 1);
            let x = rng.below(image.width() - hw + 1);
            (y, x)
        })
        .collect())
}

/// `n` uniformly placed `hw × hw` crops.
pub fn sample_crops(image: &Image, n: usize, hw: usize, rng: &mut Rng) -> Result<Vec<Image>> {
    crop_offsets(image, n, hw, rng)?
        .into_iter()
        .map(|(y, x)| image.crop(y, x, hw, hw))
        .collect()
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, cfg: &TrainConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        OptimizerState {
            step: 0,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Only weight matrices are decayed; biases, norms and embeddings are not.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name.ends_with(".weight")
}

/// One AdamW update from the gradients attached to `params`, which are then
/// cleared. Parameters without a gradient are left untouched.
pub fn optimizer_step<T: Real>(params: &mut ParamSet<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`[{i}]")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.take_grad() else { continue };
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no optimizer moments for `{name}`")))?;
        let v = state.v.get_mut(name).expect("m and v share keys");
        let wd = if decays(name, p.shape()) { state.weight_decay } else { 0.0 };
        let (tb1, tb2, teps) = (T::lit(b1), T::lit(b2), T::lit(state.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (tc1, tc2) = (T::lit(c1), T::lit(c2));
        let (tlr, decay) = (T::lit(lr), T::lit(1.0 - lr * wd));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = tb1 * *mi + one_b1 * gi;
            *vi = tb2 * *vi + one_b2 * gi * gi;
            let update = (*mi / tc1) / ((*vi / tc2).sqrt() + teps);
            *w = *w * decay - tlr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based global optimizer step.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Gradient of the CLS token parameter at this step.
    pub cls_grad: Vec<f64>,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} epoch={} lr={:e} loss={} grad_norm={}",
            self.step, self.epoch, self.lr, self.loss, self.grad_norm
        );
        let n = self.cls_grad.len().max(1) as f64;
        let mean = self.cls_grad.iter().sum::<f64>() / n;
        let var = self.cls_grad.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
        let _ = write!(s, " cls_mean={mean} cls_var={var} cls_grad=");
        for (i, g) in self.cls_grad.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{g}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<StepRecord> {
        let bad = |what: &str| Error::Data(format!("log line missing or malformed `{what}`: {line}"));
        let fields: IndexMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let num = |k: &str| -> Result<f64> {
            fields.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k))
        };
        let cls_grad = match fields.get("cls_grad") {
            Some(v) if !v.is_empty() => v
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| bad("cls_grad")))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(StepRecord {
            step: num("step")? as u64,
            epoch: num("epoch")? as usize,
            lr: num("lr")?,
            loss: num("loss")?,
            grad_norm: num("grad_norm")?,
            cls_grad,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrainLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(StepRecord::parse_line)
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    /// Distinct learning rates in visiting order.
    pub fn lr_sequence(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.lr) {
                out.push(r.lr);
            }
        }
        out
    }
}

/// Decoded training images and their labels.
pub struct TrainSet {
    images: Vec<Arc<Image>>,
    labels: Vec<f64>,
}

impl TrainSet {
    pub fn load(manifest: &Manifest, normalize: bool) -> Result<TrainSet> {
        if manifest.is_empty() {
            return Err(Error::Data("training manifest is empty".into()));
        }
        let manifest = if normalize { manifest.normalized()? } else { manifest.clone() };
        let images = manifest
            .samples()
            .iter()
            .map(|s| s.image.load())
            .collect::<Result<_>>()?;
        Ok(TrainSet {
            images,
            labels: manifest.scores(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        (self.len() * cfg.crops_per_image).div_ceil(cfg.batch_size)
    }

    /// Shuffled `(image, y, x)` crop plan for one epoch; depends only on
    /// `(seed, epoch)`.
    fn epoch_plan(&self, cfg: &TrainConfig, crop: usize, epoch: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut rng = Rng::new(cfg.seed).derive(epoch as u64);
        let mut plan = Vec::with_capacity(self.len() * cfg.crops_per_image);
        for (i, img) in self.images.iter().enumerate() {
            for (y, x) in crop_offsets(img, cfg.crops_per_image, crop, &mut rng)? {
                plan.push((i, y, x));
            }
        }
        rng.shuffle(&mut plan);
        Ok(plan)
    }
}

/// What the per-step callback wants next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub fn fit<T: Real>(
    model: &mut DeiqtModel<T>,
    train: &Manifest,
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
) -> Result<TrainLog> {
    let set = TrainSet::load(train, cfg.normalize_scores)?;
    fit_with(model, &set, cfg, state, |_, _| Ok(Flow::Continue))
}

/// Trains from `state.step` onward, so a resumed run replays exactly the
/// batches an uninterrupted run would have seen next.
pub fn fit_with<T: Real>(
    model: &mut DeiqtModel<T>,
    set: &TrainSet,
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
    mut on_step: impl FnMut(&StepRecord, &DeiqtModel<T>) -> Result<Flow>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let crop = model.config().crop_size;
    let spe = set.steps_per_epoch(cfg);
    let total = spe * cfg.epochs;
    let limit = if cfg.max_steps > 0 { cfg.max_steps.min(total) } else { total };
    let mut log = TrainLog::default();
    let mut step = state.step as usize;
    while step < limit {
        let epoch = step / spe;
        let lr = lr_at(epoch, cfg)?;
        let plan = set.epoch_plan(cfg, crop, epoch)?;
        let batches: Vec<_> = plan.chunks(cfg.batch_size).collect();
        for batch in &batches[step % spe..] {
            if step >= limit {
                break;
            }
            let record = train_step(model, set, batch, cfg, state, epoch, lr)?;
            step += 1;
            let flow = on_step(&record, model)?;
            log.records.push(record);
            if flow == Flow::Stop {
                return Ok(log);
            }
        }
    }
    Ok(log)
}

fn train_step<T: Real>(
    model: &mut DeiqtModel<T>,
    set: &TrainSet,
    batch: &[(usize, usize, usize)],
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
    epoch: usize,
    lr: f64,
) -> Result<StepRecord> {
    let crop = model.config().crop_size;
    let crops = batch
        .iter()
        .map(|&(i, y, x)| Ok(set.images[i].crop(y, x, crop, crop)?.to_tensor::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = crops.iter().collect();
    let targets: Vec<T> = batch.iter().map(|&(i, _, _)| T::lit(set.labels[i])).collect();

    let mut tape = Tape::new();
    let pass = model.forward_images(&mut tape, &refs)?;
    let loss_var = tape.smooth_l1(pass.decoder.score, &targets, T::lit(cfg.smooth_l1_beta))?;
    let loss = tape.value(loss_var).data()[0].as_f64();
    let step = state.step + 1;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    let mut grads = tape.backward(loss_var)?;
    model.params_mut().attach_grads(&pass.bound, &mut grads)?;

    let mut sq = 0.0;
    for (_, p) in model.params().iter() {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
        }
    }
    let cls_grad = model
        .params()
        .get(CLS_PARAM)
        .and_then(|p| p.grad())
        .map(|g| g.iter().map(|x| x.as_f64()).collect())
        .unwrap_or_default();

    optimizer_step(model.params_mut(), state, lr)?;
    Ok(StepRecord {
        step,
        epoch,
        lr,
        loss,
        grad_norm: sq.sqrt(),
        cls_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.3, 0.3, 1.0), 0.0);
        assert_eq!(smooth_l1(1.5, 1.0, 1.0), 0.125);
        assert_eq!(smooth_l1(-1.0, 1.0, 1.0), 1.5);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-18;
        assert!(close(lr_at(0, &cfg).unwrap(), 2e-4));
        assert!(close(lr_at(3, &cfg).unwrap(), 2e-5));
        assert!(close(lr_at(8, &cfg).unwrap(), 2e-6));
        assert!(lr_at(9, &cfg).is_err());
    }

    #[test]
    fn crops_of_exact_size_are_the_image() {
        let img = Image::new(3, 4, 4, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
        let crops = sample_crops(&img, 5, 4, &mut Rng::new(1)).unwrap();
        assert!(crops.iter().all(|c| *c == img));
        let err = sample_crops(&img, 1, 5, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("resize"), "{err}");
    }

    #[test]
    fn log_line_round_trip() {
        let r = StepRecord {
            step: 3,
            epoch: 1,
            lr: 2e-5,
            loss: 0.125,
            grad_norm: 1.5,
            cls_grad: vec![0.1, -2.5e-7, 0.0],
        };
        assert_eq!(StepRecord::parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w.weight", Tensor::zeros([1, 2]));
        let mut state = OptimizerState::new(&params, &TrainConfig::default());
        params.get_mut("w.weight").unwrap().set_grad(vec![0.0, f64::NAN]).unwrap();
        let err = optimizer_step(&mut params, &mut state, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w.weight"), "{err}");
        assert_eq!(state.step, 0);
    }
}
