//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DEIQ"  u32 version
//! u32 len  config block (UTF-8 `key = value` lines)
//! records: u32 len, name, u8 dtype, u32 rank, rank x u64 dims, raw elements
//! ```
//!
//! The config block holds the model keys plus `step`, `tensors` (record
//! count) and `optimizer` (whether `optim.m.*` / `optim.v.*` records follow
//! the parameters).

use std::path::Path;

use indexmap::IndexMap;

use deiqt::tensor::ParamSet;
use deiqt::training::{OptimizerState, TrainConfig};
use deiqt::{CheckpointError, DeiqtModel, Error, ModelConfig, Precision, Real, Result, Rng, Tensor};

use crate::config::{model_text, parse_model_text};

pub const MAGIC: &[u8; 4] = b"DEIQ";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// AdamW first and second moments keyed by parameter name.
pub type Moments<T> = (IndexMap<String, Tensor<T>>, IndexMap<String, Tensor<T>>);

/// A decoded checkpoint. Parameters are converted to `T` only when the file
/// stores the other precision.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub step: u64,
    pub params: ParamSet<T>,
    pub moments: Option<Moments<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &DeiqtModel<T>, state: Option<&OptimizerState<T>>) -> Self {
        Checkpoint {
            model: model.config().clone(),
            step: state.map_or(0, |s| s.step),
            params: model.params().clone(),
            moments: state.map(|s| (s.m.clone(), s.v.clone())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n_moments = self.moments.as_ref().map_or(0, |(m, v)| m.len() + v.len());
        let mut header = model_text(&self.model);
        header.push_str(&format!(
            "step = {}\ntensors = {}\noptimizer = {}\n",
            self.step,
            self.params.len() + n_moments,
            self.moments.is_some()
        ));

        let mut out = Vec::with_capacity(16 + header.len() + self.params.numel() * T::BYTES * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, header.as_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        if let Some((m, v)) = &self.moments {
            for (name, t) in m {
                put_tensor(&mut out, &format!("{M_PREFIX}{name}"), t);
            }
            for (name, t) in v {
                put_tensor(&mut out, &format!("{V_PREFIX}{name}"), t);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Parses a whole checkpoint; any defect fails the load as a unit.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic").map_err(|e| {
            if MAGIC.starts_with(bytes) {
                e
            } else {
                CheckpointError::BadMagic
            }
        })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let header_len = r.u32("config length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "config block")?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;

        let mut model_lines = String::new();
        let (mut step, mut count, mut optimizer) = (None, None, None);
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line `{line}`")))?;
            let bad = || CheckpointError::Malformed(format!("config line `{line}`"));
            match k.trim() {
                "step" => step = Some(v.trim().parse::<u64>().map_err(|_| bad())?),
                "tensors" => count = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                "optimizer" => optimizer = Some(v.trim().parse::<bool>().map_err(|_| bad())?),
                _ => {
                    model_lines.push_str(line);
                    model_lines.push('\n');
                }
            }
        }
        let missing = |what: &str| CheckpointError::Malformed(format!("config block lacks `{what}`"));
        let step = step.ok_or_else(|| missing("step"))?;
        let count = count.ok_or_else(|| missing("tensors"))?;
        let optimizer = optimizer.ok_or_else(|| missing("optimizer"))?;
        let model = parse_model_text(&model_lines)
            .map_err(|e| CheckpointError::Malformed(format!("model config: {e}")))?;

        let mut params = ParamSet::new();
        let (mut m, mut v) = (IndexMap::new(), IndexMap::new());
        for _ in 0..count {
            let (name, t) = r.tensor::<T>()?;
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.insert(rest.to_string(), t);
            } else if params.contains(&name) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")).into());
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        if !optimizer && !(m.is_empty() && v.is_empty()) {
            return Err(CheckpointError::Malformed("optimizer records without optimizer flag".into()).into());
        }
        Ok(Checkpoint {
            model,
            step,
            params,
            moments: optimizer.then_some((m, v)),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Builds a model for `expected`. Tensor shapes are compared first, so a
    /// width change is reported as a shape mismatch naming the first
    /// offending tensor; remaining config differences are config mismatches.
    pub fn into_model(self, expected: &ModelConfig) -> Result<DeiqtModel<T>> {
        let reference = DeiqtModel::<T>::init(expected.clone(), &mut Rng::new(0))?;
        for (name, want) in reference.params().iter() {
            if let Some(got) = self.params.get(name) {
                if got.shape() != want.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: want.shape().to_vec(),
                        found: got.shape().to_vec(),
                    }
                    .into());
                }
            }
        }
        if let Some(name) = reference.params().names().find(|n| !self.params.contains(n)) {
            return Err(CheckpointError::MissingTensor(name.to_string()).into());
        }
        if let Some(name) = self.params.names().find(|n| !reference.params().contains(n)) {
            return Err(CheckpointError::UnexpectedTensor(name.to_string()).into());
        }
        if &self.model != expected {
            return Err(CheckpointError::ConfigMismatch(diff(&self.model, expected)).into());
        }
        DeiqtModel::from_params(self.model, self.params)
    }

    /// Optimizer state for resuming; fresh moments when none were saved.
    pub fn optimizer_state(&self, params: &ParamSet<T>, cfg: &TrainConfig) -> Result<OptimizerState<T>> {
        let mut state = OptimizerState::new(params, cfg);
        state.step = self.step;
        if let Some((m, v)) = &self.moments {
            for (src, dst) in [(m, &mut state.m), (v, &mut state.v)] {
                for (name, slot) in dst.iter_mut() {
                    let t = src
                        .get(name)
                        .ok_or_else(|| CheckpointError::MissingTensor(format!("{M_PREFIX}{name}")))?;
                    if t.shape() != slot.shape() {
                        return Err(CheckpointError::ShapeMismatch {
                            name: name.clone(),
                            expected: slot.shape().to_vec(),
                            found: t.shape().to_vec(),
                        }
                        .into());
                    }
                    *slot = t.clone();
                }
            }
        }
        Ok(state)
    }
}

/// Copies every `embed.*` and `encoder.*` tensor of `model` from `source`.
/// Names and shapes must match the encoder schema exactly.
pub fn import_encoder<T: Real>(model: &mut DeiqtModel<T>, source: &ParamSet<T>) -> Result<usize> {
    let mut copied = 0;
    for (name, dst) in model.params_mut().iter_mut() {
        if !(name.starts_with("embed.") || name.starts_with("encoder.")) {
            continue;
        }
        let src = source
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            }
            .into());
        }
        dst.data_mut().copy_from_slice(src.data());
        copied += 1;
    }
    Ok(copied)
}

fn diff(found: &ModelConfig, expected: &ModelConfig) -> String {
    let (a, b) = (model_text(found), model_text(expected));
    a.lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("checkpoint `{x}` vs config `{y}`"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_bytes(out, name.as_bytes());
    out.push(T::PRECISION.code());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = self.take(1, "dtype")?[0];
        let dtype = Precision::from_code(code).ok_or(CheckpointError::UnknownDtype(code))?;
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64("dims")?).map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` element count overflows")))?;
        let t = match dtype {
            Precision::F32 => self.elements::<f32>(numel, shape)?.cast::<T>(),
            Precision::F64 => self.elements::<f64>(numel, shape)?.cast::<T>(),
        };
        Ok((name, t))
    }

    fn elements<U: Real>(&mut self, numel: usize, shape: Vec<usize>) -> Result<Tensor<U>> {
        let bytes = numel
            .checked_mul(U::BYTES)
            .ok_or_else(|| CheckpointError::Malformed("tensor size overflows".into()))?;
        let raw = self.take(bytes, "tensor data")?;
        Tensor::new(shape, raw.chunks_exact(U::BYTES).map(U::read_le).collect())
    }
}
