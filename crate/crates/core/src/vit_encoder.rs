//! Patch embedding, CLS token, position embeddings, and the pre-norm
//! self-attention encoder stack.
//!
//! Every function here works on a batch of `groups` images at once: token
//! matrices are `[groups * tokens, D]` with each image's tokens contiguous.

use crate::error::{Error, Result};
use crate::quality_decoder::Variant;
use crate::tensor::{AttentionShape, BoundParams, ParamSet, Real, Rng, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
/// Pixels in `[0, 1]` are standardized as `(v - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Number of attention-panel members `L`.
    pub panel_size: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
    /// Side of the square input crop in pixels.
    pub crop_size: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// Desk-scale defaults (4-pixel patches on 16-pixel crops, width 64).
    fn default() -> Self {
        ModelConfig {
            patch_size: 4,
            token_dim: 64,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 1,
            panel_size: 6,
            mlp_ratio: 4.0,
            channels: 3,
            crop_size: 16,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// ViT-S/16 sized model on 224-pixel crops with a six-member panel.
    pub fn paper() -> Self {
        ModelConfig {
            patch_size: 16,
            token_dim: 384,
            heads: 6,
            encoder_depth: 12,
            decoder_depth: 1,
            panel_size: 6,
            mlp_ratio: 4.0,
            channels: 3,
            crop_size: 224,
            variant: Variant::Full,
        }
    }

    /// The small model used by gradient checks and smoke tests.
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 4,
            token_dim: 16,
            heads: 2,
            encoder_depth: 2,
            decoder_depth: 1,
            panel_size: 3,
            mlp_ratio: 4.0,
            channels: 3,
            crop_size: 12,
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("panel_size", self.panel_size),
            ("channels", self.channels),
            ("crop_size", self.crop_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.crop_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "crop_size {} is not a multiple of patch_size {}",
                self.crop_size, self.patch_size
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("bad mlp_ratio {}", self.mlp_ratio)));
        }
        if self.token_dim < 2 {
            return Err(Error::Config("token_dim must be at least 2".into()));
        }
        Ok(())
    }

    /// Patches per crop, `crop² / p²`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.crop_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.token_dim as f64).round() as usize
    }
}

/// Splits a `[C, H, W]` image into non-overlapping `p×p` patches.
///
/// Patches are listed in row-major grid order; each is flattened
/// channel-major, then row-major within the patch.
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {h}x{w} not divisible into {p}x{p} patches"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for r in 0..p {
                    let start = ch * h * w + (py * p + r) * w + px * p;
                    out.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * channels] || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for a {channels}x{h}x{w} image with p={p}", patches.shape()),
        ));
    }
    let mut out = vec![T::zero(); channels * h * w];
    let mut it = patches.data().chunks(p);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..channels {
                for r in 0..p {
                    let start = ch * h * w + (py * p + r) * w + px * p;
                    out[start..start + p].copy_from_slice(it.next().unwrap());
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

pub(crate) fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Stacks the patch matrices of equally sized images into `[B*N, p²C]`.
pub fn patchify_batch<T: Real>(images: &[&Tensor<T>], p: usize) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    let mut rows = 0;
    let mut cols = 0;
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "patchify_batch",
                format!("{:?} vs {shape:?}", img.shape()),
            ));
        }
        let pt = patchify(img, p)?;
        rows += pt.shape()[0];
        cols = pt.shape()[1];
        data.extend_from_slice(pt.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.trunc_normal(std)))
}

pub(crate) fn init_linear<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut Rng,
) {
    params.insert(format!("{prefix}.weight"), trunc_normal(&[fan_in, fan_out], std, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
}

pub(crate) fn init_norm<T: Real>(params: &mut ParamSet<T>, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::full([dim], T::one()));
    params.insert(format!("{prefix}.bias"), Tensor::zeros([dim]));
}

pub(crate) fn init_attention<T: Real>(params: &mut ParamSet<T>, prefix: &str, dim: usize, std: f64, rng: &mut Rng) {
    for part in ["q", "k", "v", "out"] {
        init_linear(params, &format!("{prefix}.{part}"), dim, dim, std, rng);
    }
}

pub(crate) fn init_mlp<T: Real>(params: &mut ParamSet<T>, prefix: &str, dim: usize, hidden: usize, std: f64, rng: &mut Rng) {
    init_linear(params, &format!("{prefix}.fc1"), dim, hidden, std, rng);
    init_linear(params, &format!("{prefix}.fc2"), hidden, dim, std, rng);
}

/// Adds the patch projection, CLS token, position embeddings, and encoder blocks.
pub fn init_encoder<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, std: f64, rng: &mut Rng) {
    let d = cfg.token_dim;
    init_linear(params, "embed.patch_proj", cfg.patch_dim(), d, std, rng);
    params.insert("embed.cls_token", trunc_normal(&[1, d], std, rng));
    params.insert("embed.pos_embed", trunc_normal(&[cfg.num_patches() + 1, d], std, rng));
    for i in 0..cfg.encoder_depth {
        let p = format!("encoder.{i}");
        init_norm(params, &format!("{p}.norm1"), d);
        init_attention(params, &format!("{p}.attn"), d, std, rng);
        init_norm(params, &format!("{p}.norm2"), d);
        init_mlp(params, &format!("{p}.mlp"), d, cfg.mlp_hidden(), std, rng);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Var,
}

impl LinearParams {
    pub fn bind(b: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(LinearParams {
            weight: b.get(&format!("{prefix}.weight"))?,
            bias: b.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

impl NormParams {
    pub fn bind(b: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: b.get(&format!("{prefix}.gain"))?,
            bias: b.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, T::lit(LAYER_NORM_EPS))
    }
}

/// Q/K/V projections and the output projection `W_L` of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn bind(b: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            q: LinearParams::bind(b, &format!("{prefix}.q"))?,
            k: LinearParams::bind(b, &format!("{prefix}.k"))?,
            v: LinearParams::bind(b, &format!("{prefix}.v"))?,
            out: LinearParams::bind(b, &format!("{prefix}.out"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn bind(b: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(MlpParams {
            fc1: LinearParams::bind(b, &format!("{prefix}.fc1"))?,
            fc2: LinearParams::bind(b, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.apply(tape, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

impl EncoderBlockParams {
    pub fn bind(b: &BoundParams, index: usize) -> Result<Self> {
        let p = format!("encoder.{index}");
        Ok(EncoderBlockParams {
            norm1: NormParams::bind(b, &format!("{p}.norm1"))?,
            attn: AttentionParams::bind(b, &format!("{p}.attn"))?,
            norm2: NormParams::bind(b, &format!("{p}.norm2"))?,
            mlp: MlpParams::bind(b, &format!("{p}.mlp"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub patch_proj: LinearParams,
    pub cls_token: Var,
    pub pos_embed: Var,
}

impl EmbeddingParams {
    pub fn bind(b: &BoundParams) -> Result<Self> {
        Ok(EmbeddingParams {
            patch_proj: LinearParams::bind(b, "embed.patch_proj")?,
            cls_token: b.get("embed.cls_token")?,
            pos_embed: b.get("embed.pos_embed")?,
        })
    }
}

/// Multi-head attention of `queries` over `memory`, followed by `W_L`.
///
/// Returns the projected output and the raw attention node, whose cached
/// probabilities are readable through [`Tape::attention_probs`].
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    memory: Var,
    attn: &AttentionParams,
    shape: AttentionShape,
) -> Result<(Var, Var)> {
    let q = attn.q.apply(tape, queries)?;
    let k = attn.k.apply(tape, memory)?;
    let v = attn.v.apply(tape, memory)?;
    let heads = tape.attention(q, k, v, shape)?;
    let out = attn.out.apply(tape, heads)?;
    Ok((out, heads))
}

/// Self-attention over `groups` sequences of `tokens` rows each.
pub fn mhsa<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    attn: &AttentionParams,
    heads: usize,
    groups: usize,
) -> Result<(Var, Var)> {
    let rows = tape.value(x).rows();
    if groups == 0 || rows % groups != 0 {
        return Err(Error::shape("mhsa", format!("{rows} rows in {groups} groups")));
    }
    let tokens = rows / groups;
    let shape = AttentionShape {
        groups,
        q_rows: tokens,
        kv_rows: tokens,
        heads,
    };
    multi_head_attention(tape, x, x, attn, shape)
}

/// `Z_M = MHSA(Norm(T)) + T`, `Z_O = MLP(Norm(Z_M)) + Z_M`.
pub fn encoder_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    block: &EncoderBlockParams,
    heads: usize,
    groups: usize,
) -> Result<Var> {
    let h = block.norm1.apply(tape, x)?;
    let (a, _) = mhsa(tape, h, &block.attn, heads, groups)?;
    let zm = tape.add(a, x)?;
    let h = block.norm2.apply(tape, zm)?;
    let m = block.mlp.apply(tape, h)?;
    tape.add(m, zm)
}

/// Token sequences `[B*(N+1), D]`: per image the CLS token then the `N`
/// projected patches, each plus its position embedding.
pub fn embed<T: Real>(tape: &mut Tape<T>, patches: Var, emb: &EmbeddingParams, groups: usize) -> Result<Var> {
    let rows = tape.value(patches).rows();
    if groups == 0 || rows % groups != 0 {
        return Err(Error::shape("embed", format!("{rows} patch rows in {groups} groups")));
    }
    let n = rows / groups;
    let pos_rows = tape.value(emb.pos_embed).shape()[0];
    if pos_rows != n + 1 {
        return Err(Error::shape(
            "embed",
            format!("{pos_rows} position embeddings for {n} patches"),
        ));
    }
    let proj = emb.patch_proj.apply(tape, patches)?;
    let all = tape.concat_rows(&[emb.cls_token, proj])?;
    let order = (0..groups)
        .flat_map(|g| std::iter::once(0).chain((0..n).map(move |i| 1 + g * n + i)))
        .collect();
    let tokens = tape.gather_rows(all, order)?;
    let pos = tape.gather_rows(emb.pos_embed, (0..groups).flat_map(|_| 0..=n).collect())?;
    tape.add(tokens, pos)
}

/// Embeds a patch batch and runs every encoder block: `Z_O`, `[B*(N+1), D]`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    patches: Var,
    groups: usize,
) -> Result<Var> {
    let emb = EmbeddingParams::bind(bound)?;
    let mut x = embed(tape, patches, &emb, groups)?;
    for i in 0..cfg.encoder_depth {
        let block = EncoderBlockParams::bind(bound, i)?;
        x = encoder_block(tape, x, &block, cfg.heads, groups)?;
    }
    Ok(x)
}

/// Row indices of the CLS tokens and of the patch tokens in `[B*(N+1), D]`.
pub fn token_split(groups: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    let cls = (0..groups).map(|g| g * (n + 1)).collect();
    let patches = (0..groups)
        .flat_map(|g| (1..=n).map(move |i| g * (n + 1) + i))
        .collect();
    (cls, patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes() {
        let img = Tensor::<f32>::zeros([3, 224, 224]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);

        let img = Tensor::<f64>::from_fn([3, 16, 16], |i| i as f64);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[1, 768]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patchify_round_trip_and_order() {
        let img = Tensor::<f64>::from_fn([1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert_eq!(unpatchify(&p, 1, 4, 4, 2).unwrap(), img);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::<f64>::zeros([3, 10, 12]);
        assert!(matches!(patchify(&img, 4), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::paper().validate().is_ok());
        assert_eq!(ModelConfig::paper().num_patches(), 196);
        assert_eq!(ModelConfig::toy().num_patches(), 9);
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            crop_size: 10,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_split_indices() {
        let (cls, patches) = token_split(2, 3);
        assert_eq!(cls, vec![0, 4]);
        assert_eq!(patches, vec![1, 2, 3, 5, 6, 7]);
    }
}
