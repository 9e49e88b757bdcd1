use crate::error::{Error, Result};
use crate::quality_decoder::{decode, init_decoder, DecoderOutput};
use crate::tensor::{BoundParams, ParamSet, Real, Rng, Tape, Tensor, Var};
use crate::vit_encoder::{encode, image_dims, init_encoder, patchify_batch, ModelConfig, INIT_STD, PIXEL_MEAN, PIXEL_STD};

/// A complete named parameter set plus the configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct DeiqtModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

/// Tape handles for one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub bound: BoundParams,
    /// `[B*(N+1), D]` encoder output `Z_O`.
    pub encoded: Var,
    pub decoder: DecoderOutput,
}

/// Everything [`DeiqtModel::predict`] reports for one image.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub score: T,
    pub panel_scores: Vec<T>,
    /// `[L, D]` inputs to the scoring head.
    pub quality_embeddings: Tensor<T>,
    /// `[1, D]` encoder CLS output.
    pub cls_output: Tensor<T>,
    /// Per decoder layer, `[heads, L, N]` cross-attention weights.
    pub attention_maps: Vec<Tensor<T>>,
}

impl<T: Real> DeiqtModel<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    /// Truncated-normal init with the given standard deviation; norms start at
    /// unit gain and zero bias, linear biases at zero.
    pub fn init_with_std(config: ModelConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        init_encoder(&mut params, &config, std, rng);
        init_decoder(&mut params, &config, std, rng);
        Ok(DeiqtModel { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Self::init(config.clone(), &mut Rng::new(0))?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    "from_params",
                    format!("`{name}` has {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        if params.len() != reference.params.len() {
            let extra = params
                .names()
                .find(|n| !reference.params.contains(n))
                .unwrap_or_default();
            return Err(Error::Contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(DeiqtModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> DeiqtModel<U> {
        DeiqtModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let (c, h, w) = image_dims(image)?;
        let cfg = &self.config;
        if c != cfg.channels || h != cfg.crop_size || w != cfg.crop_size {
            return Err(Error::shape(
                "model input",
                format!(
                    "image {c}x{h}x{w}, model expects {}x{}x{}",
                    cfg.channels, cfg.crop_size, cfg.crop_size
                ),
            ));
        }
        Ok(())
    }

    /// Standardized batch patch matrix `[B*N, p²C]` for crops of the
    /// configured size.
    pub fn patch_batch(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        for img in images {
            self.check_image(img)?;
        }
        let (mean, inv) = (T::lit(PIXEL_MEAN), T::lit(1.0 / PIXEL_STD));
        Ok(patchify_batch(images, self.config.patch_size)?.map(|v| (v - mean) * inv))
    }

    /// Records a full forward pass for a prepared patch batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: BoundParams, patches: Var, groups: usize) -> Result<ForwardPass> {
        let encoded = encode(tape, &bound, &self.config, patches, groups)?;
        let decoder = decode(tape, &bound, &self.config, encoded, groups)?;
        Ok(ForwardPass {
            bound,
            encoded,
            decoder,
        })
    }

    /// Binds parameters, patchifies `images`, and records the forward pass.
    pub fn forward_images(&self, tape: &mut Tape<T>, images: &[&Tensor<T>]) -> Result<ForwardPass> {
        let patches = self.patch_batch(images)?;
        let bound = self.params.bind(tape);
        let pv = tape.constant(patches);
        self.forward(tape, bound, pv, images.len())
    }

    /// Scores for a batch of crops (no gradients kept).
    pub fn predict_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_images(&mut tape, images)?;
        Ok(tape.value(pass.decoder.score).data().to_vec())
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_images(&mut tape, &[image])?;
        let dec = &pass.decoder;
        let attention_maps = dec
            .cross_attention
            .iter()
            .map(|&w| {
                let p = tape.attention_probs(w).expect("attention node");
                let s = p.shape();
                p.clone().reshape([s[1], s[2], s[3]])
            })
            .collect::<Result<_>>()?;
        Ok(Prediction {
            score: tape.value(dec.score).data()[0],
            panel_scores: tape.value(dec.panel_scores).data().to_vec(),
            quality_embeddings: tape.value(dec.quality).clone(),
            cls_output: tape.value(dec.cls).clone(),
            attention_maps,
        })
    }
}
