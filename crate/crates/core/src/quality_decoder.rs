//! Quality-aware decoder: CLS token plus attention-panel embeddings become
//! decoder queries, which cross-attend to the encoder's patch features and
//! yield one quality embedding (and one score) per panel member.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{AttentionShape, BoundParams, ParamSet, Real, Rng, Tape, Tensor, Var};
use crate::vit_encoder::{
    init_attention, init_linear, init_mlp, init_norm, multi_head_attention, mhsa, token_split,
    AttentionParams, LinearParams, MlpParams, ModelConfig, NormParams,
};

/// Which parts of the decoder pathway are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// CLS + panel queries, query self-attention, cross-attention decoder.
    Full,
    /// Encoder CLS output straight into the scoring head.
    EncoderOnly,
    /// CLS + panel embeddings straight into the head, no decoder.
    PanelNoDecoder,
    /// Decoder with a single learnable randomly initialized query; CLS unused.
    DecoderRandomQueries,
    /// Decoder with the CLS token as its single query, no panel.
    DecoderClsQueries,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EncoderOnly,
        Variant::PanelNoDecoder,
        Variant::DecoderRandomQueries,
        Variant::DecoderClsQueries,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EncoderOnly => "encoder-only",
            Variant::PanelNoDecoder => "panel-no-decoder",
            Variant::DecoderRandomQueries => "decoder-random-queries",
            Variant::DecoderClsQueries => "decoder-cls-queries",
        }
    }

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DEIQT",
            Variant::EncoderOnly => "ViT",
            Variant::PanelNoDecoder => "ViT+AP",
            Variant::DecoderRandomQueries => "ViT+Decoder(R*)",
            Variant::DecoderClsQueries => "ViT+Decoder(CLS)",
        }
    }

    pub fn has_panel(self) -> bool {
        matches!(self, Variant::Full | Variant::PanelNoDecoder)
    }

    pub fn has_decoder(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::DecoderRandomQueries | Variant::DecoderClsQueries
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl ModelConfig {
    /// Number of scores produced per image.
    pub fn effective_panel(&self) -> usize {
        if self.variant.has_panel() {
            self.panel_size
        } else {
            1
        }
    }
}

pub fn init_decoder<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, std: f64, rng: &mut Rng) {
    let d = cfg.token_dim;
    if cfg.variant.has_panel() {
        params.insert(
            "decoder.panel",
            Tensor::from_fn([cfg.panel_size, d], |_| T::from_f64(rng.trunc_normal(std))),
        );
    }
    if cfg.variant == Variant::DecoderRandomQueries {
        params.insert(
            "decoder.query_embed",
            Tensor::from_fn([1, d], |_| T::from_f64(rng.trunc_normal(std))),
        );
    }
    if cfg.variant.has_decoder() {
        init_norm(params, "decoder.query.norm", d);
        init_attention(params, "decoder.query.attn", d, std, rng);
        for i in 0..cfg.decoder_depth {
            let p = format!("decoder.{i}");
            init_norm(params, &format!("{p}.norm"), d);
            init_attention(params, &format!("{p}.cross"), d, std, rng);
            init_mlp(params, &format!("{p}.mlp"), d, cfg.mlp_hidden(), std, rng);
        }
    }
    init_linear(params, "head.fc1", d, (d / 2).max(1), std, rng);
    init_linear(params, "head.fc2", (d / 2).max(1), 1, std, rng);
}

/// Norm + self-attention producing the decoder queries.
#[derive(Clone, Copy, Debug)]
pub struct QueryBlockParams {
    pub norm: NormParams,
    pub attn: AttentionParams,
}

impl QueryBlockParams {
    pub fn bind(b: &BoundParams) -> Result<Self> {
        Ok(QueryBlockParams {
            norm: NormParams::bind(b, "decoder.query.norm")?,
            attn: AttentionParams::bind(b, "decoder.query.attn")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockParams {
    pub norm: NormParams,
    pub cross: AttentionParams,
    pub mlp: MlpParams,
}

impl DecoderBlockParams {
    pub fn bind(b: &BoundParams, index: usize) -> Result<Self> {
        let p = format!("decoder.{index}");
        Ok(DecoderBlockParams {
            norm: NormParams::bind(b, &format!("{p}.norm"))?,
            cross: AttentionParams::bind(b, &format!("{p}.cross"))?,
            mlp: MlpParams::bind(b, &format!("{p}.mlp"))?,
        })
    }
}

/// Two-layer scoring head `D -> D/2 -> 1`, shared by all panel members.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl HeadParams {
    pub fn bind(b: &BoundParams) -> Result<Self> {
        Ok(HeadParams {
            fc1: LinearParams::bind(b, "head.fc1")?,
            fc2: LinearParams::bind(b, "head.fc2")?,
        })
    }

    /// `[R, D] -> [R, 1]`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.apply(tape, h)
    }
}

/// `[B, D]` CLS rows and `[L, D]` panel → `[B*L, D]`, row `b*L + l` = `cls_b + J_l`.
pub fn panel_inputs<T: Real>(tape: &mut Tape<T>, cls: Var, panel: Var) -> Result<Var> {
    let (b, d) = (tape.value(cls).rows(), tape.value(cls).cols());
    let (l, dj) = (tape.value(panel).rows(), tape.value(panel).cols());
    if d != dj {
        return Err(Error::shape(
            "panel_inputs",
            format!("CLS width {d} vs panel width {dj}"),
        ));
    }
    let expanded = tape.gather_rows(cls, (0..b).flat_map(|i| std::iter::repeat_n(i, l)).collect())?;
    let tiled = tape.gather_rows(panel, (0..b).flat_map(|_| 0..l).collect())?;
    tape.add(expanded, tiled)
}

/// `Q̂ = MHSA(Norm(x)) + x` over each image's `L` query rows.
pub fn make_queries<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    block: &QueryBlockParams,
    heads: usize,
    groups: usize,
) -> Result<Var> {
    let h = block.norm.apply(tape, x)?;
    let (a, _) = mhsa(tape, h, &block.attn, heads, groups)?;
    tape.add(a, x)
}

/// `S = MLP(MHCA(Norm(q), K_d, V_d) + q)` with keys and values projected from
/// the (unnormalized) patch features.
///
/// `q` is `[groups*L, D]`, `patch_feats` is `[groups*N, D]`. Returns `S` and
/// the attention node holding the `[groups, heads, L, N]` weights.
pub fn cross_attend<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    patch_feats: Var,
    block: &DecoderBlockParams,
    heads: usize,
    groups: usize,
) -> Result<(Var, Var)> {
    let qr = tape.value(q).rows();
    let kr = tape.value(patch_feats).rows();
    if groups == 0 || qr % groups != 0 || kr % groups != 0 {
        return Err(Error::shape(
            "cross_attend",
            format!("{qr} query rows / {kr} key rows in {groups} groups"),
        ));
    }
    if kr == 0 {
        return Err(Error::Contract("cross_attend needs at least one patch".into()));
    }
    let shape = AttentionShape {
        groups,
        q_rows: qr / groups,
        kv_rows: kr / groups,
        heads,
    };
    let nq = block.norm.apply(tape, q)?;
    let (a, weights) = multi_head_attention(tape, nq, patch_feats, &block.cross, shape)?;
    let r = tape.add(a, q)?;
    let s = block.mlp.apply(tape, r)?;
    Ok((s, weights))
}

/// Decoder-side outputs for a batch of `groups` images.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[B, 1]` mean panel score per image.
    pub score: Var,
    /// `[B*L, 1]`.
    pub panel_scores: Var,
    /// `[B*L, D]` inputs to the scoring head.
    pub quality: Var,
    /// `[B, D]` encoder CLS outputs.
    pub cls: Var,
    /// One attention node per decoder layer.
    pub cross_attention: Vec<Var>,
    pub panel: usize,
}

/// Runs the configured decoder pathway on encoder output `[B*(N+1), D]`.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    encoded: Var,
    groups: usize,
) -> Result<DecoderOutput> {
    let n = cfg.num_patches();
    let (cls_idx, patch_idx) = token_split(groups, n);
    let cls = tape.gather_rows(encoded, cls_idx)?;
    let panel = cfg.effective_panel();

    let inputs = match cfg.variant {
        Variant::Full | Variant::PanelNoDecoder => {
            let j = bound.get("decoder.panel")?;
            panel_inputs(tape, cls, j)?
        }
        Variant::EncoderOnly | Variant::DecoderClsQueries => cls,
        Variant::DecoderRandomQueries => {
            let r = bound.get("decoder.query_embed")?;
            tape.gather_rows(r, vec![0; groups])?
        }
    };

    let mut cross_attention = Vec::new();
    let quality = if cfg.variant.has_decoder() {
        let patches = tape.gather_rows(encoded, patch_idx)?;
        let qb = QueryBlockParams::bind(bound)?;
        let mut s = make_queries(tape, inputs, &qb, cfg.heads, groups)?;
        for i in 0..cfg.decoder_depth {
            let block = DecoderBlockParams::bind(bound, i)?;
            let (next, w) = cross_attend(tape, s, patches, &block, cfg.heads, groups)?;
            cross_attention.push(w);
            s = next;
        }
        s
    } else {
        inputs
    };

    let head = HeadParams::bind(bound)?;
    let panel_scores = head.apply(tape, quality)?;
    let score = tape.group_mean(panel_scores, panel)?;
    Ok(DecoderOutput {
        score,
        panel_scores,
        quality,
        cls,
        cross_attention,
        panel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn panel_inputs_cases() {
        let mut tape = Tape::new();
        let cls = leaf(&mut tape, &[1, 2], &[1.0, 2.0]);
        let zero_j = leaf(&mut tape, &[3, 2], &[0.0; 6]);
        let out = panel_inputs(&mut tape, cls, zero_j).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

        let j = leaf(&mut tape, &[1, 2], &[0.5, -1.0]);
        let out = panel_inputs(&mut tape, cls, j).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 1.0]);

        let zero_cls = leaf(&mut tape, &[1, 2], &[0.0, 0.0]);
        let j = leaf(&mut tape, &[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let out = panel_inputs(&mut tape, zero_cls, j).unwrap();
        assert_eq!(tape.value(out).data(), &[0.1, 0.2, 0.3, 0.4]);

        let bad = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        assert!(panel_inputs(&mut tape, cls, bad).is_err());
    }

    #[test]
    fn panel_inputs_batched_layout() {
        let mut tape = Tape::new();
        let cls = leaf(&mut tape, &[2, 1], &[10.0, 20.0]);
        let j = leaf(&mut tape, &[3, 1], &[1.0, 2.0, 3.0]);
        let out = panel_inputs(&mut tape, cls, j).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
