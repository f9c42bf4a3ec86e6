//! Cross-attention fusion modules, the mask-token predictor, and the
//! prediction objective.
//!
//! Parameter prefixes: `x` is the online fusion module, `xt` its EMA twin,
//! `pred` the predictor. Encoders live under [`IMAGE_PREFIX`] and
//! [`TEXT_PREFIX`].

use std::collections::BTreeSet;

use rand::Rng;

use crate::encoders::{
    self, encode_patches, encode_text, sincos_pos_2d, EncoderConfig, IMAGE_PREFIX, TEXT_PREFIX,
};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::nn;
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Graph, ParamStore};

pub const ONLINE_PREFIX: &str = "x";
pub const TARGET_PREFIX: &str = "xt";
pub const PREDICTOR_PREFIX: &str = "pred";

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    /// Width of incoming patch representations; projected when it differs
    /// from `hidden`.
    pub image_dim: usize,
    /// Width of incoming text representations; projected when it differs
    /// from `hidden`.
    pub text_dim: usize,
}

impl Default for CrossAttnConfig {
    fn default() -> Self {
        CrossAttnConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            mlp_ratio: 4,
            image_dim: 64,
            text_dim: 64,
        }
    }
}

impl CrossAttnConfig {
    /// Small / Medium / Large variants at full scale, fed by a 1280-wide
    /// ViT-H image encoder and a 768-wide text encoder.
    pub fn small() -> Self {
        Self::full_scale(4, 8, 768)
    }

    pub fn medium() -> Self {
        Self::full_scale(6, 10, 768)
    }

    pub fn large() -> Self {
        Self::full_scale(8, 12, 1024)
    }

    fn full_scale(layers: usize, heads: usize, hidden: usize) -> Self {
        CrossAttnConfig {
            layers,
            heads,
            hidden,
            mlp_ratio: 4,
            image_dim: 1280,
            text_dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("fusion needs at least one layer".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            depth: 2,
            heads: 4,
            width: 64,
            mlp_ratio: 4,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "predictor width {} must be divisible by heads {} and by 4",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/M) sum_i sum_{j in B_i} ||pred_j - target_j||^2`.
    #[default]
    SquaredL2,
    /// Mean absolute difference per block, averaged over blocks.
    L1,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "squared_l2" => Ok(LossKind::SquaredL2),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::SquaredL2 => "l2",
            LossKind::L1 => "l1",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: CrossAttnConfig,
    pub predictor: PredictorConfig,
    pub loss: LossKind,
    pub freeze_predictor: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.predictor.validate()?;
        if self.fusion.image_dim != self.encoder.embed_dim || self.fusion.text_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "fusion input widths ({}, {}) must match encoder embed_dim {}",
                self.fusion.image_dim, self.fusion.text_dim, self.encoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Exact learned-parameter count of one fusion module.
pub fn param_count(cfg: &CrossAttnConfig) -> usize {
    let h = cfg.hidden;
    let proj = |d: usize| if d == h { 0 } else { d * h + h };
    let attn = 4 * (h * h + h);
    let m = h * cfg.mlp_ratio;
    let mlp = h * m + m + m * h + h;
    let norms = 3 * 2 * h;
    proj(cfg.image_dim) + proj(cfg.text_dim) + cfg.layers * (2 * attn + mlp + norms)
}

pub fn init_fusion<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    cfg: &CrossAttnConfig,
    trainable: bool,
) {
    let h = cfg.hidden;
    if cfg.image_dim != h {
        nn::init_linear(store, rng, &format!("{prefix}.img_in"), cfg.image_dim, h, trainable);
    }
    if cfg.text_dim != h {
        nn::init_linear(store, rng, &format!("{prefix}.txt_in"), cfg.text_dim, h, trainable);
    }
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        nn::init_layer_norm(store, &format!("{p}.norm1"), h, trainable);
        nn::init_attention(store, rng, &format!("{p}.self_attn"), h, h, trainable);
        nn::init_layer_norm(store, &format!("{p}.norm2"), h, trainable);
        nn::init_attention(store, rng, &format!("{p}.cross_attn"), h, h, trainable);
        nn::init_layer_norm(store, &format!("{p}.norm3"), h, trainable);
        nn::init_mlp(store, rng, &format!("{p}.mlp"), h, h * cfg.mlp_ratio, trainable);
    }
}

/// Text-to-image fusion: patch tokens are queries, text tokens keys/values.
/// Output keeps one row per input patch.
pub fn fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    cfg: &CrossAttnConfig,
    patch_reps: Var,
    text_reps: Var,
) -> Result<Var> {
    let (pw, tw) = (g.value(patch_reps).cols(), g.value(text_reps).cols());
    if pw != cfg.image_dim || tw != cfg.text_dim {
        return Err(Error::shape(format!(
            "fusion expects widths ({}, {}), got ({pw}, {tw})",
            cfg.image_dim, cfg.text_dim
        )));
    }
    let mut x = if cfg.image_dim != cfg.hidden {
        nn::linear(g, &format!("{prefix}.img_in"), patch_reps)?
    } else {
        patch_reps
    };
    let text = if cfg.text_dim != cfg.hidden {
        nn::linear(g, &format!("{prefix}.txt_in"), text_reps)?
    } else {
        text_reps
    };
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        let h = nn::layer_norm(g, &format!("{p}.norm1"), x)?;
        let h = nn::attention(g, &format!("{p}.self_attn"), h, h, cfg.heads)?;
        x = g.tape.add(x, h)?;
        let h = nn::layer_norm(g, &format!("{p}.norm2"), x)?;
        let h = nn::attention(g, &format!("{p}.cross_attn"), h, text, cfg.heads)?;
        x = g.tape.add(x, h)?;
        let h = nn::layer_norm(g, &format!("{p}.norm3"), x)?;
        let h = nn::mlp(g, &format!("{p}.mlp"), h)?;
        x = g.tape.add(x, h)?;
    }
    Ok(x)
}

pub fn init_predictor<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &PredictorConfig,
    in_dim: usize,
    trainable: bool,
) {
    let w = cfg.width;
    nn::init_linear(store, rng, &format!("{PREDICTOR_PREFIX}.in_proj"), in_dim, w, trainable);
    let mask: Vec<T> = (0..w).map(|_| T::from_f64(rng.gen_range(-0.02..0.02))).collect();
    store.insert(
        format!("{PREDICTOR_PREFIX}.mask_token"),
        Tensor::new([1, w], mask).expect("finite init"),
        trainable,
    );
    for l in 0..cfg.depth {
        nn::init_block(store, rng, &format!("{PREDICTOR_PREFIX}.block{l}"), w, cfg.mlp_ratio, trainable);
    }
    if cfg.depth > 0 {
        nn::init_layer_norm(store, &format!("{PREDICTOR_PREFIX}.norm"), w, trainable);
    }
    nn::init_linear(store, rng, &format!("{PREDICTOR_PREFIX}.out_proj"), w, in_dim, trainable);
}

/// Predicts representations for the patches in `target_positions` from the
/// context representations `s_x` (rows ordered as `context_positions`).
/// Output row `k` corresponds to `target_positions[k]`.
pub fn predict<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &PredictorConfig,
    s_x: Var,
    context_positions: &[usize],
    target_positions: &[usize],
    grid: (usize, usize),
) -> Result<Var> {
    if g.value(s_x).rows() != context_positions.len() {
        return Err(Error::shape(format!(
            "{} context rows for {} positions",
            g.value(s_x).rows(),
            context_positions.len()
        )));
    }
    let ctx: BTreeSet<usize> = context_positions.iter().copied().collect();
    if let Some(j) = target_positions.iter().find(|j| ctx.contains(j)) {
        return Err(Error::shape(format!("target position {j} is also a context position")));
    }
    if target_positions.is_empty() {
        return Err(Error::shape("no target positions"));
    }
    let n = grid.0 * grid.1;
    if let Some(j) = context_positions.iter().chain(target_positions).find(|&&j| j >= n) {
        return Err(Error::shape(format!("position {j} outside a {n}-patch grid")));
    }
    let pos = sincos_pos_2d::<T>(grid.0, grid.1, cfg.width)?;

    let x = nn::linear(g, &format!("{PREDICTOR_PREFIX}.in_proj"), s_x)?;
    let ctx_pos = g.constant(pos.gather_rows(context_positions)?);
    let x = g.tape.add(x, ctx_pos)?;

    let token = g.param(&format!("{PREDICTOR_PREFIX}.mask_token"))?;
    let masks = g.tape.gather_rows(token, &vec![0; target_positions.len()])?;
    let tgt_pos = g.constant(pos.gather_rows(target_positions)?);
    let masks = g.tape.add(masks, tgt_pos)?;

    let mut seq = g.tape.concat_rows(&[x, masks])?;
    for l in 0..cfg.depth {
        seq = nn::block(g, &format!("{PREDICTOR_PREFIX}.block{l}"), seq, cfg.heads)?;
    }
    if cfg.depth > 0 {
        seq = nn::layer_norm(g, &format!("{PREDICTOR_PREFIX}.norm"), seq)?;
    }
    let c = context_positions.len();
    let slots: Vec<usize> = (c..c + target_positions.len()).collect();
    let out = g.tape.gather_rows(seq, &slots)?;
    nn::linear(g, &format!("{PREDICTOR_PREFIX}.out_proj"), out)
}

/// Prediction objective over `M` target blocks.
pub fn loss_lp<T: Scalar>(
    g: &mut Graph<'_, T>,
    predictions: &[Var],
    targets: &[Tensor<T>],
    kind: LossKind,
) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape(format!(
            "{} prediction blocks for {} target blocks",
            predictions.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (&p, t) in predictions.iter().zip(targets) {
        if g.value(p).shape() != t.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                g.value(p).shape(),
                t.shape()
            )));
        }
        let numel = t.numel();
        let t = g.constant(t.clone());
        let d = g.tape.sub(p, t)?;
        terms.push(match kind {
            LossKind::SquaredL2 => g.tape.sum_squares(d),
            LossKind::L1 => {
                let s = g.tape.sum_abs(d);
                g.tape.scale(s, 1.0 / numel as f64)
            }
        });
    }
    let total = if terms.len() == 1 {
        terms[0]
    } else {
        let stacked = g.tape.concat_rows(&terms)?;
        g.tape.sum(stacked)
    };
    Ok(g.tape.scale(total, 1.0 / predictions.len() as f64))
}

/// One example ready for the model: patch rows and caption token ids.
#[derive(Clone, Debug)]
pub struct ModelInput<'a, T = f32> {
    pub patches: &'a Tensor<T>,
    pub grid: (usize, usize),
    pub ids: &'a [u32],
}

/// Target representations `s_y(i)` for every target block, computed from
/// the full image through the EMA module, entirely outside the gradient
/// path. Also returns the full `s_y`.
pub fn make_targets<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &ModelInput<'_, T>,
    masks: &MaskSet,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let mut g = Graph::no_grad(params);
    let s_i = encode_patches(&mut g, &cfg.encoder, input.patches, input.grid, None)?;
    let s_t = encode_text(&mut g, &cfg.encoder, input.ids)?;
    let s_y = fuse(&mut g, TARGET_PREFIX, &cfg.fusion, s_i, s_t)?;
    let s_y = g.value(s_y).clone();
    let blocks = masks
        .targets
        .iter()
        .map(|b| s_y.gather_rows(b.indices()))
        .collect::<Result<_>>()?;
    Ok((blocks, s_y))
}

/// Context representations `s_x`: visible context patches encoded and fused
/// through the online module with the caption.
pub fn make_context<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    input: &ModelInput<'_, T>,
    context: &[usize],
) -> Result<Var> {
    if context.is_empty() {
        return Err(Error::Sampling("empty context".into()));
    }
    let s_i = encode_patches(g, &cfg.encoder, input.patches, input.grid, Some(context))?;
    let s_t = encode_text(g, &cfg.encoder, input.ids)?;
    fuse(g, ONLINE_PREFIX, &cfg.fusion, s_i, s_t)
}

/// Full objective for one example. `context_input` normally equals
/// `target_input`; they differ only when probing how much the caption on
/// the context path matters.
pub fn example_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    target_input: &ModelInput<'_, T>,
    context_input: &ModelInput<'_, T>,
    masks: &MaskSet,
) -> Result<(Var, Tensor<T>)> {
    let (targets, s_y) = make_targets(g.params(), cfg, target_input, masks)?;
    let s_x = make_context(g, cfg, context_input, &masks.context)?;
    let preds = masks
        .targets
        .iter()
        .map(|b| predict(g, &cfg.predictor, s_x, &masks.context, b.indices(), context_input.grid))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_lp(g, &preds, &targets, cfg.loss)?, s_y))
}

/// Fresh parameters: frozen encoders, online fusion `x`, its twin `xt`
/// (an exact copy, never gradient-trained), and the predictor.
pub fn init_model<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    encoders::init_image_encoder(&mut store, rng, &cfg.encoder);
    encoders::init_text_encoder(&mut store, rng, &cfg.encoder);
    init_fusion(&mut store, rng, ONLINE_PREFIX, &cfg.fusion, true);
    store.copy_prefix(&format!("{ONLINE_PREFIX}."), &format!("{TARGET_PREFIX}."));
    init_predictor(&mut store, rng, &cfg.predictor, cfg.fusion.hidden, !cfg.freeze_predictor);
    Ok(store)
}

/// Prefixes whose tensors never receive gradient updates under `cfg`.
pub fn frozen_prefixes(cfg: &ModelConfig) -> Vec<String> {
    let mut out = vec![format!("{TARGET_PREFIX}.")];
    if cfg.encoder.frozen {
        out.push(format!("{IMAGE_PREFIX}."));
        out.push(format!("{TEXT_PREFIX}."));
    }
    if cfg.freeze_predictor {
        out.push(format!("{PREDICTOR_PREFIX}."));
    }
    out
}
