//! The two-modality encoder/decoder stack.
//!
//! Each modality owns a patch embedding, a CLS token, `enc_ms_layers`
//! Soft-MoE transformer blocks, and a dense decoder with two reconstruction
//! heads (one per source modality). The `enc_cs_layers` cross-sensor blocks
//! and the contrastive projection head exist once and serve both modalities.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointExtras};
pub use config::CsmoeConfig;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Initializer, Param, Parameterized, Tape, Tensor, Var};
use crate::softmoe::{block_forward, DenseBlockParams, MoeBlockParams, RoutingTensors};
use crate::tokenizer::{patchify, positional_embedding, sample_masks, MaskPair};

/// Stream-splitting constant for the second modality's mask seed.
pub const MASK_STREAM_SPLIT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// SAR (S1).
    #[serde(rename = "S1")]
    X,
    /// Multispectral (S2).
    #[serde(rename = "S2")]
    Y,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::X => Modality::Y,
            Modality::Y => Modality::X,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::X => "x",
            Modality::Y => "y",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::X => "S1",
            Modality::Y => "S2",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" | "x" | "X" => Ok(Modality::X),
            "S2" | "s2" | "y" | "Y" => Ok(Modality::Y),
            _ => Err(Error::Parameter(format!("unknown modality {s:?} (expected S1 or S2)"))),
        }
    }
}

/// `x·W + b`
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn init(init: &mut Initializer, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: init.trunc_normal(format!("{prefix}.w"), &[fan_in, fan_out]),
            bias: init.zeros(format!("{prefix}.b"), &[fan_out]),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.matmul(&tape.param(&self.weight))?.add_row(&tape.param(&self.bias))
    }

    /// Tape-free application to a plain matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.value)?;
        let n = self.bias.value.numel();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.value.data()[i % n];
        }
        Ok(y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Parameters owned by one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    pub channels: usize,
    pub patch_embed: Linear,
    /// `[1×d_enc]`
    pub cls: Param,
    pub encoder: Vec<MoeBlockParams>,
    pub dec_embed: Linear,
    /// `[1×d_dec]`
    pub mask_token: Param,
    pub decoder: Vec<DenseBlockParams>,
    /// Head reconstructing this modality from its own features.
    pub head_self: Linear,
    /// Head reconstructing this modality from the other modality's features.
    pub head_cross: Linear,
}

impl ModalityParams {
    fn init(init: &mut Initializer, cfg: &CsmoeConfig, m: Modality, channels: usize) -> Result<Self> {
        let p = m.suffix();
        let k = cfg.token_dim(channels);
        let patch_embed = Linear::init(init, &format!("{p}.patch_embed"), k, cfg.d_enc);
        let cls = init.zeros(format!("{p}.cls"), &[1, cfg.d_enc]);
        let encoder = (0..cfg.enc_ms_layers)
            .map(|i| {
                MoeBlockParams::init(
                    init,
                    &format!("{p}.enc.{i}"),
                    cfg.d_enc,
                    cfg.heads,
                    cfg.expert_hidden,
                    cfg.slots,
                    cfg.experts,
                    cfg.temperature,
                )
            })
            .collect::<Result<_>>()?;
        let dec_embed = Linear::init(init, &format!("{p}.dec_embed"), cfg.d_enc, cfg.d_dec);
        let mask_token = init.zeros(format!("{p}.mask_token"), &[1, cfg.d_dec]);
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                DenseBlockParams::init(init, &format!("{p}.dec.{i}"), cfg.d_dec, cfg.dec_heads, cfg.dec_mlp_hidden)
            })
            .collect::<Result<_>>()?;
        let o = m.other().suffix();
        let head_self = Linear::init(init, &format!("{p}.head_from_{p}"), cfg.d_dec, k);
        let head_cross = Linear::init(init, &format!("{p}.head_from_{o}"), cfg.d_dec, k);
        Ok(ModalityParams {
            channels,
            patch_embed,
            cls,
            encoder,
            dec_embed,
            mask_token,
            decoder,
            head_self,
            head_cross,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit(f);
        f(&self.cls);
        self.encoder.iter().for_each(|b| b.visit_params(f));
        self.dec_embed.visit(f);
        f(&self.mask_token);
        self.decoder.iter().for_each(|b| b.visit_params(f));
        self.head_self.visit(f);
        self.head_cross.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.cls);
        self.encoder.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.dec_embed.visit_mut(f);
        f(&mut self.mask_token);
        self.decoder.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.head_self.visit_mut(f);
        self.head_cross.visit_mut(f);
    }
}

/// The assembled model.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmoeModel {
    pub config: CsmoeConfig,
    pub x: ModalityParams,
    pub y: ModalityParams,
    /// Cross-sensor blocks; one parameter set used by both modalities.
    pub cross: Vec<MoeBlockParams>,
    pub projection: Linear,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

impl Parameterized for CsmoeModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.x.visit(f);
        self.y.visit(f);
        self.cross.iter().for_each(|b| b.visit_params(f));
        self.projection.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.x.visit_mut(f);
        self.y.visit_mut(f);
        self.cross.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.projection.visit_mut(f);
    }
}

/// Deterministic initialization from `cfg.seed`: weights from a normal
/// distribution with std 0.02 truncated at two standard deviations; biases,
/// CLS tokens, and mask tokens zero; layer-norm gains one.
pub fn init_model(cfg: &CsmoeConfig) -> Result<CsmoeModel> {
    cfg.validate()?;
    let mut init = Initializer::new(cfg.seed);
    let x = ModalityParams::init(&mut init, cfg, Modality::X, cfg.channels_x)?;
    let y = ModalityParams::init(&mut init, cfg, Modality::Y, cfg.channels_y)?;
    let cross = (0..cfg.enc_cs_layers)
        .map(|i| {
            MoeBlockParams::init(
                &mut init,
                &format!("cs.{i}"),
                cfg.d_enc,
                cfg.heads,
                cfg.expert_hidden,
                cfg.slots,
                cfg.experts,
                cfg.temperature,
            )
        })
        .collect::<Result<_>>()?;
    let projection = Linear::init(&mut init, "proj", cfg.d_enc, cfg.d_proj);
    Ok(CsmoeModel {
        config: cfg.clone(),
        x,
        y,
        cross,
        projection,
        enc_pos: positional_embedding(cfg.grid(), cfg.d_enc)?,
        dec_pos: positional_embedding(cfg.grid(), cfg.d_dec)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    ModalitySpecific,
    CrossSensor,
}

/// Routing tensors of one MoE layer invocation.
#[derive(Debug, Clone, Copy)]
pub struct RoutingRecord<'t> {
    pub modality: Modality,
    pub stack: Stack,
    pub layer: usize,
    pub routing: RoutingTensors<'t>,
}

/// Everything one paired forward pass produces.
pub struct ForwardArtifacts<'t> {
    /// `[(|𝒰|+1)×d_enc]`, CLS first.
    pub z_cs_x: Var<'t>,
    pub z_cs_y: Var<'t>,
    pub recon_x_from_x: Var<'t>,
    pub recon_y_from_y: Var<'t>,
    pub recon_x_from_y: Var<'t>,
    pub recon_y_from_x: Var<'t>,
    pub routing: Vec<RoutingRecord<'t>>,
    /// `[1×d_proj]` projected CLS rows.
    pub cls_proj_x: Var<'t>,
    pub cls_proj_y: Var<'t>,
    pub mask_x: MaskPair,
    pub mask_y: MaskPair,
    /// Reconstruction targets `[P×ρ²C]`.
    pub target_x: Tensor,
    pub target_y: Tensor,
}

impl<'t> ForwardArtifacts<'t> {
    /// Reconstruction of `target` from features of `source`.
    pub fn reconstruction(&self, target: Modality, source: Modality) -> Var<'t> {
        match (target, source) {
            (Modality::X, Modality::X) => self.recon_x_from_x,
            (Modality::Y, Modality::Y) => self.recon_y_from_y,
            (Modality::X, Modality::Y) => self.recon_x_from_y,
            (Modality::Y, Modality::X) => self.recon_y_from_x,
        }
    }

    pub fn target(&self, m: Modality) -> &Tensor {
        match m {
            Modality::X => &self.target_x,
            Modality::Y => &self.target_y,
        }
    }

    pub fn mask(&self, m: Modality) -> &MaskPair {
        match m {
            Modality::X => &self.mask_x,
            Modality::Y => &self.mask_y,
        }
    }
}

/// Ways of turning an encoded sequence into one embedding vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStrategy {
    /// Mean of the non-CLS rows.
    AvgWoCls,
    /// Mean of all rows.
    AvgAll,
    /// Raw CLS row.
    #[default]
    OnlyCls,
    /// ℓ2-normalized CLS row.
    NormCls,
    /// Projection head applied to the normalized CLS row, normalized again.
    NormProjCls,
}

impl std::str::FromStr for EmbeddingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parameter(format!("unknown embedding strategy {s:?}")))
    }
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::Evaluation("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

impl CsmoeModel {
    pub fn modality(&self, m: Modality) -> &ModalityParams {
        match m {
            Modality::X => &self.x,
            Modality::Y => &self.y,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityParams {
        match m {
            Modality::X => &mut self.x,
            Modality::Y => &mut self.y,
        }
    }

    /// Names of all parameters in visit order.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(p.name.clone()));
        v
    }

    /// Every MoE layer of the model: both modality-specific stacks, then the shared stack.
    pub fn moe_layers(&self) -> impl Iterator<Item = &crate::softmoe::SoftMoELayerParams> {
        self.x.encoder.iter().chain(&self.y.encoder).chain(&self.cross).map(|b| &b.moe)
    }

    /// Patch tokens of an image, checked against the configured geometry.
    pub fn tokens_of(&self, image: &Tensor, m: Modality) -> Result<Tensor> {
        let cfg = &self.config;
        let expect = [self.modality(m).channels, cfg.image_side, cfg.image_side];
        if image.shape() != expect {
            return Err(dim_err!("{m} image has shape {:?}, expected {:?}", image.shape(), expect));
        }
        Ok(patchify(image, cfg.patch_size)?.tokens)
    }

    /// Patchified target with optional per-patch normalization.
    pub fn target_of(&self, image: &Tensor, m: Modality) -> Result<Tensor> {
        let mut t = self.tokens_of(image, m)?;
        if self.config.norm_pix {
            let k = t.shape()[1];
            for row in t.data_mut().chunks_mut(k) {
                let mean = row.iter().sum::<f64>() / k as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
                let rs = 1.0 / (var + 1e-6).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            }
        }
        Ok(t)
    }

    /// Encodes the visible patches of one image: embed all `P` tokens, add
    /// positions, keep visible rows, prepend CLS, then run the modality blocks
    /// followed by the shared blocks. Returns `[(|𝒰|+1)×d_enc]`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        image: &Tensor,
        mask: &MaskPair,
        m: Modality,
    ) -> Result<(Var<'t>, Vec<RoutingRecord<'t>>)> {
        let tokens = self.tokens_of(image, m)?;
        self.encode_tokens(tape, &tokens, mask, m)
    }

    pub fn encode_tokens<'t>(
        &self,
        tape: &'t Tape,
        tokens: &Tensor,
        mask: &MaskPair,
        m: Modality,
    ) -> Result<(Var<'t>, Vec<RoutingRecord<'t>>)> {
        let p = self.config.tokens();
        if mask.len() != p || mask.unmasked.iter().any(|&i| i >= p) {
            return Err(dim_err!("mask covers {} positions, the {m} grid has {p}", mask.len()));
        }
        let params = self.modality(m);
        let emb = params.patch_embed.forward(&tape.constant(tokens.clone()))?;
        let emb = emb.add(&tape.constant(self.enc_pos.clone()))?;
        let cls = tape.param(&params.cls);
        let mut rows = Vec::with_capacity(mask.unmasked.len() + 1);
        rows.push((cls, 0));
        rows.extend(mask.unmasked.iter().map(|&i| (emb, i)));
        let mut z = Var::gather_rows(&rows)?;
        let mut routing = Vec::new();
        for (layer, block) in params.encoder.iter().enumerate() {
            let (out, r) = block_forward(&z, block)?;
            routing.push(RoutingRecord { modality: m, stack: Stack::ModalitySpecific, layer, routing: r });
            z = out;
        }
        for (layer, block) in self.cross.iter().enumerate() {
            let (out, r) = block_forward(&z, block)?;
            routing.push(RoutingRecord { modality: m, stack: Stack::CrossSensor, layer, routing: r });
            z = out;
        }
        Ok((z, routing))
    }

    /// Reconstructs all `P` patches of `target` from the encoded `source`
    /// sequence. Visible features are scattered back to their grid positions,
    /// masked positions receive the target's mask token, and the CLS row is
    /// dropped before decoding.
    pub fn decode<'t>(
        &self,
        z_cs: &Var<'t>,
        source_mask: &MaskPair,
        source: Modality,
        target: Modality,
    ) -> Result<Var<'t>> {
        let tape = z_cs.tape();
        let rows = z_cs.shape()[0];
        if rows != source_mask.unmasked.len() + 1 {
            return Err(dim_err!(
                "encoded sequence has {rows} rows but the mask leaves {} visible (+1 CLS)",
                source_mask.unmasked.len()
            ));
        }
        let p = self.config.tokens();
        let params = self.modality(target);
        let mut seq: Vec<(Var<'t>, usize)> = Vec::with_capacity(p);
        let mask_token = tape.param(&params.mask_token);
        if source_mask.unmasked.is_empty() {
            seq.extend((0..p).map(|_| (mask_token, 0)));
        } else {
            let visible: Vec<usize> = (1..rows).collect();
            let feats = params.dec_embed.forward(&z_cs.select_rows(&visible)?)?;
            let mut next = 0;
            for pos in 0..p {
                if source_mask.unmasked.get(next) == Some(&pos) {
                    seq.push((feats, next));
                    next += 1;
                } else {
                    seq.push((mask_token, 0));
                }
            }
        }
        let mut h = Var::gather_rows(&seq)?.add(&tape.constant(self.dec_pos.clone()))?;
        for block in &params.decoder {
            h = block.forward(&h)?;
        }
        let head = if source == target { &params.head_self } else { &params.head_cross };
        head.forward(&h)
    }

    /// Paired forward pass with independent masks drawn from `seed` and
    /// `seed ⊕ MASK_STREAM_SPLIT`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor, y: &Tensor, seed: u64) -> Result<ForwardArtifacts<'t>> {
        let (mx, my) = self.draw_masks(seed)?;
        self.forward_with_masks(tape, x, y, mx, my)
    }

    pub fn draw_masks(&self, seed: u64) -> Result<(MaskPair, MaskPair)> {
        let p = self.config.tokens();
        let r = self.config.mask_ratio;
        Ok((sample_masks(p, r, seed)?, sample_masks(p, r, seed ^ MASK_STREAM_SPLIT)?))
    }

    pub fn forward_with_masks<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        y: &Tensor,
        mask_x: MaskPair,
        mask_y: MaskPair,
    ) -> Result<ForwardArtifacts<'t>> {
        let (z_cs_x, mut routing) = self.encode(tape, x, &mask_x, Modality::X)?;
        let (z_cs_y, ry) = self.encode(tape, y, &mask_y, Modality::Y)?;
        routing.extend(ry);
        let recon_x_from_x = self.decode(&z_cs_x, &mask_x, Modality::X, Modality::X)?;
        let recon_y_from_y = self.decode(&z_cs_y, &mask_y, Modality::Y, Modality::Y)?;
        let recon_x_from_y = self.decode(&z_cs_y, &mask_y, Modality::Y, Modality::X)?;
        let recon_y_from_x = self.decode(&z_cs_x, &mask_x, Modality::X, Modality::Y)?;
        let cls_proj_x = self.projection.forward(&z_cs_x.select_rows(&[0])?)?;
        let cls_proj_y = self.projection.forward(&z_cs_y.select_rows(&[0])?)?;
        Ok(ForwardArtifacts {
            z_cs_x,
            z_cs_y,
            recon_x_from_x,
            recon_y_from_y,
            recon_x_from_y,
            recon_y_from_x,
            routing,
            cls_proj_x,
            cls_proj_y,
            target_x: self.target_of(x, Modality::X)?,
            target_y: self.target_of(y, Modality::Y)?,
            mask_x,
            mask_y,
        })
    }

    /// Encodes a whole image (no masking) and reduces it to one embedding.
    pub fn embed_image(&self, image: &Tensor, m: Modality, strategy: EmbeddingStrategy) -> Result<Tensor> {
        let tape = Tape::new();
        let (z, _) = self.encode(&tape, image, &MaskPair::none(self.config.tokens()), m)?;
        self.build_embedding(&z.value(), strategy)
    }

    /// Reduces an encoded `[T×d]` sequence (CLS in row 0) to a vector.
    pub fn build_embedding(&self, tokens: &Tensor, strategy: EmbeddingStrategy) -> Result<Tensor> {
        build_embedding(tokens, strategy, Some(&self.projection))
    }
}

/// See [`EmbeddingStrategy`]. `projection` is required only for `NormProjCls`.
pub fn build_embedding(tokens: &Tensor, strategy: EmbeddingStrategy, projection: Option<&Linear>) -> Result<Tensor> {
    let (t, d) = tokens.dims2()?;
    if t == 0 {
        return Err(dim_err!("cannot build an embedding from an empty sequence"));
    }
    let mean_of = |rows: std::ops::Range<usize>| -> Result<Tensor> {
        if rows.is_empty() {
            return Err(dim_err!("no non-CLS rows to average"));
        }
        let n = rows.len() as f64;
        let mut acc = vec![0.0; d];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(tokens.row(r)) {
                *a += v;
            }
        }
        Tensor::new(&[d], acc.into_iter().map(|v| v / n).collect())
    };
    match strategy {
        EmbeddingStrategy::AvgWoCls => mean_of(1..t),
        EmbeddingStrategy::AvgAll => mean_of(0..t),
        EmbeddingStrategy::OnlyCls => Tensor::new(&[d], tokens.row(0).to_vec()),
        EmbeddingStrategy::NormCls => {
            let mut v = tokens.row(0).to_vec();
            l2_normalize(&mut v)?;
            Tensor::new(&[d], v)
        }
        EmbeddingStrategy::NormProjCls => {
            let proj = projection.ok_or_else(|| Error::Parameter("norm_proj_cls needs a projection head".into()))?;
            let mut v = tokens.row(0).to_vec();
            l2_normalize(&mut v)?;
            let out = proj.apply(&Tensor::new(&[1, d], v)?)?;
            let mut out = out.into_data();
            l2_normalize(&mut out)?;
            let n = out.len();
            Tensor::new(&[n], out)
        }
    }
}
