//! Soft mixture-of-experts routing and the transformer blocks built around it.
//!
//! Routing for tokens `z[P×d]` and slot embeddings `Φ[S×d]`:
//!
//! ```text
//! logits[ϑ,n]   = ⟨Φ_ϑ, z_n⟩
//! dispatch α    = softmax over n of logits/τ      (rows sum to 1)
//! combine  α̂    = softmax over ϑ of logits        (columns sum to 1)
//! slots    s_ϑ  = Σ_n α[ϑ,n] z_n
//! output   y_n  = Σ_ϑ α̂[ϑ,n] Expert_{map(ϑ)}(s_ϑ)
//! ```
//!
//! Exactly `S` expert invocations happen per layer, whatever `P` is.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::numerics::{Initializer, Param, Parameterized, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// Linear experts; used to test routing arithmetic in isolation.
    Identity,
}

/// Two-layer feed-forward network `act(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FeedForward {
    pub fn init(init: &mut Initializer, prefix: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            w1: init.trunc_normal(format!("{prefix}.w1"), &[d, hidden]),
            b1: init.zeros(format!("{prefix}.b1"), &[hidden]),
            w2: init.trunc_normal(format!("{prefix}.w2"), &[hidden, d]),
            b2: init.zeros(format!("{prefix}.b2"), &[d]),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>, act: Activation) -> Result<Var<'t>> {
        let tape = x.tape();
        let h = x.matmul(&tape.param(&self.w1))?.add_row(&tape.param(&self.b1))?;
        let h = match act {
            Activation::Gelu => h.gelu(),
            Activation::Identity => h,
        };
        h.matmul(&tape.param(&self.w2))?.add_row(&tape.param(&self.b2))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        [&self.w1, &self.b1, &self.w2, &self.b2].into_iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2].into_iter().for_each(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNormParams {
    pub fn init(init: &mut Initializer, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: init.ones(format!("{prefix}.gain"), &[d]),
            bias: init.zeros(format!("{prefix}.bias"), &[d]),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.layer_norm(&tape.param(&self.gain), &tape.param(&self.bias), LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product self-attention. Keys carry no bias: a key
/// bias shifts every score of a query row equally and cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(init: &mut Initializer, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(param_err!("width {d} is not divisible by {heads} heads"));
        }
        let mut w = |n: &str| init.trunc_normal(format!("{prefix}.{n}"), &[d, d]);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| init.zeros(format!("{prefix}.{n}"), &[d]);
        let (bq, bv, bo) = (b("bq"), b("bv"), b("bo"));
        Ok(AttentionParams { wq, bq, wk, wv, bv, wo, bo, heads })
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let lin = |w: &Param, b: &Param| x.matmul(&tape.param(w))?.add_row(&tape.param(b));
        let q = lin(&self.wq, &self.bq)?;
        let k = x.matmul(&tape.param(&self.wk))?;
        let v = lin(&self.wv, &self.bv)?;
        let d = q.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(a, b)?;
            let kh = k.slice_cols(a, b)?;
            let vh = v.slice_cols(a, b)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            outs.push(scores.softmax(1, 1.0)?.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        merged.matmul(&tape.param(&self.wo))?.add_row(&tape.param(&self.bo))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        [&self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo].into_iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        [&mut self.wq, &mut self.bq, &mut self.wk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo]
            .into_iter()
            .for_each(f);
    }
}

/// Slot embeddings plus the expert pool of one Soft MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMoELayerParams {
    /// `[S×d]`; logits are inner products of these rows with the tokens.
    pub slot_embeddings: Param,
    pub experts: Vec<FeedForward>,
    /// Dispatch softmax temperature.
    pub temperature: f64,
    pub slot_to_expert: Vec<usize>,
    pub activation: Activation,
}

impl SoftMoELayerParams {
    /// `slots == experts` gives the identity slot-to-expert map; otherwise
    /// slot `ϑ` goes to expert `ϑ mod R`.
    pub fn init(
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        hidden: usize,
        slots: usize,
        experts: usize,
        temperature: f64,
    ) -> Result<Self> {
        if slots == 0 || experts == 0 {
            return Err(param_err!("need at least one slot and one expert, got {slots}/{experts}"));
        }
        if !(temperature > 0.0) {
            return Err(param_err!("dispatch temperature must be positive, got {temperature}"));
        }
        let slot_embeddings = init.trunc_normal(format!("{prefix}.slots"), &[slots, d]);
        let experts_v =
            (0..experts).map(|e| FeedForward::init(init, &format!("{prefix}.expert{e}"), d, hidden)).collect();
        Ok(SoftMoELayerParams {
            slot_embeddings,
            experts: experts_v,
            temperature,
            slot_to_expert: (0..slots).map(|s| s % experts).collect(),
            activation: Activation::Gelu,
        })
    }

    pub fn slots(&self) -> usize {
        self.slot_embeddings.value.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.slot_embeddings.value.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_to_expert.len() != self.slots() {
            return Err(param_err!("slot map has {} entries for {} slots", self.slot_to_expert.len(), self.slots()));
        }
        if let Some(&bad) = self.slot_to_expert.iter().find(|&&e| e >= self.experts.len()) {
            return Err(param_err!("slot mapped to expert {bad} of {}", self.experts.len()));
        }
        Ok(())
    }
}

impl Parameterized for SoftMoELayerParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.slot_embeddings);
        self.experts.iter().for_each(|e| e.visit(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.slot_embeddings);
        self.experts.iter_mut().for_each(|e| e.visit_mut(f));
    }
}

/// Routing weights and slots of one layer invocation.
#[derive(Debug, Clone, Copy)]
pub struct RoutingTensors<'t> {
    /// `[S×P]` slot logits.
    pub logits: Var<'t>,
    /// `[S×P]`, rows are distributions over tokens.
    pub dispatch: Var<'t>,
    /// `[S×P]`, columns are distributions over slots.
    pub combine: Var<'t>,
    /// `[S×d]`
    pub slots: Var<'t>,
}

pub fn route<'t>(z: &Var<'t>, params: &SoftMoELayerParams) -> Result<RoutingTensors<'t>> {
    let tape = z.tape();
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != params.width() {
        return Err(dim_err!(
            "tokens {:?} do not match slot embeddings {:?}",
            shape,
            params.slot_embeddings.value.shape()
        ));
    }
    let phi = tape.param(&params.slot_embeddings);
    let logits = phi.matmul(&z.transpose()?)?;
    let dispatch = logits.softmax(1, params.temperature)?;
    let combine = logits.softmax(0, 1.0)?;
    let slots = dispatch.matmul(z)?;
    Ok(RoutingTensors { logits, dispatch, combine, slots })
}

/// Soft MoE layer output `[P×d]` together with its routing tensors.
pub fn moe_forward<'t>(z: &Var<'t>, params: &SoftMoELayerParams) -> Result<(Var<'t>, RoutingTensors<'t>)> {
    params.validate()?;
    let tape = z.tape();
    let routing = route(z, params)?;
    let mut outputs = Vec::with_capacity(params.slots());
    for (slot, &e) in params.slot_to_expert.iter().enumerate() {
        let s = routing.slots.select_rows(&[slot])?;
        tape.note_expert_call();
        outputs.push(params.experts[e].forward(&s, params.activation)?);
    }
    let rows: Vec<_> = outputs.iter().map(|v| (*v, 0)).collect();
    let expert_out = Var::gather_rows(&rows)?;
    let y = routing.combine.transpose()?.matmul(&expert_out)?;
    Ok((y, routing))
}

/// Pre-norm transformer block with a Soft MoE feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub moe: SoftMoELayerParams,
}

impl MoeBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        slots: usize,
        experts: usize,
        temperature: f64,
    ) -> Result<Self> {
        Ok(MoeBlockParams {
            norm1: LayerNormParams::init(init, &format!("{prefix}.norm1"), d),
            attention: AttentionParams::init(init, &format!("{prefix}.attn"), d, heads)?,
            norm2: LayerNormParams::init(init, &format!("{prefix}.norm2"), d),
            moe: SoftMoELayerParams::init(init, &format!("{prefix}.moe"), d, hidden, slots, experts, temperature)?,
        })
    }
}

impl Parameterized for MoeBlockParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.norm1.gain);
        f(&self.norm1.bias);
        self.attention.visit(f);
        f(&self.norm2.gain);
        f(&self.norm2.bias);
        self.moe.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.norm1.gain);
        f(&mut self.norm1.bias);
        self.attention.visit_mut(f);
        f(&mut self.norm2.gain);
        f(&mut self.norm2.bias);
        self.moe.visit_params_mut(f);
    }
}

/// `z' = z + Attn(LN(z))`, `out = z' + MoE(LN(z'))`.
pub fn block_forward<'t>(z: &Var<'t>, params: &MoeBlockParams) -> Result<(Var<'t>, RoutingTensors<'t>)> {
    let attn = params.attention.forward(&params.norm1.forward(z)?)?;
    let z1 = z.add(&attn)?;
    let (moe, routing) = moe_forward(&params.norm2.forward(&z1)?, &params.moe)?;
    Ok((z1.add(&moe)?, routing))
}

/// Pre-norm transformer block with a dense feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: FeedForward,
}

impl DenseBlockParams {
    pub fn init(init: &mut Initializer, prefix: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(DenseBlockParams {
            norm1: LayerNormParams::init(init, &format!("{prefix}.norm1"), d),
            attention: AttentionParams::init(init, &format!("{prefix}.attn"), d, heads)?,
            norm2: LayerNormParams::init(init, &format!("{prefix}.norm2"), d),
            mlp: FeedForward::init(init, &format!("{prefix}.mlp"), d, hidden),
        })
    }

    pub fn forward<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
        let z1 = z.add(&self.attention.forward(&self.norm1.forward(z)?)?)?;
        z1.add(&self.mlp.forward(&self.norm2.forward(&z1)?, Activation::Gelu)?)
    }
}

impl Parameterized for DenseBlockParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.norm1.gain);
        f(&self.norm1.bias);
        self.attention.visit(f);
        f(&self.norm2.gain);
        f(&self.norm2.bias);
        self.mlp.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.norm1.gain);
        f(&mut self.norm1.bias);
        self.attention.visit_mut(f);
        f(&mut self.norm2.gain);
        f(&mut self.norm2.bias);
        self.mlp.visit_mut(f);
    }
}
