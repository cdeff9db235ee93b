use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{init_model, CsmoeConfig};
use crate::numerics::{Parameterized, Tape, Tensor};
use crate::tokenizer::masked_count;

pub const FLOP_CONVENTION: &str = "one paired (x, y) forward at the configured mask ratio; \
2 flops per multiply-accumulate; softmax and layer norm 5 flops per element; \
bias adds, residuals and activations not counted";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub component: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub params: u64,
    pub flops: u64,
    /// Millions of parameters per billion flops.
    pub c2c: f64,
    pub expert_calls: u64,
    pub convention: String,
    pub breakdown: Vec<BreakdownRow>,
}

/// `(params[M]) / (flops[G])`.
pub fn c2c_ratio(params: f64, flops: f64) -> f64 {
    (params / 1e6) / (flops / 1e9)
}

fn attention_flops(t: u64, d: u64, heads: u64) -> u64 {
    8 * t * d * d + 4 * t * t * d + 5 * heads * t * t
}

fn attention_params(d: u64) -> u64 {
    4 * d * d + 3 * d
}

fn moe_block(cfg: &CsmoeConfig, t: u64) -> (u64, u64) {
    let (d, s, r, h) = (cfg.d_enc as u64, cfg.slots as u64, cfg.experts as u64, cfg.expert_hidden as u64);
    let params = 4 * d + attention_params(d) + s * d + r * (2 * d * h + h + d);
    let flops = 10 * t * d + attention_flops(t, d, cfg.heads as u64) + 6 * s * t * d + 10 * s * t + 4 * s * d * h;
    (params, flops)
}

fn dense_block(cfg: &CsmoeConfig, t: u64) -> (u64, u64) {
    let (d, m) = (cfg.d_dec as u64, cfg.dec_mlp_hidden as u64);
    let params = 4 * d + attention_params(d) + 2 * d * m + m + d;
    let flops = 10 * t * d + attention_flops(t, d, cfg.dec_heads as u64) + 4 * t * d * m;
    (params, flops)
}

/// Analytic parameter and flop counts with a per-component breakdown.
/// Shared cross-sensor blocks appear once with the flops of both passes.
pub fn profile(cfg: &CsmoeConfig) -> Result<ComputeProfile> {
    cfg.validate()?;
    let p = cfg.tokens() as u64;
    let visible = p - masked_count(cfg.tokens(), cfg.mask_ratio) as u64;
    let t = visible + 1;
    let (d, dd, dp) = (cfg.d_enc as u64, cfg.d_dec as u64, cfg.d_proj as u64);
    let k = |m: char| cfg.token_dim(if m == 'x' { cfg.channels_x } else { cfg.channels_y }) as u64;
    let mut rows = Vec::new();
    let mut row = |component: String, params: u64, flops: u64| rows.push(BreakdownRow { component, params, flops });
    let (moe_p, moe_f) = moe_block(cfg, t);
    let (dense_p, dense_f) = dense_block(cfg, p);
    for m in ['x', 'y'] {
        row(format!("{m}.patch_embed"), k(m) * d + d, 2 * p * k(m) * d);
        row(format!("{m}.cls"), d, 0);
        for i in 0..cfg.enc_ms_layers {
            row(format!("{m}.enc.{i}"), moe_p, moe_f);
        }
        // Each decoder reconstructs its modality from both encodings.
        row(format!("{m}.dec_embed"), d * dd + dd, 2 * 2 * visible * d * dd);
        row(format!("{m}.mask_token"), dd, 0);
        for i in 0..cfg.dec_layers {
            row(format!("{m}.dec.{i}"), dense_p, 2 * dense_f);
        }
        for src in ['x', 'y'] {
            row(format!("{m}.head_from_{src}"), dd * k(m) + k(m), 2 * p * dd * k(m));
        }
    }
    for i in 0..cfg.enc_cs_layers {
        row(format!("cs.{i}"), moe_p, 2 * moe_f);
    }
    row("proj".into(), d * dp + dp, 2 * 2 * d * dp);
    let params = rows.iter().map(|r| r.params).sum();
    let flops = rows.iter().map(|r| r.flops).sum();
    let moe_layers = (2 * (cfg.enc_ms_layers + cfg.enc_cs_layers)) as u64;
    Ok(ComputeProfile {
        params,
        flops,
        c2c: c2c_ratio(params as f64, flops as f64),
        expert_calls: moe_layers * cfg.slots as u64,
        convention: FLOP_CONVENTION.into(),
        breakdown: rows,
    })
}

/// Counts observed by building the model and running one paired forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedCount {
    pub params: u64,
    pub flops: u64,
    pub expert_calls: u64,
}

/// Materializes the model, so only practical for small configurations.
pub fn instrumented_profile(cfg: &CsmoeConfig, seed: u64) -> Result<InstrumentedCount> {
    let model = init_model(cfg)?;
    let side = cfg.image_side;
    let x = Tensor::from_fn(&[cfg.channels_x, side, side], |i| ((i * 7919) % 101) as f64 / 101.0);
    let y = Tensor::from_fn(&[cfg.channels_y, side, side], |i| ((i * 104_729) % 103) as f64 / 103.0);
    let tape = Tape::new();
    model.forward(&tape, &x, &y, seed)?;
    Ok(InstrumentedCount { params: model.param_count() as u64, flops: tape.flops(), expert_calls: tape.expert_calls() })
}
