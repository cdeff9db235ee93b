//! Toy-scale pretraining over paired images.
//!
//! All randomness (hold-out split, batch order, masks) is derived from one
//! seed plus the epoch and step counters, so a run stopped after any step and
//! resumed from its checkpoint continues bit-for-bit like an uninterrupted run.

mod data;
mod optim;

pub use data::{load_pairs, synthesize, write_pairs, PairedImage};
pub use optim::{learning_rate, AdamW, AdamWConfig};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_cmr, loss_total, loss_umr, LossBreakdown, LossConfig};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointExtras, CsmoeModel};
use crate::numerics::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    /// Fraction of pairs held out for validation (at least one when positive).
    pub val_fraction: f64,
    /// Caps the total step count; the schedule spans the capped length.
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch: 4,
            lr: 1e-4,
            warmup_frac: 0.05,
            val_fraction: 0.05,
            max_steps: None,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch must be at least 2 for the contrastive term, got {}",
                self.batch
            )));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("lr must be positive; warmup_frac in [0, 1]; val_fraction in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub umr: f64,
    pub cmr: f64,
    pub mi: f64,
    pub rep: f64,
    pub ent: f64,
    pub total: f64,
}

impl StepLog {
    fn new(step: usize, b: &LossBreakdown) -> Self {
        StepLog { step, umr: b.umr, cmr: b.cmr, mi: b.mi, rep: b.rep, ent: b.ent, total: b.total }
    }
}

/// Reconstruction losses on the held-out pairs after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub epoch: usize,
    pub step: usize,
    pub umr: f64,
    pub cmr: f64,
}

/// Resumable position in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Steps already completed.
    pub step: usize,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub total_steps: usize,
    pub log: Vec<StepLog>,
    pub validation: Vec<ValLog>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of the training and validation pairs.
pub fn split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5EED_5EED)));
    let n_val = if val_fraction > 0.0 && n >= 2 { ((val_fraction * n as f64).round() as usize).max(1) } else { 0 };
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Batches of one epoch. A trailing singleton joins the previous batch so
/// every batch can form contrastive pairs.
pub fn epoch_batches(train: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch as u64 + 1))));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn mask_seed(seed: u64, step: usize, position: usize) -> u64 {
    mix(seed ^ mix(((step as u64) << 20) ^ position as u64))
}

/// Runs (or continues) training. `stop_after` ends the run early after that
/// many total steps without changing the schedule. `on_step` sees every log
/// line as it is produced.
pub fn pretrain(
    model: &mut CsmoeModel,
    data: &[PairedImage],
    cfg: &TrainConfig,
    losses: &LossConfig,
    seed: u64,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val) = split(data.len(), cfg.val_fraction, seed);
    if train.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training pairs, have {}", train.len())));
    }
    let per_epoch = epoch_batches(&train, cfg.batch, seed, 0).len();
    let mut total = cfg.epochs * per_epoch;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let end = stop_after.map_or(total, |s| s.min(total));
    let mut state = resume.unwrap_or_else(|| TrainState { step: 0, optimizer: AdamW::new(cfg.optimizer) });
    let mut log = Vec::new();
    let mut validation = Vec::new();

    while state.step < end {
        let epoch = state.step / per_epoch;
        let batches = epoch_batches(&train, cfg.batch, seed, epoch);
        let batch = &batches[state.step % per_epoch];
        let step = state.step + 1;
        let tape = Tape::new();
        let arts = batch
            .iter()
            .enumerate()
            .map(|(pos, &i)| model.forward(&tape, &data[i].x, &data[i].y, mask_seed(seed, step, pos)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, breakdown) = loss_total(model, &arts, losses)?;
        let grads = tape.backward(loss)?;
        drop(arts);
        let entry = StepLog::new(step, &breakdown);
        on_step(&entry)?;
        log.push(entry);
        let lr = learning_rate(state.step, total, cfg.lr, cfg.warmup_frac);
        state.optimizer.step(model, &grads, lr);
        state.step = step;
        if step % per_epoch == 0 && !val.is_empty() {
            validation.push(validate(model, data, &val, seed, epoch + 1, step)?);
        }
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| data[i].id.clone()).collect();
    Ok(TrainOutcome { state, total_steps: total, log, validation, train_ids: ids(&train), val_ids: ids(&val) })
}

fn validate(
    model: &CsmoeModel,
    data: &[PairedImage],
    val: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<ValLog> {
    let (mut umr, mut cmr) = (0.0, 0.0);
    for (pos, &i) in val.iter().enumerate() {
        let tape = Tape::new();
        let a = model.forward(&tape, &data[i].x, &data[i].y, mask_seed(seed, 0, pos))?;
        umr += loss_umr(&a)?.item();
        cmr += loss_cmr(&a)?.item();
    }
    let n = val.len() as f64;
    Ok(ValLog { epoch, step, umr: umr / n, cmr: cmr / n })
}

/// Writes model, optimizer moments, and the step counter.
pub fn save_training_checkpoint(
    path: &Path,
    model: &CsmoeModel,
    state: &TrainState,
    meta: serde_json::Value,
) -> Result<()> {
    let mut meta = match meta {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => return Err(Error::Parameter(format!("checkpoint metadata must be an object, got {other}"))),
    };
    meta.insert("step".into(), state.step.into());
    meta.insert("optimizer_steps".into(), state.optimizer.steps.into());
    meta.insert("optimizer".into(), serde_json::to_value(state.optimizer.config).expect("plain struct"));
    let extras = CheckpointExtras { meta: serde_json::Value::Object(meta), tensors: state.optimizer.state_tensors() };
    save_checkpoint(model, path, &extras)
}

/// Inverse of [`save_training_checkpoint`]. Plain model checkpoints load with
/// a fresh optimizer at step 0.
pub fn load_training_checkpoint(path: &Path) -> Result<(CsmoeModel, TrainState, serde_json::Value)> {
    let (model, extras) = load_checkpoint(path)?;
    let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let step = extras.meta.get("step").map_or(Ok(0), |v| v.as_u64().ok_or_else(|| fmt("step is not an integer")))?;
    let opt_steps = extras
        .meta
        .get("optimizer_steps")
        .map_or(Ok(0), |v| v.as_u64().ok_or_else(|| fmt("optimizer_steps is not an integer")))?;
    let config = match extras.meta.get("optimizer") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| fmt(&format!("optimizer config: {e}")))?,
        None => AdamWConfig::default(),
    };
    let optimizer = AdamW::from_state(config, opt_steps, &extras.tensors)?;
    Ok((model, TrainState { step: step as usize, optimizer }, extras.meta))
}
