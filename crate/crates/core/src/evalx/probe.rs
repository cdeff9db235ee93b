use serde::{Deserialize, Serialize};

use super::LabelSet;
use crate::error::{dim_err, Error, Result};
use crate::model::Linear;
use crate::numerics::{Param, Tape, Tensor};
use crate::train::{AdamW, AdamWConfig};

/// Ground truth for a probe: label sets (multi-label) or one class per sample.
#[derive(Debug, Clone, Copy)]
pub enum ProbeTruth<'a> {
    MultiLabel(&'a [LabelSet]),
    MultiClass(&'a [usize]),
}

impl ProbeTruth<'_> {
    fn len(&self) -> usize {
        match self {
            ProbeTruth::MultiLabel(v) => v.len(),
            ProbeTruth::MultiClass(v) => v.len(),
        }
    }

    fn is_positive(&self, sample: usize, class: usize) -> bool {
        match self {
            ProbeTruth::MultiLabel(v) => v[sample].contains(class),
            ProbeTruth::MultiClass(v) => v[sample] == class,
        }
    }
}

/// mAP (multi-label) or AA (multi-class) in percent for an `N×C` score matrix.
///
/// Classes without positives are left out of the macro mean with a warning.
pub fn probe_metrics(scores: &Tensor, truth: ProbeTruth<'_>) -> Result<f64> {
    let (n, c) = scores.dims2()?;
    if c < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {c}")));
    }
    if truth.len() != n {
        return Err(dim_err!("{n} score rows for {} labels", truth.len()));
    }
    if let ProbeTruth::MultiClass(v) = truth {
        if let Some(bad) = v.iter().find(|&&k| k >= c) {
            return Err(Error::Input(format!("class index {bad} outside 0..{c}")));
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let positives = (0..n).filter(|&i| truth.is_positive(i, k)).count();
        if positives == 0 {
            log::warn!("class {k} has no positives and is excluded from the macro average");
            continue;
        }
        let value = match truth {
            ProbeTruth::MultiLabel(_) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores.at2(b, k).total_cmp(&scores.at2(a, k)).then(a.cmp(&b)));
                let mut hits = 0usize;
                let mut sum = 0.0;
                for (rank, &i) in order.iter().enumerate() {
                    if truth.is_positive(i, k) {
                        hits += 1;
                        sum += hits as f64 / (rank + 1) as f64;
                    }
                }
                sum / positives as f64
            }
            ProbeTruth::MultiClass(v) => {
                let correct = (0..n).filter(|&i| v[i] == k && argmax(scores.row(i)) == k).count();
                correct as f64 / positives as f64
            }
        };
        per_class.push(value);
    }
    if per_class.is_empty() {
        return Err(Error::Evaluation("no class has any positive sample".into()));
    }
    Ok(100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig { epochs: 50, lr: 1e-3, weight_decay: 0.0 }
    }
}

/// Fits `features·W + b` to the truth with full-batch AdamW, starting from
/// zero. Multi-label uses per-class logistic loss, multi-class softmax
/// cross-entropy.
pub fn train_linear_probe(
    features: &Tensor,
    truth: ProbeTruth<'_>,
    classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<Linear> {
    let (n, d) = features.dims2()?;
    if truth.len() != n {
        return Err(dim_err!("{n} feature rows for {} labels", truth.len()));
    }
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    let mut probe = Linear {
        weight: Param::new("probe.w", Tensor::zeros(&[d, classes])),
        bias: Param::new("probe.b", Tensor::zeros(&[classes])),
    };
    let target = Tensor::from_fn(&[n, classes], |i| f64::from(u8::from(truth.is_positive(i / classes, i % classes))));
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let s = probe.forward(&tape.constant(features.clone()))?;
        let y = tape.constant(target.clone());
        let loss = match truth {
            ProbeTruth::MultiLabel(_) => s.softplus().sub(&s.mul(&y)?)?.mean(),
            ProbeTruth::MultiClass(_) => {
                let sv = s.value();
                let shift = Tensor::from_fn(&[n, classes], |i| {
                    sv.row(i / classes).iter().copied().fold(f64::NEG_INFINITY, f64::max)
                });
                let z = s.sub(&tape.constant(shift))?;
                let lse = z.exp().sum_rows()?.ln();
                let picked = z.mul(&y)?.sum_rows()?;
                lse.sub(&picked)?.mean()
            }
        };
        let grads = tape.backward(loss)?;
        opt.step(&mut ProbeParams(&mut probe), &grads, cfg.lr);
    }
    Ok(probe)
}

struct ProbeParams<'a>(&'a mut Linear);

impl crate::numerics::Parameterized for ProbeParams<'_> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.0.weight);
        f(&self.0.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.0.weight);
        f(&mut self.0.bias);
    }
}
