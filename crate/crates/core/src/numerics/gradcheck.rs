use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Parameterized, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Above this many parameter elements, a seeded random subset of this size is checked.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_elements: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub step_size: f64,
    pub checked_elements: usize,
    pub total_elements: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic in the parameters. Parameters are
/// restored to their original values before returning.
pub fn check_gradients<M, F>(model: &mut M, opts: GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: for<'t> FnMut(&M, &'t Tape) -> Result<Var<'t>>,
{
    // (name, numel) in visit order
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| layout.push((p.name.clone(), p.value.numel())));
    let total: usize = layout.iter().map(|(_, n)| n).sum();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let loss = loss_fn(model, &tape)?;
        if !loss.item().is_finite() {
            return Err(Error::Evaluation(format!("loss is not finite: {}", loss.item())));
        }
        let grads = tape.backward(loss)?;
        layout.iter().map(|(name, n)| grads.param(name).map_or_else(|| vec![0.0; *n], <[f64]>::to_vec)).collect()
    };

    let mut eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        let v = loss_fn(m, &tape)?.item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    let flat: Vec<usize> = if total > opts.max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = index::sample(&mut rng, total, opts.max_elements).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };

    let mut per_param: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_err: f64 = 0.0;
    let h = opts.step;
    let mut cursor = 0;
    let mut offset = 0;
    for (pi, (name, n)) in layout.iter().enumerate() {
        let end = offset + n;
        while cursor < flat.len() && flat[cursor] < end {
            let elem = flat[cursor] - offset;
            let numeric = {
                nudge(model, pi, elem, h);
                let plus = eval(model);
                nudge(model, pi, elem, -2.0 * h);
                let minus = eval(model);
                nudge(model, pi, elem, h);
                (plus? - minus?) / (2.0 * h)
            };
            let err = relative_error(analytic[pi][elem], numeric);
            let e = per_param.entry(name.clone()).or_insert(0.0);
            *e = e.max(err);
            max_err = max_err.max(err);
            cursor += 1;
        }
        offset = end;
    }

    Ok(GradCheckReport {
        max_relative_error: max_err,
        per_parameter_errors: per_param,
        step_size: h,
        checked_elements: flat.len(),
        total_elements: total,
    })
}

fn nudge<M: Parameterized>(model: &mut M, param_index: usize, elem: usize, delta: f64) {
    let mut i = 0;
    model.visit_params_mut(&mut |p| {
        if i == param_index {
            p.value.data_mut()[elem] += delta;
        }
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Param, Tensor};

    #[test]
    fn quadratic_matches_exactly() {
        let mut params = vec![Param::new("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap())];
        let tape = Tape::new();
        let x = tape.param(&params[0]);
        let g = tape.backward(x.square().sum()).unwrap();
        assert_eq!(g.param("x").unwrap(), &[2.0, 4.0]);

        let report =
            check_gradients(&mut params, GradCheckOptions::default(), |p, tape| Ok(tape.param(&p[0]).square().sum()))
                .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.checked_elements, 2);
        assert_eq!(params[0].value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let logits = Tensor::from_fn(&[3, 4], |i| ((i * 7) as f64 * 0.37).sin());
        let onehot = Tensor::from_fn(&[3, 4], |i| if i % 4 == i / 4 { 1.0 } else { 0.0 });
        let mut params = vec![Param::new("logits", logits)];
        let report = check_gradients(&mut params, GradCheckOptions::default(), |p, tape| {
            let probs = tape.param(&p[0]).softmax(1, 1.0)?;
            Ok(probs.ln().mul(&tape.constant(onehot.clone()))?.sum().scale(-1.0 / 3.0))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = vec![Param::new("x", Tensor::new(&[1], vec![-1.0]).unwrap())];
        let err = check_gradients(&mut params, GradCheckOptions::default(), |p, tape| Ok(tape.param(&p[0]).ln().sum()));
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    #[test]
    fn sampling_caps_checked_elements() {
        let mut params = vec![Param::new("w", Tensor::from_fn(&[50], |i| i as f64 * 0.01))];
        let opts = GradCheckOptions { max_elements: 7, ..Default::default() };
        let report = check_gradients(&mut params, opts, |p, tape| Ok(tape.param(&p[0]).square().sum())).unwrap();
        assert_eq!(report.checked_elements, 7);
        assert_eq!(report.total_elements, 50);
    }
}
