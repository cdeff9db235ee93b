//! Training objectives: uni- and cross-modal reconstruction, the contrastive
//! MI term, and the two routing regularizers over MoE layers.
//!
//! All formulas follow their printed form, signs included. In particular the
//! MI denominator sums only over negatives, so with tight positive pairs the
//! loss goes below zero.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{init_model, CsmoeConfig, CsmoeModel, ForwardArtifacts, Modality};
use crate::numerics::{check_gradients, GradCheckOptions, GradCheckReport, Parameterized, Tape, Tensor, Var};

/// Weights and constants of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub tau_mi: f64,
    pub eps: f64,
    /// Include the positive pair in the MI denominator (standard NT-Xent).
    pub mi_include_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.01, gamma: 0.01, tau_mi: 0.5, eps: 1e-8, mi_include_positive: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub umr: f64,
    pub cmr: f64,
    pub mi: f64,
    pub rep: f64,
    pub ent: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub tau_mi: f64,
    pub eps: f64,
}

/// Mean squared error over the rows listed in `mask`.
pub fn rec_loss<'t>(pred: &Var<'t>, target: &Tensor, mask: &[usize]) -> Result<Var<'t>> {
    if mask.is_empty() {
        return Err(param_err!("reconstruction loss over an empty mask is undefined"));
    }
    let shape = pred.shape();
    if shape != target.shape() {
        return Err(dim_err!("prediction {:?} vs target {:?}", shape, target.shape()));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= shape[0]) {
        return Err(dim_err!("mask index {bad} outside {} rows", shape[0]));
    }
    let tape = pred.tape();
    let diff = pred.select_rows(mask)?.sub(&tape.constant(target.select_rows(mask)?))?;
    Ok(diff.square().mean())
}

/// `RecL(P̂^{X←X}, X, M^X) + RecL(P̂^{Y←Y}, Y, M^Y)`
pub fn loss_umr<'t>(a: &ForwardArtifacts<'t>) -> Result<Var<'t>> {
    let x = rec_loss(&a.recon_x_from_x, &a.target_x, &a.mask_x.masked)?;
    let y = rec_loss(&a.recon_y_from_y, &a.target_y, &a.mask_y.masked)?;
    x.add(&y)
}

/// `RecL(P̂^{Y←X}, Y, M^X) + RecL(P̂^{X←Y}, X, M^Y)`: each cross term is
/// scored on the source modality's mask.
pub fn loss_cmr<'t>(a: &ForwardArtifacts<'t>) -> Result<Var<'t>> {
    let yx = rec_loss(&a.recon_y_from_x, &a.target_y, &a.mask_x.masked)?;
    let xy = rec_loss(&a.recon_x_from_y, &a.target_x, &a.mask_y.masked)?;
    yx.add(&xy)
}

/// Symmetric contrastive loss over cosine similarities of paired rows.
///
/// `ℓ^i(X,Y) = −log(exp(sim_ii/τ) / Σ_{q≠i} exp(sim_iq/τ))`, averaged over
/// both directions and the batch. With `include_positive` the sum runs over
/// all `q`.
pub fn loss_mi<'t>(c_x: &Var<'t>, c_y: &Var<'t>, tau: f64, include_positive: bool) -> Result<Var<'t>> {
    let shape = c_x.shape();
    if shape.len() != 2 || shape != c_y.shape() {
        return Err(dim_err!("MI inputs {:?} and {:?} must be equal-shape matrices", shape, c_y.shape()));
    }
    let b = shape[0];
    if b < 2 {
        return Err(param_err!("MI loss needs a batch of at least 2, got {b}"));
    }
    if !(tau > 0.0) {
        return Err(param_err!("MI temperature must be positive, got {tau}"));
    }
    let tape = c_x.tape();
    let sim = c_x.normalize_rows()?.matmul(&c_y.normalize_rows()?.transpose()?)?;
    let keep = Tensor::from_fn(&[b, b], |i| if include_positive || i / b != i % b { 1.0 } else { 0.0 });
    let keep = tape.constant(keep);
    // Similarities are at most 1, so shifting by 1/τ keeps every exponent ≤ 0.
    let lse = |s: &Var<'t>| -> Result<Var<'t>> {
        Ok(s.scale(1.0 / tau).add_scalar(-1.0 / tau).exp().mul(&keep)?.sum_rows()?.ln().add_scalar(1.0 / tau).sum())
    };
    let positives = sim.mul(&tape.constant(Tensor::eye(b)))?.sum().scale(1.0 / tau);
    let total = lse(&sim)?.add(&lse(&sim.transpose()?)?)?.sub(&positives.scale(2.0))?;
    Ok(total.scale(1.0 / (2 * b) as f64))
}

/// `−(1/S²) Σ_ϑ Σ_ϑ' ⟨s̃_ϑ, s̃_ϑ'⟩²` over ℓ2-normalized rows.
pub fn loss_rep<'t>(slots: &Var<'t>) -> Result<Var<'t>> {
    let n = slots.normalize_rows()?;
    let gram = n.matmul(&n.transpose()?)?;
    Ok(gram.square().mean().scale(-1.0))
}

/// `−(1/SP) Σ_ϑ Σ_n α_{ϑ,n} log(α_{ϑ,n} + ε)`
pub fn loss_ent<'t>(dispatch: &Var<'t>, eps: f64) -> Result<Var<'t>> {
    if !(eps >= 0.0) {
        return Err(param_err!("entropy eps must be non-negative, got {eps}"));
    }
    let v = dispatch.value();
    if let Some(bad) = v.data().iter().find(|&&a| !(a >= 0.0)) {
        return Err(Error::Input(format!("dispatch weight {bad} is negative or undefined")));
    }
    Ok(dispatch.mul(&dispatch.add_scalar(eps).ln())?.mean().scale(-1.0))
}

/// `L_REP` averaged over every distinct MoE layer of the model.
pub fn model_rep<'t>(tape: &'t Tape, model: &CsmoeModel) -> Result<Var<'t>> {
    let terms = model.moe_layers().map(|l| loss_rep(&tape.param(&l.slot_embeddings))).collect::<Result<Vec<_>>>()?;
    mean_of(&terms)
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = terms.split_first().ok_or_else(|| param_err!("average over no terms"))?;
    let mut acc = *first;
    for t in rest {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

/// Full objective over a batch of paired forwards.
///
/// UMR, CMR, and `L_ENT` are averaged over the batch (and, for `L_ENT`, over
/// every routed layer of both modalities); MI contrasts the batch's projected
/// CLS rows; `L_REP` depends only on parameters.
pub fn loss_total<'t>(
    model: &CsmoeModel,
    batch: &[ForwardArtifacts<'t>],
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let first = batch.first().ok_or_else(|| param_err!("empty batch"))?;
    let tape = first.z_cs_x.tape();
    let umr = mean_of(&batch.iter().map(loss_umr).collect::<Result<Vec<_>>>()?)?;
    let cmr = mean_of(&batch.iter().map(loss_cmr).collect::<Result<Vec<_>>>()?)?;
    let cx = Var::gather_rows(&batch.iter().map(|a| (a.cls_proj_x, 0)).collect::<Vec<_>>())?;
    let cy = Var::gather_rows(&batch.iter().map(|a| (a.cls_proj_y, 0)).collect::<Vec<_>>())?;
    let mi = loss_mi(&cx, &cy, cfg.tau_mi, cfg.mi_include_positive)?;
    let rep = model_rep(tape, model)?;
    let ent_terms = batch
        .iter()
        .flat_map(|a| a.routing.iter())
        .map(|r| loss_ent(&r.routing.dispatch, cfg.eps))
        .collect::<Result<Vec<_>>>()?;
    let ent = mean_of(&ent_terms)?;
    let total = umr.add(&cmr)?.add(&mi)?.add(&rep.scale(cfg.lambda))?.add(&ent.scale(cfg.gamma))?;
    let breakdown = LossBreakdown {
        umr: umr.item(),
        cmr: cmr.item(),
        mi: mi.item(),
        rep: rep.item(),
        ent: ent.item(),
        total: total.item(),
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        tau_mi: cfg.tau_mi,
        eps: cfg.eps,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Evaluation(format!("non-finite total loss {:?}", breakdown)));
    }
    Ok((total, breakdown))
}

/// Runs one paired forward per sample and returns the artifacts. Sample `i`
/// draws its masks from `seeds[i]`.
pub fn forward_batch<'t>(
    model: &CsmoeModel,
    tape: &'t Tape,
    pairs: &[(&Tensor, &Tensor)],
    seeds: &[u64],
) -> Result<Vec<ForwardArtifacts<'t>>> {
    if pairs.len() != seeds.len() {
        return Err(param_err!("{} pairs but {} seeds", pairs.len(), seeds.len()));
    }
    pairs.iter().zip(seeds).map(|((x, y), &s)| model.forward(tape, x, y, s)).collect()
}

/// Reconstruction loss of one direction, exposed for diagnostics.
pub fn direction_loss<'t>(a: &ForwardArtifacts<'t>, target: Modality, source: Modality) -> Result<Var<'t>> {
    rec_loss(&a.reconstruction(target, source), a.target(target), &a.mask(source).masked)
}

/// Setup of a full-objective gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalCheckSetup {
    pub batch: usize,
    /// Half-width of the uniform jitter added to the initialization.
    pub perturb: f64,
    pub seed: u64,
}

/// Checks tape gradients of `L_total` for a freshly initialized model of
/// `cfg` on a batch of images with pixels uniform in `[−1, 1]`. Weights,
/// pixels and masks all derive from `setup.seed`.
pub fn total_gradient_check(
    cfg: &CsmoeConfig,
    losses: &LossConfig,
    setup: TotalCheckSetup,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = init_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    if setup.perturb > 0.0 {
        model.visit_params_mut(&mut |p| {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-setup.perturb..setup.perturb))
        });
    }
    let side = cfg.image_side;
    let mut image = |c: usize| Tensor::from_fn(&[c, side, side], |_| rng.random_range(-1.0..1.0));
    let data: Vec<(Tensor, Tensor)> =
        (0..setup.batch).map(|_| (image(cfg.channels_x), image(cfg.channels_y))).collect();
    let seeds: Vec<u64> = (0..setup.batch).map(|_| rng.random()).collect();
    check_gradients(&mut model, opts, |m, tape| {
        let pairs: Vec<_> = data.iter().map(|(x, y)| (x, y)).collect();
        let arts = forward_batch(m, tape, &pairs, &seeds)?;
        Ok(loss_total(m, &arts, losses)?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::sample_masks;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rec_loss_examples() {
        let tape = Tape::new();
        let t = rand_tensor(&[3, 2], 0);
        let p = tape.constant(t.clone());
        assert_eq!(rec_loss(&p, &t, &[0, 2]).unwrap().item(), 0.0);
        let shifted = Tensor::from_fn(&[3, 2], |i| t.data()[i] + 1.0);
        assert_eq!(rec_loss(&tape.constant(shifted), &t, &[1]).unwrap().item(), 1.0);
        // Rows 1 and 3 (0-based 0 and 2): residuals [1,2] and [0,−3].
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![9.0, 9.0], vec![0.0, 0.0]]).unwrap();
        let target = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let l = rec_loss(&tape.constant(pred), &target, &[0, 2]).unwrap().item();
        assert!((l - (1.0 + 4.0 + 0.0 + 9.0) / 4.0).abs() < 1e-15);
        assert!(matches!(rec_loss(&p, &t, &[]), Err(Error::Parameter(_))));
        assert!(matches!(rec_loss(&p, &t, &[3]), Err(Error::Dimension(_))));
    }

    /// Direct evaluation of the MI definition.
    fn mi_oracle(cx: &[Vec<f64>], cy: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let b = cx.len();
        let ell = |u: &[Vec<f64>], v: &[Vec<f64>], i: usize| {
            let num = (cos(&u[i], &v[i]) / tau).exp();
            let den: f64 =
                (0..b).filter(|&q| include_positive || q != i).map(|q| (cos(&u[i], &v[q]) / tau).exp()).sum();
            -(num / den).ln()
        };
        (0..b).map(|i| ell(cx, cy, i) + ell(cy, cx, i)).sum::<f64>() / (2 * b) as f64
    }

    #[test]
    fn mi_orthogonal_pairs() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let l = loss_mi(&c, &c, 0.5, false).unwrap().item();
        assert!((l + 2.0).abs() <= 1e-9, "{l}");
    }

    #[test]
    fn mi_collapsed_batch_is_zero() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3], 0.7));
        assert!(loss_mi(&c, &c, 0.5, false).unwrap().item().abs() <= 1e-12);
    }

    #[test]
    fn mi_matches_oracle() {
        for (seed, include) in [(1, false), (2, true), (3, false)] {
            let tape = Tape::new();
            let a = rand_tensor(&[3, 4], seed);
            let b = rand_tensor(&[3, 4], seed + 10);
            let rows = |t: &Tensor| (0..3).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
            let got = loss_mi(&tape.constant(a.clone()), &tape.constant(b.clone()), 0.5, include).unwrap().item();
            let want = mi_oracle(&rows(&a), &rows(&b), 0.5, include);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mi_errors() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(loss_mi(&one, &one, 0.5, false), Err(Error::Parameter(_))));
        let two = tape.constant(Tensor::full(&[2, 3], 1.0));
        assert!(loss_mi(&two, &two, 0.0, false).is_err());
    }

    #[test]
    fn mi_gradient() {
        let mut params = vec![
            crate::numerics::Param::new("a", rand_tensor(&[3, 4], 4)),
            crate::numerics::Param::new("b", rand_tensor(&[3, 4], 5)),
        ];
        let r = check_gradients(&mut params, GradCheckOptions::default(), |p, tape| {
            loss_mi(&tape.param(&p[0]), &tape.param(&p[1]), 0.5, false)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{}", r.max_relative_error);
    }

    #[test]
    fn rep_closed_forms() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap());
        assert!((loss_rep(&same).unwrap().item() + 1.0).abs() <= 1e-12);
        for s in [1, 2, 4, 8] {
            let ortho = tape.constant(Tensor::from_fn(&[s, 8], |i| if i / 8 == i % 8 { 2.5 } else { 0.0 }));
            let l = loss_rep(&ortho).unwrap().item();
            assert!((l + 1.0 / s as f64).abs() <= 1e-12, "S={s}: {l}");
        }
        let single = tape.constant(rand_tensor(&[1, 5], 7));
        assert!((loss_rep(&single).unwrap().item() + 1.0).abs() <= 1e-12);
        let anti = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![-2.0, -2.0]]).unwrap());
        assert!((loss_rep(&anti).unwrap().item() + 1.0).abs() <= 1e-12);
        let random = tape.constant(rand_tensor(&[6, 5], 8));
        assert!(loss_rep(&random).unwrap().item() <= 0.0);
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(loss_rep(&zero).is_err());
    }

    #[test]
    fn ent_closed_forms() {
        let tape = Tape::new();
        for p in [2usize, 4, 49] {
            let uniform = tape.constant(Tensor::full(&[3, p], 1.0 / p as f64));
            let l = loss_ent(&uniform, 0.0).unwrap().item();
            let want = (p as f64).ln() / p as f64;
            assert!((l - want).abs() <= 1e-9, "P={p}: {l} vs {want}");
        }
        let half = tape.constant(Tensor::full(&[2, 2], 0.5));
        assert!((loss_ent(&half, 0.0).unwrap().item() - 0.346_573_590_279_972_6).abs() < 1e-12);
        let onehot = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        assert!(loss_ent(&onehot, 1e-8).unwrap().item().abs() < 1e-7);
        let neg = tape.constant(Tensor::from_rows(&[vec![1.2, -0.2]]).unwrap());
        assert!(matches!(loss_ent(&neg, 1e-8), Err(Error::Input(_))));
    }

    #[test]
    fn ent_nonnegative_and_sharpens_with_temperature() {
        let tape = Tape::new();
        let logits = tape.constant(rand_tensor(&[4, 9], 11));
        let warm = loss_ent(&logits.softmax(1, 1.0).unwrap(), 1e-8).unwrap().item();
        let cold = loss_ent(&logits.softmax(1, 1e-5).unwrap(), 1e-8).unwrap().item();
        // α·ln(α+ε) ≤ α·ln(1+ε) ≤ α·ε, so the floor is −ε/P rather than 0.
        assert!(warm > 0.0 && cold >= -1e-8 / 9.0 && cold < 1e-6, "{warm} {cold}");
    }

    fn mini_batch(cfg: &CsmoeConfig, n: usize) -> Vec<(Tensor, Tensor)> {
        (0..n)
            .map(|i| {
                (
                    rand_tensor(&[cfg.channels_x, cfg.image_side, cfg.image_side], 100 + i as u64),
                    rand_tensor(&[cfg.channels_y, cfg.image_side, cfg.image_side], 200 + i as u64),
                )
            })
            .collect()
    }

    #[test]
    fn total_decomposition_and_weights_off() {
        let cfg = CsmoeConfig::miniature();
        let model = init_model(&cfg).unwrap();
        let data = mini_batch(&cfg, 3);
        let pairs: Vec<_> = data.iter().map(|(x, y)| (x, y)).collect();
        for lc in [
            LossConfig::default(),
            LossConfig { lambda: 0.0, gamma: 0.0, ..Default::default() },
            LossConfig { lambda: -0.7, gamma: 2.5, ..Default::default() },
        ] {
            let tape = Tape::new();
            let arts = forward_batch(&model, &tape, &pairs, &[1, 2, 3]).unwrap();
            let (_, b) = loss_total(&model, &arts, &lc).unwrap();
            let sum = b.umr + b.cmr + b.mi + lc.lambda * b.rep + lc.gamma * b.ent;
            assert!((b.total - sum).abs() <= 1e-12, "{b:?}");
            assert!(b.umr >= 0.0 && b.cmr >= 0.0);
            assert_eq!(arts.iter().map(|a| a.routing.len()).sum::<usize>(), 3 * 4);
        }
    }

    #[test]
    fn perfect_reconstruction_and_identical_projections_give_zero() {
        let cfg = CsmoeConfig::miniature();
        let mut model = init_model(&cfg).unwrap();
        // Zero heads reconstruct all-zero targets exactly; a zero projection
        // weight with a shared bias makes every projected CLS identical.
        for m in [Modality::X, Modality::Y] {
            let p = model.modality_mut(m);
            for lin in [&mut p.head_self, &mut p.head_cross] {
                lin.weight.value = Tensor::zeros(lin.weight.value.shape());
            }
        }
        model.projection.weight.value = Tensor::zeros(model.projection.weight.value.shape());
        model.projection.bias.value = Tensor::full(model.projection.bias.value.shape(), 0.3);
        let x = Tensor::zeros(&[2, 16, 16]);
        let y = Tensor::zeros(&[3, 16, 16]);
        let tape = Tape::new();
        let arts = forward_batch(&model, &tape, &[(&x, &y), (&x, &y)], &[0, 1]).unwrap();
        assert_eq!(loss_umr(&arts[0]).unwrap().item(), 0.0);
        assert_eq!(loss_cmr(&arts[1]).unwrap().item(), 0.0);
        let lc = LossConfig { lambda: 0.0, gamma: 0.0, ..Default::default() };
        let (_, b) = loss_total(&model, &arts, &lc).unwrap();
        assert!(b.total.abs() <= 1e-12, "{b:?}");
    }

    #[test]
    fn cmr_first_term_tracks_the_source_mask() {
        let cfg = CsmoeConfig { image_side: 32, ..CsmoeConfig::miniature() };
        let model = init_model(&cfg).unwrap();
        let data = mini_batch(&cfg, 1);
        let (x, y) = (&data[0].0, &data[0].1);
        let my = sample_masks(16, 0.5, 9).unwrap();
        let eval = |mx_seed: u64, my: &crate::tokenizer::MaskPair| {
            let tape = Tape::new();
            let a = model.forward_with_masks(&tape, x, y, sample_masks(16, 0.5, mx_seed).unwrap(), my.clone()).unwrap();
            (
                direction_loss(&a, Modality::Y, Modality::X).unwrap().item(),
                direction_loss(&a, Modality::X, Modality::Y).unwrap().item(),
            )
        };
        let (a1, b1) = eval(1, &my);
        let (a2, b2) = eval(2, &my);
        assert_ne!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn umr_cmr_match_stepwise_evaluation() {
        let cfg = CsmoeConfig::miniature();
        let model = init_model(&cfg).unwrap();
        let data = mini_batch(&cfg, 1);
        let tape = Tape::new();
        let a = model.forward(&tape, &data[0].0, &data[0].1, 4).unwrap();
        let mse = |pred: &Tensor, target: &Tensor, rows: &[usize]| {
            let k = target.shape()[1];
            let mut s = 0.0;
            for &r in rows {
                for c in 0..k {
                    s += (pred.at2(r, c) - target.at2(r, c)).powi(2);
                }
            }
            s / (rows.len() * k) as f64
        };
        let umr = mse(&a.recon_x_from_x.value(), &a.target_x, &a.mask_x.masked)
            + mse(&a.recon_y_from_y.value(), &a.target_y, &a.mask_y.masked);
        let cmr = mse(&a.recon_y_from_x.value(), &a.target_y, &a.mask_x.masked)
            + mse(&a.recon_x_from_y.value(), &a.target_x, &a.mask_y.masked);
        assert!((loss_umr(&a).unwrap().item() - umr).abs() < 1e-13);
        assert!((loss_cmr(&a).unwrap().item() - cmr).abs() < 1e-13);
    }

    #[test]
    fn total_gradient_check_on_miniature_model() {
        let cfg = CsmoeConfig::miniature();
        let mut model = init_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.visit_params_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2)));
        let data = mini_batch(&cfg, 2);
        let lc = LossConfig { lambda: 0.5, gamma: 0.5, ..Default::default() };
        let report = check_gradients(&mut model, GradCheckOptions::default(), |m, tape| {
            let pairs: Vec<_> = data.iter().map(|(x, y)| (x, y)).collect();
            let arts = forward_batch(m, tape, &pairs, &[7, 8])?;
            Ok(loss_total(m, &arts, &lc)?.0)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{:?}", report.per_parameter_errors);
    }
}
