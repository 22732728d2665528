//! Supervised segmentation objective.
//!
//! For one image with `m` annotated masks, proposals matched to them by
//! [`crate::matching`] are pushed towards objectness 1 and their masks
//! towards the annotation; every other proposal is pushed towards
//! objectness 0:
//!
//! ```text
//! L_loc = Σ_matched [ -log s_i + L_mask(M_i, gt) ] + Σ_unmatched -log(1 - s_i)
//! L_mask = BCE(M, gt) + Dice(M, gt)
//! ```
//!
//! BCE is averaged over pixels; Dice is `1 - (2Σpg + ε) / (Σp + Σg + ε)`.
//! Classification of the matched proposals uses a focal term, averaged over
//! the `m` matched slots per image:
//!
//! ```text
//! L_cls = (1/m) Σ_matched Σ_c -(1 - p_c)^γ [g_c log p_c + (1-g_c) log(1-p_c)]
//! ```
//!
//! where each class probability is an independent sigmoid. The auxiliary
//! classification head instead uses a plain softmax cross-entropy over its
//! own label space (slot 0 reserved for "inherited" instances).

use ndarray::{Array2, ArrayView2};

use super::LossConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::matching::MatchResult;
use crate::tape::{DiceKind, Tape, Var};

/// Mask quality between one proposal (probabilities) and one binary ground
/// truth, as plain numbers: pixel-mean binary cross-entropy plus the Dice
/// complement. This is the same quantity the matching cost and the training
/// objective use; keeping a pure version lets tests pin its values directly.
pub fn mask_loss(
    proposal: &ArrayView2<f64>,
    gt: &ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    if proposal.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "mask_loss: proposal {:?} vs ground truth {:?}",
            proposal.dim(),
            gt.dim()
        )));
    }
    let bce = kernels::bce_mean_probs(proposal, gt, cfg.prob_clamp);
    let dice = kernels::dice_loss_probs(proposal, gt, cfg.dice_epsilon);
    Ok(bce + dice)
}

/// The two parts of the localization objective, plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct ObjectnessLoss {
    pub total: Var,
    /// Objectness-score part, summed over all proposals.
    pub score: Var,
    /// Mask part, summed over matched proposals.
    pub mask: Var,
}

/// Localization objective for one image.
///
/// `score_logits` is `[n]`, `mask_logits` is `[n, H, W]` (pre-sigmoid, at
/// annotation resolution), `gt_masks` holds the `m` annotated binary masks in
/// slot order, and `mr` is the matching for this image. The score part runs
/// over all `n` proposals; the mask part only over the matched ones. With no
/// annotations the mask part is zero and every proposal is pushed to
/// objectness 0.
pub fn objectness_loss(
    tape: &mut Tape,
    score_logits: Var,
    mask_logits: Var,
    mr: &MatchResult,
    gt_masks: &[Array2<f64>],
    cfg: &LossConfig,
) -> Result<ObjectnessLoss> {
    let n = {
        let sv = tape.val(score_logits);
        if sv.ndim() != 1 {
            return Err(Error::shape(format!(
                "objectness_loss: score logits must be 1-D, got {:?}",
                sv.shape()
            )));
        }
        sv.len()
    };
    let (mh, mw, pix) = {
        let mv = tape.val(mask_logits);
        if mv.ndim() != 3 || mv.shape()[0] != n {
            return Err(Error::shape(format!(
                "objectness_loss: mask logits must be [{n}, H, W], got {:?}",
                mv.shape()
            )));
        }
        (mv.shape()[1], mv.shape()[2], mv.shape()[1] * mv.shape()[2])
    };
    let m = mr.num_real;
    if mr.matched.len() != m || gt_masks.len() != m {
        return Err(Error::shape(format!(
            "objectness_loss: {} matched proposals and {} ground-truth masks for m = {m}",
            mr.matched.len(),
            gt_masks.len()
        )));
    }
    for (j, g) in gt_masks.iter().enumerate() {
        if g.dim() != (mh, mw) {
            return Err(Error::shape(format!(
                "objectness_loss: ground-truth mask {j} is {:?}, proposals are {mh}x{mw}",
                g.dim()
            )));
        }
    }

    // Score part: target 1 on matched proposals, 0 elsewhere, summed.
    let mut targets = vec![0.0; n];
    for &p in &mr.matched {
        targets[p] = 1.0;
    }
    let t = ndarray::Array1::from_vec(targets).into_dyn();
    let per_slot = tape.bce_elem(score_logits, t);
    let score = tape.sum_all(per_slot);

    // Mask part: BCE + Dice per matched proposal, summed over slots.
    let mask = if m == 0 {
        tape.scalar(0.0)
    } else {
        let flat = tape.reshape(mask_logits, &[n, pix]);
        let sel = tape.select_rows(flat, &mr.matched);
        let mut gt = Array2::<f64>::zeros((m, pix));
        for (j, g) in gt_masks.iter().enumerate() {
            for (k, &v) in g.iter().enumerate() {
                gt[[j, k]] = v;
            }
        }
        let gt = gt.into_dyn();
        let bce = tape.bce_mean_rows(sel, gt.clone());
        let dice = tape.dice_rows(sel, gt, DiceKind::Linear, cfg.dice_epsilon);
        let both = tape.add(bce, dice);
        tape.sum_all(both)
    };

    let total = tape.add(score, mask);
    Ok(ObjectnessLoss { total, score, mask })
}

/// Focal classification term for the matched proposals of one image.
///
/// `logits` is `[m, c]` (one row per matched slot, in slot order, columns
/// restricted to the current step's classes) and `labels[j]` the column of
/// slot `j`'s true class — `None` when the true class lies outside the
/// current columns (possible under the protocol that keeps earlier labels),
/// in which case the whole row acts as negatives. The per-element focal
/// binary cross-entropy is summed over classes and slots, then divided by
/// `m`. An image with no annotations contributes zero.
pub fn focal_class_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[Option<usize>],
    gamma: f64,
) -> Result<Var> {
    let (m, c) = {
        let lv = tape.val(logits);
        if lv.ndim() != 2 {
            return Err(Error::shape(format!(
                "focal_class_loss: logits must be 2-D, got {:?}",
                lv.shape()
            )));
        }
        (lv.shape()[0], lv.shape()[1])
    };
    if labels.len() != m {
        return Err(Error::shape(format!(
            "focal_class_loss: {} labels for {m} rows",
            labels.len()
        )));
    }
    if m == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut onehot = Array2::<f64>::zeros((m, c));
    for (j, &l) in labels.iter().enumerate() {
        if let Some(l) = l {
            if l >= c {
                return Err(Error::shape(format!(
                    "focal_class_loss: label {l} out of range for {c} classes"
                )));
            }
            onehot[[j, l]] = 1.0;
        }
    }
    let f = tape.focal_elem(logits, onehot.into_dyn(), gamma);
    let s = tape.sum_all(f);
    Ok(tape.scale(s, 1.0 / m as f64))
}

/// Auxiliary classification term: softmax cross-entropy of the auxiliary
/// head's logits `[k, a]` against integer targets, averaged over the `k`
/// assigned rows. Row targets use the head's own label space: slot 0 for
/// instances inherited from earlier steps, slots `1..a` for current classes.
pub fn aux_class_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (k, a) = {
        let lv = tape.val(logits);
        if lv.ndim() != 2 {
            return Err(Error::shape(format!(
                "aux_class_loss: logits must be 2-D, got {:?}",
                lv.shape()
            )));
        }
        (lv.shape()[0], lv.shape()[1])
    };
    if targets.len() != k {
        return Err(Error::shape(format!(
            "aux_class_loss: {} targets for {k} rows",
            targets.len()
        )));
    }
    if k == 0 {
        return Ok(tape.scalar(0.0));
    }
    for &t in targets {
        if t >= a {
            return Err(Error::shape(format!(
                "aux_class_loss: target {t} out of range for {a} choices"
            )));
        }
    }
    let ce = tape.softmax_ce_rows(logits, targets.to_vec());
    Ok(tape.mean_all(ce))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    use crate::tape::check::gradcheck;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn sigmoid(x: f64) -> f64 {
        kernels::sigmoid(x)
    }

    #[test]
    fn mask_loss_at_binary_equality_is_clamp_limited() {
        let cfg = LossConfig::default();
        let mut g = Array2::<f64>::zeros((8, 8));
        for i in 0..4 {
            for j in 2..6 {
                g[[i, j]] = 1.0;
            }
        }
        let v = mask_loss(&g.view(), &g.view(), &cfg).unwrap();
        // BCE bottoms out at the clamp (about 1e-7 per pixel); Dice is
        // exactly zero.
        let per_pixel = -(1.0 - cfg.prob_clamp).ln();
        assert!(v >= 0.0 && v <= 2.0 * per_pixel, "v = {v}");
    }

    #[test]
    fn mask_loss_disjoint_unit_pixels_hits_dice_formula() {
        let cfg = LossConfig::default();
        let mut p = Array2::<f64>::zeros((4, 4));
        let mut g = Array2::<f64>::zeros((4, 4));
        p[[0, 0]] = 1.0;
        g[[3, 3]] = 1.0;
        let v = mask_loss(&p.view(), &g.view(), &cfg).unwrap();
        let dice = 1.0 - cfg.dice_epsilon / (2.0 + cfg.dice_epsilon);
        let c = cfg.prob_clamp;
        // Two pixels are maximally wrong, the other 14 maximally right.
        let bce = (2.0 * -(c.ln()) + 14.0 * -((1.0 - c).ln())) / 16.0;
        assert!((v - (bce + dice)).abs() < 1e-9, "v = {v}");
    }

    #[test]
    fn mask_loss_matches_naive_oracle() {
        let cfg = LossConfig::default();
        let mut r = rng(41);
        let p = Array2::from_shape_fn((8, 8), |_| r.random::<f64>());
        let g = Array2::from_shape_fn((8, 8), |_| f64::from(r.random::<bool>()));
        let v = mask_loss(&p.view(), &g.view(), &cfg).unwrap();
        let mut bce = 0.0_f64;
        let mut num = cfg.dice_epsilon;
        let mut den = cfg.dice_epsilon;
        for (pi, gi) in p.iter().zip(g.iter()) {
            let pc = pi.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp);
            bce += -(gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln());
            num += 2.0 * pi * gi;
            den += pi + gi;
        }
        let oracle = bce / 64.0 + (1.0 - num / den);
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn mask_loss_rejects_shape_mismatch() {
        let cfg = LossConfig::default();
        let p = Array2::<f64>::zeros((4, 4));
        let g = Array2::<f64>::zeros((4, 5));
        assert!(mask_loss(&p.view(), &g.view(), &cfg).is_err());
    }

    fn toy_match(matched: Vec<usize>, n: usize) -> MatchResult {
        let m = matched.len();
        let unmatched: Vec<usize> = (0..n).filter(|p| !matched.contains(p)).collect();
        let mut sigma = matched.clone();
        sigma.extend(unmatched.iter().copied());
        MatchResult {
            sigma,
            num_real: m,
            matched,
            unmatched,
        }
    }

    #[test]
    fn objectness_loss_near_zero_at_confident_optimum() {
        let cfg = LossConfig::default();
        let n = 4;
        let (h, w) = (4, 4);
        let mr = toy_match(vec![1, 3], n);
        let mut g0 = Array2::<f64>::zeros((h, w));
        g0[[0, 0]] = 1.0;
        g0[[0, 1]] = 1.0;
        let mut g1 = Array2::<f64>::zeros((h, w));
        g1[[2, 2]] = 1.0;
        let gt = vec![g0.clone(), g1.clone()];

        let mut scores = Array1::<f64>::from_elem(n, -20.0);
        scores[1] = 20.0;
        scores[3] = 20.0;
        let mut masks = Array3::<f64>::from_elem((n, h, w), -20.0);
        for (k, &v) in g0.iter().enumerate() {
            masks[[1, k / w, k % w]] = if v > 0.5 { 20.0 } else { -20.0 };
        }
        for (k, &v) in g1.iter().enumerate() {
            masks[[3, k / w, k % w]] = if v > 0.5 { 20.0 } else { -20.0 };
        }

        let mut tape = Tape::new();
        let s = tape.constant(scores.into_dyn());
        let m = tape.constant(masks.into_dyn());
        let out = objectness_loss(&mut tape, s, m, &mr, &gt, &cfg).unwrap();
        let v = tape.val(out.total).sum();
        assert!(v > 0.0 && v < 1e-3, "optimum value {v}");
    }

    #[test]
    fn objectness_score_part_at_half_is_n_log_two() {
        let cfg = LossConfig::default();
        let n = 6;
        let mr = toy_match(vec![], n);
        let mut tape = Tape::new();
        let s = tape.constant(Array1::<f64>::zeros(n).into_dyn());
        let m = tape.constant(Array3::<f64>::zeros((n, 4, 4)).into_dyn());
        let out = objectness_loss(&mut tape, s, m, &mr, &[], &cfg).unwrap();
        let score = tape.val(out.score).sum();
        assert!((score - n as f64 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(tape.val(out.mask).sum(), 0.0);
    }

    #[test]
    fn objectness_loss_matches_slotwise_oracle() {
        let cfg = LossConfig::default();
        let n = 5;
        let (h, w) = (4, 4);
        let mr = toy_match(vec![2, 0], n);
        let mut r = rng(99);
        let scores = Array1::from_shape_fn(n, |_| r.random_range(-3.0..3.0));
        let masks = Array3::from_shape_fn((n, h, w), |_| r.random_range(-3.0..3.0));
        let gt: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((h, w), |_| f64::from(r.random::<bool>())))
            .collect();

        let mut tape = Tape::new();
        let s = tape.constant(scores.clone().into_dyn());
        let m = tape.constant(masks.clone().into_dyn());
        let out = objectness_loss(&mut tape, s, m, &mr, &gt, &cfg).unwrap();
        let got = tape.val(out.total).sum();

        let mut oracle = 0.0;
        for p in 0..n {
            let sp = sigmoid(scores[p]);
            if let Some(j) = mr.matched.iter().position(|&q| q == p) {
                oracle += -sp.ln();
                let prob = masks.index_axis(ndarray::Axis(0), p).mapv(sigmoid);
                oracle += mask_loss(&prob.view(), &gt[j].view(), &cfg).unwrap();
            } else {
                oracle += -(1.0 - sp).ln();
            }
        }
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn objectness_loss_invariant_under_proposal_relabeling() {
        // Renumbering proposals while renumbering the match the same way
        // must not change the value: the objective depends on the pairing,
        // not on slot order.
        let cfg = LossConfig::default();
        let n = 5;
        let (h, w) = (4, 4);
        let mut r = rng(7);
        let scores = Array1::from_shape_fn(n, |_| r.random_range(-2.0..2.0));
        let masks = Array3::from_shape_fn((n, h, w), |_| r.random_range(-2.0..2.0));
        let gt: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((h, w), |_| f64::from(r.random::<bool>())))
            .collect();
        let perm = [3usize, 0, 4, 1, 2]; // new index of old proposal p
        let mut scores_p = scores.clone();
        let mut masks_p = masks.clone();
        for p in 0..n {
            scores_p[perm[p]] = scores[p];
            for i in 0..h {
                for j in 0..w {
                    masks_p[[perm[p], i, j]] = masks[[p, i, j]];
                }
            }
        }
        let mr = toy_match(vec![2, 0], n);
        let mr_p = toy_match(vec![perm[2], perm[0]], n);

        let mut t1 = Tape::new();
        let s1 = t1.constant(scores.into_dyn());
        let m1 = t1.constant(masks.into_dyn());
        let a = objectness_loss(&mut t1, s1, m1, &mr, &gt, &cfg).unwrap();
        let mut t2 = Tape::new();
        let s2 = t2.constant(scores_p.into_dyn());
        let m2 = t2.constant(masks_p.into_dyn());
        let b = objectness_loss(&mut t2, s2, m2, &mr_p, &gt, &cfg).unwrap();
        let va = t1.val(a.total).sum();
        let vb = t2.val(b.total).sum();
        assert!((va - vb).abs() < 1e-12, "{va} vs {vb}");
    }

    #[test]
    fn focal_at_gamma_zero_reduces_to_bce() {
        let mut r = rng(5);
        for _ in 0..100 {
            let m = r.random_range(1..4);
            let c = r.random_range(1..5);
            let logits = Array2::from_shape_fn((m, c), |_| r.random_range(-4.0..4.0));
            let labels: Vec<Option<usize>> = (0..m).map(|_| Some(r.random_range(0..c))).collect();

            let mut tape = Tape::new();
            let x = tape.constant(logits.clone().into_dyn());
            let f = focal_class_loss(&mut tape, x, &labels, 0.0).unwrap();
            let got = tape.val(f).sum();

            let mut bce = 0.0;
            for j in 0..m {
                for k in 0..c {
                    let t = f64::from(labels[j] == Some(k));
                    bce += kernels::bce_with_logits(logits[[j, k]], t);
                }
            }
            bce /= m as f64;
            assert!((got - bce).abs() < 1e-12, "{got} vs {bce}");
        }
    }

    #[test]
    fn focal_matches_direct_oracle() {
        let gamma = 2.0;
        let logits =
            Array2::from_shape_vec((2, 3), vec![1.3, -0.7, 0.2, -2.0, 0.5, 1.1]).unwrap();
        let labels = [Some(0usize), Some(2)];
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone().into_dyn());
        let f = focal_class_loss(&mut tape, x, &labels, gamma).unwrap();
        let got = tape.val(f).sum();

        let mut oracle = 0.0;
        for j in 0..2 {
            for k in 0..3 {
                let p = sigmoid(logits[[j, k]]);
                let t = f64::from(labels[j] == Some(k));
                let pt = if t > 0.5 { p } else { 1.0 - p };
                oracle += -(1.0 - pt).powf(gamma) * pt.ln();
            }
        }
        oracle /= 2.0;
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");

        // Confident and correct: near zero.
        let sharp = Array2::from_shape_vec((1, 2), vec![12.0, -12.0]).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(sharp.into_dyn());
        let f2 = focal_class_loss(&mut t2, x2, &[Some(0)], 2.0).unwrap();
        assert!(t2.val(f2).sum() < 1e-9);
    }

    #[test]
    fn focal_empty_and_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::<f64>::zeros((0, 3)).into_dyn());
        let f = focal_class_loss(&mut tape, x, &[], 2.0).unwrap();
        assert_eq!(tape.val(f).sum(), 0.0);
        let y = tape.constant(Array2::<f64>::zeros((1, 3)).into_dyn());
        assert!(focal_class_loss(&mut tape, y, &[Some(3)], 2.0).is_err());
        assert!(focal_class_loss(&mut tape, y, &[], 2.0).is_err());
    }

    #[test]
    fn aux_ce_matches_oracle_and_handles_binary_head() {
        let logits =
            Array2::from_shape_vec((2, 3), vec![0.4, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
        let targets = [2usize, 0];
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone().into_dyn());
        let v = aux_class_loss(&mut tape, x, &targets).unwrap();
        let got = tape.val(v).sum();
        let mut oracle = 0.0;
        for j in 0..2 {
            let row = logits.row(j);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
            oracle += -(logits[[j, targets[j]]] - mx - z.ln());
        }
        oracle /= 2.0;
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");

        // Smallest useful head: one current class plus the inherited slot.
        let two = Array2::from_shape_vec((1, 2), vec![3.0, -3.0]).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(two.into_dyn());
        let v2 = aux_class_loss(&mut t2, x2, &[0]).unwrap();
        let p0 = (3.0f64).exp() / ((3.0f64).exp() + (-3.0f64).exp());
        assert!((t2.val(v2).sum() + p0.ln()).abs() < 1e-12);

        let mut t3 = Tape::new();
        let x3 = t3.constant(Array2::<f64>::zeros((0, 2)).into_dyn());
        let v3 = aux_class_loss(&mut t3, x3, &[]).unwrap();
        assert_eq!(t3.val(v3).sum(), 0.0);
    }

    #[test]
    fn supervised_builders_pass_finite_difference_checks() {
        let cfg = LossConfig::default();
        let mut r = rng(17);
        let n = 4;
        let (h, w) = (3, 3);
        let mr = toy_match(vec![1, 2], n);
        let gt: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((h, w), |_| f64::from(r.random::<bool>())))
            .collect();
        let masks = Array3::from_shape_fn((n, h, w), |_| r.random_range(-2.0..2.0));
        let scores = Array1::from_shape_fn(n, |_| r.random_range(-2.0..2.0));

        // Gradient w.r.t. the score logits (mask logits held fixed).
        let masks_c = masks.clone().into_dyn();
        let mr_c = mr.clone();
        let gt_c = gt.clone();
        gradcheck(
            move |tape, x| {
                let m = tape.constant(masks_c.clone());
                objectness_loss(tape, x, m, &mr_c, &gt_c, &cfg).unwrap().total
            },
            &scores.clone().into_dyn(),
            1e-5,
            1e-6,
        );

        // Gradient w.r.t. the mask logits (score logits held fixed).
        let scores_c = scores.into_dyn();
        let mr_c = mr.clone();
        let gt_c = gt.clone();
        gradcheck(
            move |tape, x| {
                let s = tape.constant(scores_c.clone());
                objectness_loss(tape, s, x, &mr_c, &gt_c, &cfg).unwrap().total
            },
            &masks.into_dyn(),
            1e-5,
            1e-6,
        );

        let logits = Array2::from_shape_fn((3, 4), |_| r.random_range(-2.0..2.0));
        gradcheck(
            |tape, x| focal_class_loss(tape, x, &[Some(0), Some(3), None], 2.0).unwrap(),
            &logits.clone().into_dyn(),
            1e-5,
            1e-6,
        );
        gradcheck(
            |tape, x| aux_class_loss(tape, x, &[2, 0, 1]).unwrap(),
            &logits.into_dyn(),
            1e-5,
            1e-6,
        );
    }
}
