//! Distillation objectives.
//!
//! During an incremental step a frozen copy of the previous model acts as
//! teacher. Proposals the matcher did not assign to current annotations may
//! still cover objects from earlier steps, so the frozen model's outputs on
//! those slots are distilled into the live model:
//!
//! * objectness scores via a Bernoulli KL, `KL(s̃ ‖ s)`, averaged over the
//!   unmatched slots ([`kd_objectness_score`]);
//! * mask probabilities via soft-target cross-entropy plus an overlap term
//!   with squared-denominator normalization, weighted per slot by the frozen
//!   confidence `ŵ_i ∝ (s̃_i)^β` ([`kd_mask`]);
//! * positional embeddings via the cosine distance `1 − cos(e_i, ẽ_i)` with
//!   the same confidence weights ([`kd_position`]);
//! * class posteriors over previously seen classes via a softmax KL
//!   ([`class_distillation`]), applied to unmatched slots directly and to
//!   matched slots through the frozen recognizer.
//!
//! Soft targets give the cross-entropy part of the mask term a nonzero
//! floor — the frozen masks' own entropy — which [`kd_mask`] reports
//! separately so logs can show the distance above it. The overlap term's
//! squared-denominator form is exactly zero when live and frozen masks
//! agree, so the whole mask term bottoms out at the reported floor.

use ndarray::{Array1, Array2};

use super::KdConfig;
use crate::error::{Error, Result};
use crate::tape::{DiceKind, KlDirection, Tape, Var};

/// Indices of slots whose objectness is strictly above `alpha`, ascending.
pub fn select_high_objectness(scores: &[f64], alpha: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > alpha)
        .map(|(i, _)| i)
        .collect()
}

/// Normalized confidence weights `ŵ_i = s_i^β / Σ_j s_j^β`, or `None` when
/// the total mass is zero (every score zero, so no slot carries signal).
pub fn confidence_weights(scores: &[f64], beta: f64) -> Option<Vec<f64>> {
    let raw: Vec<f64> = scores.iter().map(|&s| s.powf(beta)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    Some(raw.iter().map(|&r| r / total).collect())
}

/// Objectness-score distillation over the unmatched slots: the mean of
/// `KL(Bernoulli(s̃_i) ‖ Bernoulli(s_i))` with the frozen score leading.
/// `student_logits` is `[u]` (pre-sigmoid), `teacher_scores` the frozen
/// probabilities. When live and frozen scores agree exactly, both the value
/// and the gradient vanish identically. Zero slots contribute zero.
pub fn kd_objectness_score(
    tape: &mut Tape,
    student_logits: Var,
    teacher_scores: &Array1<f64>,
) -> Result<Var> {
    let u = {
        let lv = tape.val(student_logits);
        if lv.ndim() != 1 {
            return Err(Error::shape(format!(
                "kd_objectness_score: logits must be 1-D, got {:?}",
                lv.shape()
            )));
        }
        lv.len()
    };
    if teacher_scores.len() != u {
        return Err(Error::shape(format!(
            "kd_objectness_score: {} frozen scores for {u} slots",
            teacher_scores.len()
        )));
    }
    if u == 0 {
        return Ok(tape.scalar(0.0));
    }
    let kl = tape.bernoulli_kl_elem(student_logits, teacher_scores.clone().into_dyn());
    Ok(tape.mean_all(kl))
}

/// Mask-distillation value plus its entropy floor.
#[derive(Debug, Clone, Copy)]
pub struct MaskKd {
    pub loss: Var,
    /// Value of the cross-entropy part when the live masks equal the frozen
    /// ones: the confidence-weighted mean entropy of the frozen masks.
    pub floor: f64,
}

/// Mask distillation over the unmatched slots: per slot, soft-target
/// cross-entropy (pixel mean) plus the squared-denominator overlap
/// complement, combined with confidence weights `ŵ_i ∝ (s̃_i)^β`.
///
/// `student_mask_logits` is `[u, p]` (pre-sigmoid, flattened pixels),
/// `teacher_masks` the frozen probabilities with the same shape, and
/// `teacher_scores` the frozen objectness of the same slots. When every
/// frozen score is zero there is nothing to weight; the term is zero and a
/// warning is logged.
pub fn kd_mask(
    tape: &mut Tape,
    student_mask_logits: Var,
    teacher_masks: &Array2<f64>,
    teacher_scores: &[f64],
    kd: &KdConfig,
    dice_epsilon: f64,
) -> Result<MaskKd> {
    let (u, p) = {
        let lv = tape.val(student_mask_logits);
        if lv.ndim() != 2 {
            return Err(Error::shape(format!(
                "kd_mask: mask logits must be 2-D, got {:?}",
                lv.shape()
            )));
        }
        (lv.shape()[0], lv.shape()[1])
    };
    if teacher_masks.dim() != (u, p) || teacher_scores.len() != u {
        return Err(Error::shape(format!(
            "kd_mask: frozen masks {:?} and {} scores for [{u}, {p}] logits",
            teacher_masks.dim(),
            teacher_scores.len()
        )));
    }
    if u == 0 {
        return Ok(MaskKd {
            loss: tape.scalar(0.0),
            floor: 0.0,
        });
    }
    let Some(weights) = confidence_weights(teacher_scores, kd.beta) else {
        log::warn!("kd_mask: all frozen scores are zero; term skipped");
        return Ok(MaskKd {
            loss: tape.scalar(0.0),
            floor: 0.0,
        });
    };

    let targets = teacher_masks.clone().into_dyn();
    let bce = tape.bce_mean_rows(student_mask_logits, targets.clone());
    let dice = tape.dice_rows(student_mask_logits, targets, DiceKind::Squared, dice_epsilon);
    let per_slot = tape.add(bce, dice);
    let w = tape.constant(Array1::from_vec(weights.clone()).into_dyn());
    let weighted = tape.mul(per_slot, w);
    let loss = tape.sum_all(weighted);

    // Entropy of the frozen masks under the same weights: the cross-entropy
    // part cannot go below this, and the overlap part reaches zero exactly
    // at agreement.
    let ent_bit = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    let floor = weights
        .iter()
        .zip(teacher_masks.rows())
        .map(|(&wi, row)| {
            let h: f64 = row.iter().map(|&q| ent_bit(q) + ent_bit(1.0 - q)).sum();
            wi * h / p as f64
        })
        .sum();

    Ok(MaskKd { loss, floor })
}

/// Positional-embedding distillation over the unmatched slots: the
/// confidence-weighted sum of `1 − cos(e_i, ẽ_i)`.
///
/// `student_embeds` is `[u, d]`, `teacher_embeds` the frozen embeddings of
/// the same slots. A row whose live or frozen norm falls below
/// `kd.norm_floor` has no usable direction; its cosine is taken as zero
/// (distance 1) and a warning is logged. All-zero frozen scores skip the
/// term as in [`kd_mask`].
pub fn kd_position(
    tape: &mut Tape,
    student_embeds: Var,
    teacher_embeds: &Array2<f64>,
    teacher_scores: &[f64],
    kd: &KdConfig,
) -> Result<Var> {
    let (u, d) = {
        let ev = tape.val(student_embeds);
        if ev.ndim() != 2 {
            return Err(Error::shape(format!(
                "kd_position: embeddings must be 2-D, got {:?}",
                ev.shape()
            )));
        }
        (ev.shape()[0], ev.shape()[1])
    };
    if teacher_embeds.dim() != (u, d) || teacher_scores.len() != u {
        return Err(Error::shape(format!(
            "kd_position: frozen embeddings {:?} and {} scores for [{u}, {d}] live rows",
            teacher_embeds.dim(),
            teacher_scores.len()
        )));
    }
    if u == 0 {
        return Ok(tape.scalar(0.0));
    }
    let Some(weights) = confidence_weights(teacher_scores, kd.beta) else {
        log::warn!("kd_position: all frozen scores are zero; term skipped");
        return Ok(tape.scalar(0.0));
    };

    let mut good = Vec::new();
    let mut degenerate_mass = 0.0;
    {
        let ev = tape.val(student_embeds);
        for i in 0..u {
            let sn: f64 = (0..d).map(|k| ev[[i, k]] * ev[[i, k]]).sum::<f64>().sqrt();
            let tn = teacher_embeds.row(i).mapv(|x| x * x).sum().sqrt();
            if sn >= kd.norm_floor && tn >= kd.norm_floor {
                good.push(i);
            } else {
                degenerate_mass += weights[i];
            }
        }
    }
    if good.len() < u {
        log::warn!(
            "kd_position: {} of {u} rows below norm floor {}; their cosine treated as zero",
            u - good.len(),
            kd.norm_floor
        );
    }

    let base = tape.scalar(degenerate_mass);
    if good.is_empty() {
        return Ok(base);
    }
    let sel = tape.select_rows(student_embeds, &good);
    let refs = teacher_embeds.select(ndarray::Axis(0), &good).into_dyn();
    let dist = tape.cosine_dist_rows(sel, refs);
    let wg: Vec<f64> = good.iter().map(|&i| weights[i]).collect();
    let w = tape.constant(Array1::from_vec(wg).into_dyn());
    let weighted = tape.mul(dist, w);
    let s = tape.sum_all(weighted);
    Ok(tape.add(s, base))
}

/// Class distillation: mean softmax KL between the live class logits and the
/// frozen posterior over the same (previously seen) classes, one row per
/// slot. With the default direction the live distribution leads; at exact
/// agreement both the value and the gradient vanish. Zero rows contribute
/// zero.
pub fn class_distillation(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Array2<f64>,
    direction: KlDirection,
) -> Result<Var> {
    let (k, c) = {
        let lv = tape.val(student_logits);
        if lv.ndim() != 2 {
            return Err(Error::shape(format!(
                "class_distillation: logits must be 2-D, got {:?}",
                lv.shape()
            )));
        }
        (lv.shape()[0], lv.shape()[1])
    };
    if teacher_probs.dim() != (k, c) {
        return Err(Error::shape(format!(
            "class_distillation: frozen posterior {:?} for [{k}, {c}] logits",
            teacher_probs.dim()
        )));
    }
    if k == 0 {
        return Ok(tape.scalar(0.0));
    }
    let kl = tape.softmax_kl_rows(student_logits, teacher_probs.clone().into_dyn(), direction);
    Ok(tape.mean_all(kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    use crate::kernels::sigmoid;
    use crate::tape::check::gradcheck;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn selection_is_strict_and_ordered() {
        assert_eq!(select_high_objectness(&[0.9, 0.79, 0.81], 0.8), vec![0, 2]);
        assert_eq!(select_high_objectness(&[], 0.8), Vec::<usize>::new());
        assert_eq!(select_high_objectness(&[0.8, 0.8], 0.8), Vec::<usize>::new());
        assert_eq!(select_high_objectness(&[0.1, 0.0, 0.5], 0.0), vec![0, 2]);
    }

    #[test]
    fn confidence_weights_normalize_and_degenerate() {
        let w = confidence_weights(&[0.9, 0.5, 0.1], 2.0).unwrap();
        let total = 0.81 + 0.25 + 0.01;
        for (got, want) in w.iter().zip([0.81 / total, 0.25 / total, 0.01 / total]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // β = 0 flattens to uniform regardless of the scores.
        let u = confidence_weights(&[0.9, 0.5, 0.1], 0.0).unwrap();
        for &x in &u {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }

        assert!(confidence_weights(&[0.0, 0.0], 2.0).is_none());
        assert!(confidence_weights(&[], 2.0).is_none());
    }

    #[test]
    fn score_distillation_fixed_point_is_exact() {
        // Frozen scores computed from the very same logits: value ~0 and
        // gradient bitwise zero, so a converged slot is left alone.
        let logits = Array1::from_vec(vec![1.3, -0.4, 2.2]);
        let scores = logits.mapv(sigmoid);
        let mut tape = Tape::new();
        let x = tape.constant(logits.into_dyn());
        let v = kd_objectness_score(&mut tape, x, &scores).unwrap();
        assert!(tape.val(v).sum().abs() < 1e-12);
        let grads = tape.backward(v);
        for &g in grads.wrt(x).unwrap().iter() {
            assert_eq!(g, 0.0, "fixed point must give exactly zero gradient");
        }
    }

    #[test]
    fn score_distillation_hand_value_and_nonnegativity() {
        // Frozen 0.9 against live 0.5.
        let mut tape = Tape::new();
        let x = tape.constant(Array1::from_vec(vec![0.0]).into_dyn());
        let v = kd_objectness_score(&mut tape, x, &Array1::from_vec(vec![0.9])).unwrap();
        let want = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((tape.val(v).sum() - want).abs() < 1e-12);

        let mut r = rng(3);
        for _ in 0..1000 {
            let u = r.random_range(1..4);
            let logits = Array1::from_shape_fn(u, |_| r.random_range(-6.0..6.0));
            let scores = Array1::from_shape_fn(u, |_| r.random::<f64>());
            let mut t = Tape::new();
            let x = t.constant(logits.into_dyn());
            let v = kd_objectness_score(&mut t, x, &scores).unwrap();
            assert!(t.val(v).sum() >= -1e-12);
        }

        let mut t0 = Tape::new();
        let x0 = t0.constant(Array1::<f64>::zeros(0).into_dyn());
        let v0 = kd_objectness_score(&mut t0, x0, &Array1::zeros(0)).unwrap();
        assert_eq!(t0.val(v0).sum(), 0.0);
    }

    #[test]
    fn mask_distillation_bottoms_out_at_entropy_floor() {
        let kd = KdConfig::default();
        let mut r = rng(11);
        let u = 3;
        let p = 16;
        let logits = Array2::from_shape_fn((u, p), |_| r.random_range(-3.0..3.0));
        let frozen = logits.mapv(sigmoid);
        let scores = [0.9, 0.6, 0.3];
        let mut tape = Tape::new();
        let x = tape.constant(logits.into_dyn());
        let out = kd_mask(&mut tape, x, &frozen, &scores, &kd, 1.0).unwrap();
        let v = tape.val(out.loss).sum();
        // Overlap part vanishes exactly at agreement; what remains is the
        // frozen masks' weighted entropy, i.e. the reported floor.
        assert!(out.floor > 0.0);
        assert!((v - out.floor).abs() < 1e-9, "v = {v}, floor = {}", out.floor);
    }

    #[test]
    fn mask_distillation_weights_match_oracle() {
        let kd = KdConfig::default();
        let mut r = rng(13);
        let u = 3;
        let p = 8;
        let logits = Array2::from_shape_fn((u, p), |_| r.random_range(-2.0..2.0));
        let frozen = Array2::from_shape_fn((u, p), |_| r.random::<f64>());
        let scores = [0.9, 0.5, 0.1];
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone().into_dyn());
        let out = kd_mask(&mut tape, x, &frozen, &scores, &kd, 1.0).unwrap();
        let got = tape.val(out.loss).sum();

        let wsum = 0.81 + 0.25 + 0.01;
        let mut oracle = 0.0;
        for i in 0..u {
            let wi = scores[i].powi(2) / wsum;
            let mut bce = 0.0;
            let mut inter = 0.0;
            let mut den = 1.0;
            for j in 0..p {
                let x = logits[[i, j]];
                let t = frozen[[i, j]];
                bce += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                let pr = sigmoid(x);
                inter += 2.0 * pr * t;
                den += pr * pr + t * t;
            }
            let dice = 1.0 - (inter + 1.0) / den;
            oracle += wi * (bce / p as f64 + dice);
        }
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn mask_distillation_skips_on_zero_mass() {
        let kd = KdConfig::default();
        let mut tape = Tape::new();
        let x = tape.constant(Array2::<f64>::zeros((2, 4)).into_dyn());
        let frozen = Array2::<f64>::from_elem((2, 4), 0.5);
        let out = kd_mask(&mut tape, x, &frozen, &[0.0, 0.0], &kd, 1.0).unwrap();
        assert_eq!(tape.val(out.loss).sum(), 0.0);
        assert_eq!(out.floor, 0.0);
    }

    #[test]
    fn position_distillation_endpoints_and_oracle() {
        let kd = KdConfig::default();
        let frozen =
            Array2::from_shape_vec((2, 3), vec![1.0, 2.0, -1.0, 0.5, -0.5, 2.0]).unwrap();
        let scores = [0.8, 0.4];

        // Perfect agreement: zero.
        let mut t1 = Tape::new();
        let x1 = t1.constant(frozen.clone().into_dyn());
        let v1 = kd_position(&mut t1, x1, &frozen, &scores, &kd).unwrap();
        assert!(t1.val(v1).sum().abs() < 1e-12);

        // Exactly opposite: cosine −1 on every row, so the weighted sum is 2.
        let mut t2 = Tape::new();
        let x2 = t2.constant(frozen.mapv(|v| -v).into_dyn());
        let v2 = kd_position(&mut t2, x2, &frozen, &scores, &kd).unwrap();
        assert!((t2.val(v2).sum() - 2.0).abs() < 1e-12);

        // Random four-dimensional case against a direct computation.
        let mut r = rng(23);
        let u = 3;
        let d = 4;
        let live = Array2::from_shape_fn((u, d), |_| r.random_range(-2.0..2.0));
        let froz = Array2::from_shape_fn((u, d), |_| r.random_range(-2.0..2.0));
        let sc = [0.9, 0.2, 0.6];
        let mut t3 = Tape::new();
        let x3 = t3.constant(live.clone().into_dyn());
        let v3 = kd_position(&mut t3, x3, &froz, &sc, &kd).unwrap();
        let got = t3.val(v3).sum();
        let wsum: f64 = sc.iter().map(|s| s * s).sum();
        let mut oracle = 0.0;
        for i in 0..u {
            let li = live.row(i);
            let fi = froz.row(i);
            let dot: f64 = li.iter().zip(fi.iter()).map(|(a, b)| a * b).sum();
            let nl = li.mapv(|x| x * x).sum().sqrt();
            let nf = fi.mapv(|x| x * x).sum().sqrt();
            oracle += (sc[i] * sc[i] / wsum) * (1.0 - dot / (nl * nf));
        }
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn position_distillation_handles_degenerate_rows() {
        let kd = KdConfig::default();
        // Row 0 has a zero live embedding: no direction, distance counted
        // as 1. Row 1 agrees exactly: distance 0.
        let live =
            Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let frozen =
            Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let scores = [0.5, 0.5];
        let mut tape = Tape::new();
        let x = tape.constant(live.into_dyn());
        let v = kd_position(&mut tape, x, &frozen, &scores, &kd).unwrap();
        assert!((tape.val(v).sum() - 0.5).abs() < 1e-12);

        let mut t0 = Tape::new();
        let x0 = t0.constant(Array2::<f64>::zeros((0, 3)).into_dyn());
        let v0 = kd_position(&mut t0, x0, &Array2::zeros((0, 3)), &[], &kd).unwrap();
        assert_eq!(t0.val(v0).sum(), 0.0);
    }

    #[test]
    fn class_distillation_fixed_point_and_hand_values() {
        // Frozen posterior computed from the same logits: value ~0, and the
        // gradient collapses to ~0 as well.
        let logits = Array2::from_shape_vec((2, 3), vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3])
            .unwrap();
        let probs = {
            let mut p = logits.clone();
            for mut row in p.rows_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - mx).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            p
        };
        for dir in [KlDirection::LiveFirst, KlDirection::FixedFirst] {
            let mut tape = Tape::new();
            let x = tape.constant(logits.clone().into_dyn());
            let v = class_distillation(&mut tape, x, &probs, dir).unwrap();
            assert!(tape.val(v).sum().abs() < 1e-12);
            let grads = tape.backward(v);
            for &g in grads.wrt(x).unwrap().iter() {
                assert!(g.abs() < 1e-12);
            }
        }

        // Uniform live (0, 0) against frozen (0.9, 0.1), both directions.
        let flat = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let sharp = Array2::from_shape_vec((1, 2), vec![0.9, 0.1]).unwrap();
        let mut t1 = Tape::new();
        let x1 = t1.constant(flat.clone().into_dyn());
        let live_first =
            class_distillation(&mut t1, x1, &sharp, KlDirection::LiveFirst).unwrap();
        let want_lf = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((t1.val(live_first).sum() - want_lf).abs() < 1e-12);

        let mut t2 = Tape::new();
        let x2 = t2.constant(flat.into_dyn());
        let fixed_first =
            class_distillation(&mut t2, x2, &sharp, KlDirection::FixedFirst).unwrap();
        let want_ff = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((t2.val(fixed_first).sum() - want_ff).abs() < 1e-12);
    }

    #[test]
    fn class_distillation_nonnegative_and_empty() {
        let mut r = rng(31);
        for _ in 0..1000 {
            let k = r.random_range(1..3);
            let c = r.random_range(2..5);
            let logits = Array2::from_shape_fn((k, c), |_| r.random_range(-4.0..4.0));
            let mut probs = Array2::from_shape_fn((k, c), |_| r.random::<f64>() + 1e-3);
            for mut row in probs.rows_mut() {
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            let dir = if r.random::<bool>() {
                KlDirection::LiveFirst
            } else {
                KlDirection::FixedFirst
            };
            let mut tape = Tape::new();
            let x = tape.constant(logits.into_dyn());
            let v = class_distillation(&mut tape, x, &probs, dir).unwrap();
            assert!(tape.val(v).sum() >= -1e-12);
        }

        let mut t0 = Tape::new();
        let x0 = t0.constant(Array2::<f64>::zeros((0, 4)).into_dyn());
        let v0 = class_distillation(&mut t0, x0, &Array2::zeros((0, 4)), KlDirection::LiveFirst)
            .unwrap();
        assert_eq!(t0.val(v0).sum(), 0.0);
    }

    #[test]
    fn distillation_builders_pass_finite_difference_checks() {
        let kd = KdConfig::default();
        let mut r = rng(41);

        let logits = Array1::from_shape_fn(3, |_| r.random_range(-2.0..2.0));
        let scores = Array1::from_shape_fn(3, |_| r.random::<f64>() * 0.98 + 0.01);
        let sc = scores.clone();
        gradcheck(
            move |tape, x| kd_objectness_score(tape, x, &sc).unwrap(),
            &logits.into_dyn(),
            1e-5,
            1e-6,
        );

        let mask_logits = Array2::from_shape_fn((3, 6), |_| r.random_range(-2.0..2.0));
        let frozen_masks = Array2::from_shape_fn((3, 6), |_| r.random::<f64>());
        let fm = frozen_masks.clone();
        gradcheck(
            move |tape, x| {
                kd_mask(tape, x, &fm, &[0.9, 0.5, 0.2], &kd, 1.0).unwrap().loss
            },
            &mask_logits.into_dyn(),
            1e-5,
            1e-6,
        );

        let embeds = Array2::from_shape_fn((3, 5), |_| r.random_range(-2.0..2.0));
        let frozen_embeds = Array2::from_shape_fn((3, 5), |_| r.random_range(-2.0..2.0));
        let fe = frozen_embeds.clone();
        gradcheck(
            move |tape, x| kd_position(tape, x, &fe, &[0.7, 0.3, 0.5], &kd).unwrap(),
            &embeds.into_dyn(),
            1e-5,
            1e-6,
        );

        let cls_logits = Array2::from_shape_fn((2, 4), |_| r.random_range(-2.0..2.0));
        let mut probs = Array2::from_shape_fn((2, 4), |_| r.random::<f64>() + 0.1);
        for mut row in probs.rows_mut() {
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        for dir in [KlDirection::LiveFirst, KlDirection::FixedFirst] {
            let pb = probs.clone();
            gradcheck(
                move |tape, x| class_distillation(tape, x, &pb, dir).unwrap(),
                &cls_logits.clone().into_dyn(),
                1e-5,
                1e-6,
            );
        }
    }
}
