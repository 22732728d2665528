//! Training objectives.
//!
//! The total objective is assembled from three groups:
//!
//! * supervised segmentation ([`seg`]): localization quality of the matched
//!   proposals plus a focal classification term,
//! * distillation ([`kd`]): terms that tie the live model to a frozen copy
//!   from the previous step, and
//! * the auxiliary classification head ([`seg::aux_class_loss`]).
//!
//! Every term is built on one [`Tape`](crate::tape::Tape) per sample and
//! reduced to a scalar variable; [`compose`] combines the enabled terms into
//! the final objective with per-term weights. Term values are recorded in
//! [`LossTerms`] for logging.

pub mod kd;
pub mod seg;

use serde::{Deserialize, Serialize};

use crate::tape::{KlDirection, Tape, Var};

/// Constants of the supervised objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing exponent of the classification term.
    pub focal_gamma: f64,
    /// Additive smoothing in the Dice ratio.
    pub dice_epsilon: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` inside logarithms.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            dice_epsilon: 1.0,
            prob_clamp: 1e-7,
        }
    }
}

/// Constants of the distillation terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    /// Exponent sharpening the confidence weights `(s̃)^β`.
    pub beta: f64,
    /// Objectness threshold used both for pseudo-label selection and for the
    /// confidence filter of recall-style evaluation.
    pub alpha: f64,
    /// Which distribution leads in the class-distillation divergence. The
    /// default puts the live model first.
    pub kl_direction: KlDirection,
    /// Embedding rows with norm below this floor have no usable direction;
    /// their cosine similarity is treated as zero and a warning is logged.
    pub norm_floor: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            alpha: 0.8,
            kl_direction: KlDirection::LiveFirst,
            norm_floor: 1e-8,
        }
    }
}

/// Per-term switches. Everything is enabled by default; the plain-finetune
/// baseline turns off every distillation term and the auxiliary head.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub seg: bool,
    pub os_kd: bool,
    pub mask_kd: bool,
    pub pe_kd: bool,
    pub cls_kd_unmatched: bool,
    pub cls_kd_matched: bool,
    pub aux: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            seg: true,
            os_kd: true,
            mask_kd: true,
            pe_kd: true,
            cls_kd_unmatched: true,
            cls_kd_matched: true,
            aux: true,
        }
    }
}

impl LossToggles {
    /// All distillation terms and the auxiliary head off; supervision only.
    pub fn finetune() -> Self {
        Self {
            seg: true,
            os_kd: false,
            mask_kd: false,
            pe_kd: false,
            cls_kd_unmatched: false,
            cls_kd_matched: false,
            aux: false,
        }
    }

    /// Set one toggle by its field name. Unknown names are rejected.
    pub fn set(&mut self, name: &str, on: bool) -> crate::Result<()> {
        match name {
            "seg" => self.seg = on,
            "os_kd" => self.os_kd = on,
            "mask_kd" => self.mask_kd = on,
            "pe_kd" => self.pe_kd = on,
            "cls_kd_unmatched" => self.cls_kd_unmatched = on,
            "cls_kd_matched" => self.cls_kd_matched = on,
            "aux" => self.aux = on,
            other => {
                return Err(crate::Error::config(format!(
                    "unknown loss toggle {other:?}; expected one of seg, os_kd, mask_kd, \
                     pe_kd, cls_kd_unmatched, cls_kd_matched, aux"
                )))
            }
        }
        Ok(())
    }
}

/// Per-term scale factors, applied by [`compose`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub os_kd: f64,
    pub mask_kd: f64,
    pub pe_kd: f64,
    pub cls_kd_unmatched: f64,
    pub cls_kd_matched: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            os_kd: 1.0,
            mask_kd: 1.0,
            pe_kd: 1.0,
            cls_kd_unmatched: 1.0,
            cls_kd_matched: 1.0,
            aux: 1.0,
        }
    }
}

/// Scalar value of every objective term for one batch, for logging. Disabled
/// or inapplicable terms stay at zero.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LossTerms {
    /// The weighted sum actually optimized.
    pub total: f64,
    /// Supervised segmentation term (score + mask + focal).
    pub seg: f64,
    /// Objectness-score part of `seg`.
    pub obj_score: f64,
    /// Mask part of `seg`.
    pub obj_mask: f64,
    /// Focal classification part of `seg`.
    pub focal: f64,
    /// Objectness-score distillation.
    pub os_kd: f64,
    /// Mask distillation (raw value; its floor is reported separately).
    pub mask_kd: f64,
    /// Entropy floor of the mask-distillation term: the value it attains when
    /// the live masks equal the frozen ones exactly.
    pub mask_kd_floor: f64,
    /// Positional-embedding distillation.
    pub pe_kd: f64,
    /// Class distillation over unmatched proposals.
    pub cls_kd_unmatched: f64,
    /// Class distillation over matched proposals.
    pub cls_kd_matched: f64,
    /// Auxiliary classification term.
    pub aux: f64,
    /// Matched proposals in the batch.
    pub matched: usize,
    /// Unmatched proposals selected as confident pseudo-labels.
    pub selected: usize,
}

/// Per-group scalar variables of one sample's objective. `None` means the
/// term is disabled or does not apply (for example, no distillation on the
/// first step).
#[derive(Debug, Clone, Copy, Default)]
pub struct TermVars {
    pub seg: Option<Var>,
    pub os_kd: Option<Var>,
    pub mask_kd: Option<Var>,
    pub pe_kd: Option<Var>,
    pub cls_kd_unmatched: Option<Var>,
    pub cls_kd_matched: Option<Var>,
    pub aux: Option<Var>,
}

/// Weighted sum of the present terms. Returns `None` when every term is
/// absent, in which case there is nothing to optimize and the caller should
/// skip the update entirely.
pub fn compose(tape: &mut Tape, terms: &TermVars, w: &LossWeights) -> Option<Var> {
    let mut parts = Vec::new();
    let mut push = |tape: &mut Tape, t: Option<Var>, weight: f64| {
        if let Some(v) = t {
            parts.push(tape.scale(v, weight));
        }
    };
    push(tape, terms.seg, w.seg);
    push(tape, terms.os_kd, w.os_kd);
    push(tape, terms.mask_kd, w.mask_kd);
    push(tape, terms.pe_kd, w.pe_kd);
    push(tape, terms.cls_kd_unmatched, w.cls_kd_unmatched);
    push(tape, terms.cls_kd_matched, w.cls_kd_matched);
    push(tape, terms.aux, w.aux);
    if parts.is_empty() {
        None
    } else {
        Some(tape.add_n(&parts))
    }
}
