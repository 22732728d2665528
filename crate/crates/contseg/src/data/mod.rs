//! Synthetic corpus generation, task schedules, and continual data splits.
//!
//! Scenes are compositions of flat-shaded geometric shapes on a dark noisy
//! background. A class is a (shape kind, fill intensity) pair, so classes are
//! visually separable and a jointly trained model can reach a high ceiling —
//! which is what makes forgetting measurable when training arrives in steps.
//! Shapes drawn later occlude earlier ones and ground truth records the
//! post-occlusion (disjoint) masks, mirroring semantic-segmentation label
//! semantics where every pixel has at most one owner.

mod corpus;
mod rle;
mod schedule;
mod synth;

pub use corpus::{load_corpus, save_corpus, CorpusManifest};
pub use rle::{rle_decode, rle_encode};
pub use schedule::{build_schedule, TaskSchedule};
pub use synth::{generate_dataset, hflip_sample, SynthSpec, DEFAULT_SPEC};

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated mask: binary footprint plus its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub mask: Array2<u8>,
    pub class_id: u32,
}

impl Target {
    /// Foreground pixel count.
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }

    pub fn mask_f64(&self) -> Array2<f64> {
        self.mask.mapv(|v| v as f64)
    }
}

/// One image with its (disjoint) target masks.
///
/// The image is shared behind an [`Arc`] so that step filtering — which keeps
/// most images while rewriting their target lists — stays cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, H, W]` values in `[0, 1]`, quantised to 1/255 steps.
    pub image: Arc<Array3<f64>>,
    pub targets: Vec<Target>,
}

impl Sample {
    /// Class ids present in the targets (with duplicates for multiple
    /// instances).
    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.targets.iter().map(|t| t.class_id)
    }

    pub fn has_class_in(&self, classes: &[u32]) -> bool {
        self.targets.iter().any(|t| classes.contains(&t.class_id))
    }

    /// Render the semantic label map: each pixel carries the class of the
    /// target covering it, or [`BACKGROUND`].
    pub fn semantic_map(&self, allowed: &[u32]) -> Array2<u32> {
        let (_, h, w) = self.image.dim();
        let mut out = Array2::from_elem((h, w), BACKGROUND);
        for t in &self.targets {
            if !allowed.contains(&t.class_id) {
                continue;
            }
            for ((i, j), &v) in t.mask.indexed_iter() {
                if v != 0 {
                    out[[i, j]] = t.class_id;
                }
            }
        }
        out
    }
}

/// Sentinel label for unannotated pixels.
pub const BACKGROUND: u32 = u32::MAX;

/// How images and labels are admitted at each learning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Keep images with a current-step class; labels cover every class seen
    /// so far.
    Sequential,
    /// Keep images with a current-step class and no future-step class; labels
    /// restricted to current-step classes.
    Disjoint,
    /// Keep images with a current-step class regardless of what else they
    /// contain; labels restricted to current-step classes.
    Overlapped,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Protocol::Sequential),
            "disjoint" => Ok(Protocol::Disjoint),
            "overlapped" => Ok(Protocol::Overlapped),
            other => Err(Error::config(format!(
                "unknown protocol {other:?} (expected sequential | disjoint | overlapped)"
            ))),
        }
    }
}

/// Materialise the training view of `dataset` for one step.
pub fn filter_step(
    dataset: &[Sample],
    schedule: &TaskSchedule,
    step: usize,
    protocol: Protocol,
) -> Result<Vec<Sample>> {
    if step < 1 || step > schedule.steps() {
        return Err(Error::config(format!(
            "step {step} outside schedule 1..={}",
            schedule.steps()
        )));
    }
    let current = schedule.classes_at(step);
    let future: Vec<u32> = (step + 1..=schedule.steps())
        .flat_map(|t| schedule.classes_at(t).iter().copied())
        .collect();
    let seen: Vec<u32> = schedule.classes_up_to(step);

    let mut out = Vec::new();
    for s in dataset {
        if !s.has_class_in(current) {
            continue;
        }
        if protocol == Protocol::Disjoint && s.has_class_in(&future) {
            continue;
        }
        let allowed: &[u32] = match protocol {
            Protocol::Sequential => &seen,
            Protocol::Disjoint | Protocol::Overlapped => current,
        };
        let targets: Vec<Target> = s
            .targets
            .iter()
            .filter(|t| allowed.contains(&t.class_id))
            .cloned()
            .collect();
        out.push(Sample {
            image: Arc::clone(&s.image),
            targets,
        });
    }
    Ok(out)
}
