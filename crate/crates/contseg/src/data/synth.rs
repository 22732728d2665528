//! Deterministic scene synthesis.
//!
//! Every sample is generated from an RNG derived from `(seed, split, index)`,
//! so corpora are pure functions of their spec and any one sample can be
//! regenerated in isolation. Pixel values are quantised to 1/255 steps at
//! generation time; a PNG round trip is therefore lossless and re-generated
//! corpora are byte-identical on disk.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::rng;

use super::{Sample, Target};

/// Corpus parameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Square image extent in pixels.
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub rng_seed: u64,
}

/// The toy configuration used by the bundled presets.
pub const DEFAULT_SPEC: SynthSpec = SynthSpec {
    num_classes: 8,
    image_size: 64,
    shapes_min: 1,
    shapes_max: 3,
    samples_train: 500,
    samples_eval: 100,
    rng_seed: 17,
};

impl Default for SynthSpec {
    fn default() -> Self {
        DEFAULT_SPEC
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::config("num_classes must be ≥ 1".to_string()));
        }
        if self.image_size < 32 {
            return Err(Error::config("image_size must be ≥ 32".to_string()));
        }
        if self.shapes_min < 1 || self.shapes_max < self.shapes_min {
            return Err(Error::config(
                "shapes_per_image range needs 1 ≤ min ≤ max".to_string(),
            ));
        }
        if self.samples_train == 0 || self.samples_eval == 0 {
            return Err(Error::config("sample counts must be positive".to_string()));
        }
        Ok(())
    }

    /// Fill intensity identifying class `c`; spread over a bright band so
    /// every class separates from the dark background.
    pub fn class_intensity(&self, c: u32) -> f64 {
        if self.num_classes <= 1 {
            0.8
        } else {
            0.35 + 0.6 * c as f64 / (self.num_classes - 1) as f64
        }
    }
}

/// Shape vocabulary. Classes cycle through it, so at 8 classes every kind is
/// used exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    BarH,
    BarV,
}

const KINDS: [Kind; 8] = [
    Kind::Disk,
    Kind::Square,
    Kind::Triangle,
    Kind::Ring,
    Kind::Cross,
    Kind::Diamond,
    Kind::BarH,
    Kind::BarV,
];

fn kind_of_class(c: u32) -> Kind {
    KINDS[c as usize % KINDS.len()]
}

/// A placed shape before occlusion.
struct Placed {
    class_id: u32,
    mask: Array2<u8>,
}

/// Rasterise one shape. Geometry is expressed in units of `scale` (the image
/// extent relative to 64) with strokes kept ≥ 8 px at base scale, wide enough
/// to survive coarse-grid mask prediction.
fn raster(kind: Kind, size: usize, rng: &mut impl Rng) -> Array2<u8> {
    let s = size as f64 / 64.0;
    let margin = 12.0 * s;
    let cx: f64 = rng.random_range(margin..size as f64 - margin);
    let cy: f64 = rng.random_range(margin..size as f64 - margin);
    // Primary radius/extent and secondary parameter per kind.
    let (a, b) = match kind {
        Kind::Disk => (rng.random_range(10.0..16.0) * s, 0.0),
        Kind::Square => (rng.random_range(9.0..14.0) * s, 0.0),
        Kind::Triangle => {
            let half_base = rng.random_range(11.0..16.0) * s;
            (half_base, 1.5 * half_base)
        }
        Kind::Ring => {
            let outer = rng.random_range(13.0..16.5) * s;
            (outer, outer - 8.0 * s)
        }
        Kind::Cross => (
            rng.random_range(4.0..5.5) * s,
            rng.random_range(12.0..16.0) * s,
        ),
        Kind::Diamond => (rng.random_range(11.0..16.0) * s, 0.0),
        Kind::BarH | Kind::BarV => (
            rng.random_range(4.0..6.0) * s,
            rng.random_range(13.0..17.0) * s,
        ),
    };
    let inside = |x: f64, y: f64| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match kind {
            Kind::Disk => dx * dx + dy * dy <= a * a,
            Kind::Square => dx.abs() <= a && dy.abs() <= a,
            Kind::Triangle => {
                // Apex up: vertical span [cy - b/2, cy + b/2], width growing
                // linearly from 0 at the apex to `a` half-base at the bottom.
                let t = dy + b / 2.0;
                t >= 0.0 && t <= b && dx.abs() <= a * t / b
            }
            Kind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= a * a && d2 >= b * b
            }
            Kind::Cross => {
                (dx.abs() <= a && dy.abs() <= b) || (dy.abs() <= a && dx.abs() <= b)
            }
            Kind::Diamond => dx.abs() + dy.abs() <= a,
            Kind::BarH => dy.abs() <= a && dx.abs() <= b,
            Kind::BarV => dx.abs() <= a && dy.abs() <= b,
        }
    };
    Array2::from_shape_fn((size, size), |(r, c)| {
        inside(c as f64, r as f64) as u8
    })
}

fn synth_sample(spec: &SynthSpec, label: &str, index: u64) -> Sample {
    let mut r = rng::derive(spec.rng_seed, label, index);
    let n_shapes = r.random_range(spec.shapes_min..=spec.shapes_max);

    // Free choices first; the round-robin class is painted last so it sits on
    // top of the occlusion order and can never be erased — this is what
    // guarantees per-class floor counts in the corpus.
    let mut placed: Vec<Placed> = Vec::with_capacity(n_shapes);
    for slot in 0..n_shapes {
        let class_id = if slot + 1 == n_shapes {
            (index % spec.num_classes as u64) as u32
        } else {
            r.random_range(0..spec.num_classes as u32)
        };
        let mask = raster(kind_of_class(class_id), spec.image_size, &mut r);
        placed.push(Placed { class_id, mask });
    }

    // Occlusion: later shapes erase earlier ones.
    let size = spec.image_size;
    let mut owner = Array2::<i32>::from_elem((size, size), -1);
    for (k, p) in placed.iter().enumerate() {
        for ((i, j), &v) in p.mask.indexed_iter() {
            if v != 0 {
                owner[[i, j]] = k as i32;
            }
        }
    }
    let mut targets = Vec::new();
    for (k, p) in placed.iter().enumerate() {
        let final_mask = Array2::from_shape_fn((size, size), |(i, j)| {
            (owner[[i, j]] == k as i32) as u8
        });
        if final_mask.iter().any(|&v| v != 0) {
            targets.push(Target {
                mask: final_mask,
                class_id: p.class_id,
            });
        }
    }

    // Paint: dark background, flat shape fills, mild per-pixel noise, then
    // 8-bit quantisation (makes image files lossless mirrors of the arrays).
    let mut image = Array3::<f64>::zeros((3, size, size));
    for ch in 0..3 {
        for i in 0..size {
            for j in 0..size {
                let base = match owner[[i, j]] {
                    -1 => 0.08,
                    k => spec.class_intensity(placed[k as usize].class_id),
                };
                let noise: f64 = r.random_range(-0.03..0.03);
                let v = (base + noise).clamp(0.0, 1.0);
                image[[ch, i, j]] = (v * 255.0).round() / 255.0;
            }
        }
    }

    Sample {
        image: Arc::new(image),
        targets,
    }
}

/// Generate the train and eval splits for a spec. Pure: equal specs produce
/// equal corpora.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let train: Vec<Sample> = crate::par::map_ordered_owned(
        (0..spec.samples_train as u64).collect(),
        |i| synth_sample(spec, "train-sample", i),
    );
    let eval: Vec<Sample> = crate::par::map_ordered_owned(
        (0..spec.samples_eval as u64).collect(),
        |i| synth_sample(spec, "eval-sample", i),
    );
    Ok((train, eval))
}

/// Mirror a sample horizontally (image columns and every mask).
/// Re-draw the additive pixel noise of a sample: fresh uniform noise in
/// `[-amp, amp]` on every channel value, clamped to `[0, 1]`. Targets are
/// shared untouched — the geometry does not move, so this augmentation never
/// perturbs proposal-to-object assignments the way geometric jitter would.
pub fn jitter_sample(s: &Sample, amp: f64, rng: &mut impl Rng) -> Sample {
    let dim = s.image.dim();
    let mut image = Array3::zeros(dim);
    for (dst, &src) in image.iter_mut().zip(s.image.iter()) {
        *dst = (src + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
    }
    Sample {
        image: Arc::new(image),
        targets: s.targets.clone(),
    }
}

pub fn hflip_sample(s: &Sample) -> Sample {
    let (c, h, w) = s.image.dim();
    let image = Array3::from_shape_fn((c, h, w), |(ch, i, j)| s.image[[ch, i, w - 1 - j]]);
    let targets = s
        .targets
        .iter()
        .map(|t| {
            let (th, tw) = t.mask.dim();
            Target {
                mask: Array2::from_shape_fn((th, tw), |(i, j)| t.mask[[i, tw - 1 - j]]),
                class_id: t.class_id,
            }
        })
        .collect();
    Sample {
        image: Arc::new(image),
        targets,
    }
}
