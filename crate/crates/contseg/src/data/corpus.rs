//! Corpus directory format.
//!
//! A split directory holds `manifest.json` plus one PNG and one JSON target
//! file per sample (`sample_00042.png` / `sample_00042.json`). Target files
//! follow `{"masks": [<run-length runs>, …], "classes": [<class id>, …]}`
//! with masks run-length encoded row-major, background run first. Because
//! generated pixel values sit exactly on the 1/255 grid, save → load is the
//! identity on image arrays.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::rle::{rle_decode, rle_encode};
use super::{Sample, SynthSpec, Target};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub split: String,
    pub num_samples: usize,
    pub spec: SynthSpec,
}

#[derive(Serialize, Deserialize)]
struct TargetFile {
    masks: Vec<Vec<u32>>,
    classes: Vec<u32>,
}

fn sample_stem(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Write a split to `dir` (created if absent).
pub fn save_corpus(dir: &Path, samples: &[Sample], spec: &SynthSpec, split: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        split: split.to_string(),
        num_samples: samples.len(),
        spec: spec.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    for (i, s) in samples.iter().enumerate() {
        let (_, h, w) = s.image.dim();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                (s.image[[ch, y as usize, x as usize]] * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(dir.join(format!("{}.png", sample_stem(i))))?;

        let tf = TargetFile {
            masks: s.targets.iter().map(|t| rle_encode(&t.mask)).collect(),
            classes: s.targets.iter().map(|t| t.class_id).collect(),
        };
        std::fs::write(
            dir.join(format!("{}.json", sample_stem(i))),
            serde_json::to_vec(&tf)?,
        )?;
    }
    Ok(())
}

/// Read a split back. Fails on unknown schema or malformed files.
pub fn load_corpus(dir: &Path) -> Result<(Vec<Sample>, CorpusManifest)> {
    let manifest: CorpusManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "corpus schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.num_samples);
    for i in 0..manifest.num_samples {
        let png = image::open(dir.join(format!("{}.png", sample_stem(i))))?.to_rgb8();
        let (w, h) = (png.width() as usize, png.height() as usize);
        let mut arr = Array3::<f64>::zeros((3, h, w));
        for (x, y, px) in png.enumerate_pixels() {
            for ch in 0..3 {
                arr[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
            }
        }

        let tf: TargetFile =
            serde_json::from_slice(&std::fs::read(dir.join(format!("{}.json", sample_stem(i))))?)?;
        if tf.masks.len() != tf.classes.len() {
            return Err(Error::format(format!(
                "sample {i}: {} masks vs {} classes",
                tf.masks.len(),
                tf.classes.len()
            )));
        }
        let targets = tf
            .masks
            .iter()
            .zip(tf.classes.iter())
            .map(|(runs, &class_id)| {
                Ok(Target {
                    mask: rle_decode(runs, h, w)?,
                    class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            image: Arc::new(arr),
            targets,
        });
    }
    Ok((samples, manifest))
}
