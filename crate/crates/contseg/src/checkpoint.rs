//! Versioned model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (step, schedule, head
//! mode, model hyperparameters, parameter names/shapes/decay flags in
//! order), then each parameter's elements as little-endian `f64` in logical
//! row-major order. `f64 → bytes → f64` is the identity on finite values,
//! so a save/load round trip is bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::data::TaskSchedule;
use crate::model::{HeadMode, ModelConfig};
use crate::params::ParamSet;
use crate::tape::Arr;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    head_mode: HeadMode,
    model: ModelConfig,
    schedule: TaskSchedule,
    params: Vec<HeaderParam>,
}

/// Everything needed to resume or evaluate a run at a step boundary.
#[derive(Debug)]
pub struct Checkpoint {
    /// Last completed step, 1-based.
    pub step: usize,
    pub head_mode: HeadMode,
    pub model: ModelConfig,
    pub schedule: TaskSchedule,
    pub params: ParamSet,
}

/// Write atomically: serialize next to `path`, then rename over it.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        step: ck.step,
        head_mode: ck.head_mode,
        model: ck.model.clone(),
        schedule: ck.schedule.clone(),
        params: ck
            .params
            .iter()
            .map(|(_, e)| HeaderParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                decay: e.decay,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, e) in ck.params.iter() {
            for v in e.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint truncated before magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)
        .map_err(|_| Error::format("checkpoint truncated before version"))?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)
        .map_err(|_| Error::format("checkpoint truncated before header"))?;
    let hlen = u64::from_le_bytes(buf8) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)
        .map_err(|_| Error::format("checkpoint truncated inside header"))?;
    let header: Header = serde_json::from_slice(&hbytes)?;

    let mut params = ParamSet::new();
    for p in &header.params {
        let count: usize = p.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        f.read_exact(&mut bytes).map_err(|_| {
            Error::format(format!("checkpoint truncated inside parameter {:?}", p.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let value = Arr::from_shape_vec(IxDyn(&p.shape), data)
            .map_err(|e| Error::format(format!("parameter {:?}: {e}", p.name)))?;
        params.insert(&p.name, value, p.decay)?;
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint {
        step: header.step,
        head_mode: header.head_mode,
        model: header.model,
        schedule: header.schedule,
        params,
    })
}

/// FNV-1a over every parameter's bytes in order — cheap identity check for
/// "these two parameter sets are the same".
pub fn checksum(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (_, e) in params.iter() {
        eat(e.name.as_bytes());
        for v in e.value.iter() {
            eat(&v.to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_schedule;
    use crate::model::{Model, TaskInit};

    fn toy_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            embed_dim: 8,
            num_queries: 3,
            num_blocks: 1,
            ffn_width: 16,
            image_size: 32,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone()).unwrap();
        let mut ps = model.build_params(123).unwrap();
        model.add_task(&mut ps, HeadMode::PerTask, 1, 4, TaskInit::Random, 123).unwrap();
        Checkpoint {
            step: 1,
            head_mode: HeadMode::PerTask,
            model: cfg,
            schedule: build_schedule(8, 4, 2).unwrap(),
            params: ps,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_001.ckpt");
        let ck = toy_checkpoint();
        save(&path, &ck).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.step, ck.step);
        assert_eq!(back.head_mode, ck.head_mode);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.schedule.steps(), ck.schedule.steps());
        assert_eq!(back.params.len(), ck.params.len());
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(checksum(&ck.params), checksum(&back.params));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ckpt");
        let ck = toy_checkpoint();
        save(&path, &ck).unwrap();

        let bytes = fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, b"NOTACKPT").unwrap();
        assert!(matches!(load(&bad), Err(Error::Format(_))));

        let trunc = dir.path().join("trunc.ckpt");
        fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&trunc), Err(Error::Format(_))));

        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 4]);
        let pad = dir.path().join("pad.ckpt");
        fs::write(&pad, &padded).unwrap();
        assert!(matches!(load(&pad), Err(Error::Format(_))));
    }

    #[test]
    fn checksum_detects_single_bit_change() {
        let ck = toy_checkpoint();
        let before = checksum(&ck.params);
        let mut ps = ck.params;
        let id = ps.id("dec.q_pos").unwrap();
        ps.value_mut(id)[[0, 0]] += 1e-9;
        assert_ne!(before, checksum(&ps));
    }
}
