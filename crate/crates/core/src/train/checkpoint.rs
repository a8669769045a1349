//! Binary checkpoints.
//!
//! Layout (little-endian):
//! - `"UVCK"`, version `u16`, group count `u32`
//! - per group: name length `u16`, UTF-8 name, trainable flag `u8`,
//!   tensor count `u32`, then per tensor: rank `u8`, dims `u32`, `f32` data
//! - optimizer flag `u8`; when set: step `u64`, β1, β2, ε, weight decay
//!   (`f32`), slot count `u32`, per slot: length `u32`, first and second
//!   moments (`f32`)
//! - phase tag `u8`
//! - RNG: seed (32 bytes), stream `u64`, word position `u128`
//! - step counter `u64`
//! - model dims: length `u32`, UTF-8 JSON

use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::nn::ParamGroup;
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::Tensor;
use crate::train::state::{ModelDims, ModelState, Phase, RngState, GROUPS};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.groups.len() as u32).to_le_bytes());
    for g in &state.groups {
        out.extend_from_slice(&(g.name().len() as u16).to_le_bytes());
        out.extend_from_slice(g.name().as_bytes());
        out.push(u8::from(g.trainable()));
        out.extend_from_slice(&(g.tensors().len() as u32).to_le_bytes());
        for t in g.tensors() {
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
    }
    match &state.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            let c = opt.config;
            put_f32s(&mut out, &[c.beta1, c.beta2, c.eps, c.weight_decay]);
            out.extend_from_slice(&(opt.first.len() as u32).to_le_bytes());
            for (m, v) in opt.first.iter().zip(&opt.second) {
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
    }
    out.push(state.phase.tag());
    out.extend_from_slice(&state.rng.seed);
    out.extend_from_slice(&state.rng.stream.to_le_bytes());
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    let meta = serde_json::to_vec(&state.dims).expect("dims serialize");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.pos;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: at,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let at = r.pos;
    let count = r.u32()? as usize;
    if count != GROUPS.len() {
        return Err(Error::Format {
            offset: at,
            detail: format!("{count} groups, expected {}", GROUPS.len()),
        });
    }
    let mut groups = Vec::with_capacity(count);
    for expected in GROUPS {
        let len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: "group name is not UTF-8".into(),
            })?
            .to_string();
        if !GROUPS.contains(&name.as_str()) {
            return Err(Error::UnknownGroup(name));
        }
        if name != expected {
            return Err(Error::Format {
                offset: at,
                detail: format!("group `{name}` out of order, expected `{expected}`"),
            });
        }
        let at = r.pos;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("trainable flag {other}"),
                })
            }
        };
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let at = r.pos;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.fail("tensor size overflow"))?;
            let data = r.f32s(numel)?;
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                detail: e.to_string(),
            })?);
        }
        let mut g = ParamGroup::new(name, tensors);
        g.set_trainable(trainable);
        groups.push(g);
    }
    let optimizer = match r.u8()? {
        0 => None,
        _ => {
            let step = r.u64()?;
            let config = AdamWConfig {
                beta1: r.f32()?,
                beta2: r.f32()?,
                eps: r.f32()?,
                weight_decay: r.f32()?,
            };
            let slots = r.u32()? as usize;
            let mut first = Vec::with_capacity(slots.min(1024));
            let mut second = Vec::with_capacity(slots.min(1024));
            for _ in 0..slots {
                let len = r.u32()? as usize;
                first.push(r.f32s(len)?);
                second.push(r.f32s(len)?);
            }
            Some(AdamWState {
                config,
                step,
                first,
                second,
            })
        }
    };
    let at = r.pos;
    let phase = Phase::from_tag(r.u8()?).ok_or(Error::Format {
        offset: at,
        detail: "unknown phase tag".into(),
    })?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let rng = RngState {
        seed,
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let step = r.u64()?;
    let len = r.u32()? as usize;
    let at = r.pos;
    let dims: ModelDims = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
        offset: at,
        detail: format!("model dims: {e}"),
    })?;
    r.finish()?;
    Ok(ModelState {
        dims,
        groups,
        optimizer,
        phase,
        rng,
        step,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_state() -> ModelState {
        let mut s = ModelState::init(ModelDims::default(), 3);
        s.set_trainable(&["projection"]).unwrap();
        s.optimizer = Some(AdamWState::new(AdamWConfig::default(), s.groups[3].tensors()));
        s.optimizer.as_mut().unwrap().first[0][5] = 0.25;
        s.phase = Phase::Stage1;
        s.step = 17;
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let s = small_state();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn wrong_magic_names_offset_zero() {
        let mut bytes = encode_checkpoint(&small_state());
        bytes[1] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_checkpoint(&small_state());
        for cut in [5, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn unknown_group_is_rejected() {
        let mut bytes = encode_checkpoint(&small_state());
        // first group name starts after magic, version, count and name length
        bytes[12] = b'Z';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::UnknownGroup(_))));
    }
}
