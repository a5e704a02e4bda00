//! Binary checkpoints.
//!
//! Layout: `WSAGCKPT`, a version byte (1), `d_v`, `d_s`, `d_h` and `N` as
//! little-endian `u32`, then every parameter as a little-endian `f64` in
//! declaration order. Training checkpoints append an optimizer section:
//! `ADAM`, the step counter and completed epochs as `u64`, then the first
//! and second moments as `f64` arrays of the parameter length.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WSAGCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;
const ADAM_TAG: &[u8; 4] = b"ADAM";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState,
    pub epochs_done: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: Option<TrainingState>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let d = p.dims();
    let mut out = Vec::with_capacity(25 + 8 * p.len() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for v in [d.d_v, d.d_s, d.d_h, d.num_clips] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, xs: &[f64]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(&mut out, p.as_slice());
    if let Some(t) = &ckpt.training {
        out.extend_from_slice(ADAM_TAG);
        out.extend_from_slice(&t.adam.t.to_le_bytes());
        out.extend_from_slice(&t.epochs_done.to_le_bytes());
        put(&mut out, &t.adam.m);
        put(&mut out, &t.adam.v);
    }
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |offset: usize, message: &str| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "missing WSAGCKPT magic"));
    }
    if bytes.len() < 25 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if bytes[8] != CHECKPOINT_VERSION {
        return Err(fail(8, &format!("unsupported checkpoint version {}", bytes[8])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = ModelDims {
        d_v: u32_at(9),
        d_s: u32_at(13),
        d_h: u32_at(17),
        num_clips: u32_at(21),
    };
    dims.validate().map_err(|e| fail(9, &e.to_string()))?;
    let n = ModelParams::zeros(dims)?.len();
    let floats = |from: usize, count: usize| -> Result<Vec<f64>> {
        let end = from + 8 * count;
        if bytes.len() < end {
            return Err(fail(bytes.len(), "truncated parameter block"));
        }
        Ok(bytes[from..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let data = floats(25, n)?;
    let params = ModelParams::from_vec(dims, data).map_err(|e| fail(25, &e.to_string()))?;
    let mut at = 25 + 8 * n;
    if at == bytes.len() {
        return Ok(Checkpoint {
            params,
            training: None,
        });
    }
    if bytes.len() < at + 20 || &bytes[at..at + 4] != ADAM_TAG {
        return Err(fail(at, "unexpected trailing bytes"));
    }
    let t = u64::from_le_bytes(bytes[at + 4..at + 12].try_into().unwrap());
    let epochs_done = u64::from_le_bytes(bytes[at + 12..at + 20].try_into().unwrap());
    at += 20;
    let m = floats(at, n)?;
    let v = floats(at + 8 * n, n)?;
    if bytes.len() != at + 16 * n {
        return Err(fail(at + 16 * n, "unexpected trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        training: Some(TrainingState {
            adam: AdamState { m, v, t },
            epochs_done,
        }),
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let params = init_params(3, 4, 5, 4, 11).unwrap();
        let plain = Checkpoint {
            params: params.clone(),
            training: None,
        };
        let bytes = encode_checkpoint(&plain);
        assert_eq!(bytes.len(), 25 + 8 * params.len());
        assert_eq!(decode_checkpoint(Path::new("m"), &bytes).unwrap(), plain);

        let n = params.len();
        let full = Checkpoint {
            params,
            training: Some(TrainingState {
                adam: AdamState {
                    m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                    v: (0..n).map(|i| (i as f64).sqrt()).collect(),
                    t: 17,
                },
                epochs_done: 3,
            }),
        };
        let bytes = encode_checkpoint(&full);
        let back = decode_checkpoint(Path::new("m"), &bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back, full);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let params = init_params(2, 2, 2, 2, 1).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            params,
            training: None,
        });
        assert!(decode_checkpoint(Path::new("m"), &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_checkpoint(Path::new("m"), &bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(Path::new("m"), &extra).is_err());
    }
}
