// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint files.
//!
//! ```text
//! magic    8 bytes  "GRKCKPT\0"
//! version  u32
//! header   u32 length + UTF-8 JSON {config, step, meta}
//! count    u32 number of tensors
//! tensor   u32 name length, name, u32 rank, u64 dims..., f32 values
//! ```
//!
//! All integers and floats are little-endian. Parameters come first in the
//! layout's canonical order; optimizer moments, when present, follow as
//! `adam_m.<name>` then `adam_v.<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRKCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Free-form record: optimizer hyperparameters, resolved run config.
    pub meta: serde_json::Value,
    pub params: Vec<f32>,
    /// Adam first and second moments.
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    meta: serde_json::Value,
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Write `ckpt` to `path` through a temporary file, so an interrupted write
/// never replaces a good checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let layout = Layout::new(&ckpt.config);
    if ckpt.params.len() != layout.total {
        return Err(Error::Shape(format!(
            "checkpoint has {} parameters, config needs {}",
            ckpt.params.len(),
            layout.total
        )));
    }
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        meta: ckpt.meta.clone(),
    })
    .map_err(|e| Error::io(&tmp, e.into()))?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let n = layout.tensors.len() * if ckpt.moments.is_some() { 3 } else { 1 };
    w.write_all(&(n as u32).to_le_bytes()).map_err(io)?;
    for t in &layout.tensors {
        write_tensor(&mut w, &t.name, &t.shape, &ckpt.params[t.range.clone()]).map_err(io)?;
    }
    if let Some((m, v)) = &ckpt.moments {
        for (prefix, buf) in [("adam_m", m), ("adam_v", v)] {
            for t in &layout.tensors {
                write_tensor(&mut w, &format!("{prefix}.{}", t.name), &t.shape, &buf[t.range.clone()]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file) };
    let io = |e| Error::io(path, e);
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if r.bytes(8).map_err(io)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32().map_err(io)? as usize;
    let header: Header =
        serde_json::from_slice(&r.bytes(len).map_err(io)?).map_err(|e| bad(format!("bad header: {e}")))?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    let count = r.u32().map_err(io)? as usize;
    let with_moments = match count {
        c if c == layout.tensors.len() => false,
        c if c == 3 * layout.tensors.len() => true,
        c => return Err(bad(format!("{c} tensors do not fit the stored config"))),
    };
    let mut bufs = vec![vec![0f32; layout.total]; if with_moments { 3 } else { 1 }];
    let prefixes = ["", "adam_m.", "adam_v."];
    for (k, buf) in bufs.iter_mut().enumerate() {
        for t in &layout.tensors {
            let name_len = r.u32().map_err(io)? as usize;
            let name = String::from_utf8(r.bytes(name_len).map_err(io)?).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let want = format!("{}{}", prefixes[k], t.name);
            if name != want {
                return Err(bad(format!("expected tensor {want}, found {name}")));
            }
            let rank = r.u32().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().map_err(io)? as usize);
            }
            if shape != t.shape {
                return Err(bad(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape)));
            }
            let raw = r.bytes(t.range.len() * 4).map_err(io)?;
            for (dst, chunk) in buf[t.range.clone()].iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let mut it = bufs.into_iter();
    let params = it.next().unwrap();
    let moments = if with_moments {
        Some((it.next().unwrap(), it.next().unwrap()))
    } else {
        None
    };
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        meta: header.meta,
        params,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, Model};
    use super::*;

    #[test]
    fn round_trip_with_and_without_moments() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(2, 8, 2, 4, 10).with_halves_shared();
        let m: Model<f32> = init_model(&cfg, 3).unwrap();
        let n = m.params.len();
        for moments in [None, Some((vec![0.5; n], vec![0.25; n]))] {
            let ck = Checkpoint {
                config: cfg.clone(),
                step: 1234,
                meta: serde_json::json!({"betas": [0.9, 0.999]}),
                params: m.params.clone(),
                moments,
            };
            let p = dir.path().join("c.ckpt");
            save_checkpoint(&p, &ck).unwrap();
            assert_eq!(load_checkpoint(&p).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(1, 8, 2, 4, 10);
        let m: Model<f32> = init_model(&cfg, 3).unwrap();
        let ck = Checkpoint {
            config: cfg,
            step: 0,
            meta: serde_json::Value::Null,
            params: m.params,
            moments: None,
        };
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&p).is_err());
        let mut b = bytes.clone();
        b[8] = 7;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 7, .. })));
        let mut b = bytes;
        b[0] = b'X';
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Data(_))));
    }
}
