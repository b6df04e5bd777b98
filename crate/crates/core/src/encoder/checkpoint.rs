//! Versioned checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic       8 bytes   "DRCKPT\n\0"
//! version     u32 LE
//! header_len  u64 LE
//! header      header_len bytes of JSON: { config, tensors: [{name, shape}] }
//! blobs       every tensor's data as f64 LE, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{param_shape, EncoderParams};
use super::{Encoder, EncoderConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DRCKPT\n\0";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

/// An encoder in its on-disk form.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_encoder(encoder: &Encoder) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: encoder.config.clone(),
            tensors: encoder
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn into_encoder(self) -> Result<Encoder> {
        self.config.validate()?;
        let mut iter = self.tensors.into_iter();
        let cfg = &self.config;
        let params = EncoderParams::try_from_fn(cfg.num_layers, |name| {
            let (n, t) = iter
                .next()
                .ok_or_else(|| Error::CorruptHeader(format!("missing tensor `{name}`")))?;
            if n != name {
                return Err(Error::CorruptHeader(format!("expected tensor `{name}`, found `{n}`")));
            }
            let want = param_shape(cfg, name);
            if t.shape() != want.as_slice() {
                return Err(Error::CorruptHeader(format!(
                    "tensor `{name}` has shape {:?}, config implies {want:?}",
                    t.shape()
                )));
            }
            Ok(t.with_grad())
        })?;
        if let Some((n, _)) = iter.next() {
            return Err(Error::CorruptHeader(format!("unexpected tensor `{n}`")));
        }
        Ok(Encoder {
            config: self.config,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, encoder: &Encoder) -> Result<()> {
    let ckpt = Checkpoint::from_encoder(encoder);
    let header = Header {
        config: ckpt.config.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&ckpt.format_version.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::CorruptHeader("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    read_exact_or_corrupt(r, &mut word, path)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact_or_corrupt(r, &mut len, path)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::CorruptHeader(format!("implausible header length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact_or_corrupt(r, &mut buf, path)?;
    serde_json::from_slice(&buf).map_err(|e| Error::CorruptHeader(e.to_string()))
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptHeader("file ends inside the header".into())
        } else {
            Error::io(path, e)
        }
    })
}

/// Reads only the header and returns the model shape.
pub fn inspect_checkpoint(path: &Path) -> Result<EncoderConfig> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(read_header(&mut r, path)?.config)
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r, path)?;
    let expected: u64 = header
        .tensors
        .iter()
        .map(|t| 8 * t.shape.iter().product::<usize>() as u64)
        .sum();
    let mut blob = Vec::with_capacity(expected as usize);
    r.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    if (blob.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: blob.len() as u64,
        });
    }
    if (blob.len() as u64) > expected {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after tensor data",
            blob.len() as u64 - expected
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = blob[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += 8 * n;
        let t = Tensor::new(entry.shape, data).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        tensors.push((entry.name, t));
    }
    Checkpoint {
        format_version: FORMAT_VERSION,
        config: header.config,
        tensors,
    }
    .into_encoder()
}
