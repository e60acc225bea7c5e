//! Parameter checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VIPA1" | precision u8 (4 or 8) | step u64 | config len u32 | config text
//! | vocab len u32 | vocab tokens, newline separated | param count u32
//! | per param: name len u32, name, rank u32, dims u32…, values
//! | moments u8 (0 or 1) | when 1: first then second moment of every param
//! ```

use std::path::Path;

use vipa_core::encoders::Vocabulary;
use vipa_core::nn::ParamStore;
use vipa_core::{Precision, Real, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 5] = b"VIPA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ParamStore<T>,
    /// AdamW first and second moments, parameter order.
    pub moments: Option<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        match T::PRECISION {
            Precision::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(T::PRECISION.flag());
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        let words = self.vocab.tokens().join("\n");
        put_u32(&mut out, words.len());
        out.extend_from_slice(words.as_bytes());
        put_u32(&mut out, self.params.len());
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            put_values(&mut out, p.value.data());
        }
        match &self.moments {
            Some((m, v)) => {
                out.push(1);
                for t in m.iter().chain(v) {
                    put_values(&mut out, t.data());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(if magic.starts_with(b"VIPA") {
                format!("unsupported checkpoint version {:?}", String::from_utf8_lossy(&magic[4..]))
            } else {
                "not a checkpoint (bad magic)".to_string()
            });
        }
        let flag = r.take(1)?[0];
        let precision = Precision::from_flag(flag).ok_or_else(|| format!("unknown precision flag {flag}"))?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| "config text is not UTF-8".to_string())?;
        let config = RunConfig::parse(text).map_err(|e| format!("embedded config: {e}"))?;
        let len = r.u32()?;
        let words = std::str::from_utf8(r.take(len)?).map_err(|_| "vocabulary is not UTF-8".to_string())?;
        let lines: Vec<&str> = words.split('\n').collect();
        let vocab = Vocabulary::from_lines(&lines).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "parameter name is not UTF-8".to_string())?.to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let data = r.values::<T>(precision, shape.iter().product())?;
            params.register(&name, Tensor::new(&shape, data).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            shapes.push(shape);
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut read = || -> std::result::Result<Vec<Tensor<T>>, String> {
                    shapes
                        .iter()
                        .map(|s| Tensor::new(s, r.values::<T>(precision, s.iter().product())?).map_err(|e| e.to_string()))
                        .collect()
                };
                let m = read()?;
                let v = read()?;
                Some((m, v))
            }
            f => return Err(format!("bad moments flag {f}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { config, vocab, step, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Precision a checkpoint file was written at.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).at(path)?;
    let bad = |message: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < MAGIC.len() + 1 || !bytes.starts_with(b"VIPA") {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("unsupported checkpoint version"));
    }
    Precision::from_flag(bytes[MAGIC.len()]).ok_or_else(|| bad("unknown precision flag"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn values<T: Real>(&mut self, precision: Precision, n: usize) -> std::result::Result<Vec<T>, String> {
        let width = precision.flag() as usize;
        let raw = self.take(n.checked_mul(width).ok_or("tensor too large")?)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                Precision::F64 => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect())
    }
}
