//! Checkpoint container: a text header followed by little-endian float32
//! payloads.
//!
//! ```text
//! GAFCKPT 1
//! meta <key> <value>
//! tensor <name> f32 <dim,dim,...> <byte offset into payload>
//! end
//! <payload bytes>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "GAFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("{what} {s:?} must be a non-empty token without spaces")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            check_token(k, "meta key")?;
            check_token(v, "meta value")?;
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            check_token(&t.name, "tensor name")?;
            if t.values.len() != t.shape.iter().product::<usize>() {
                return Err(bad(format!("tensor {} has wrong value count", t.name)));
            }
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} f32 {} {offset}\n", t.name, dims.join(",")));
            offset += 4 * t.values.len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("missing magic"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["end"] => break,
                ["meta", k, v] => meta.push((k.to_string(), v.to_string())),
                ["tensor", name, "f32", dims, offset] => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dims {dims}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let offset = offset.parse::<usize>().map_err(|_| bad("bad offset"))?;
                    entries.push((name.to_string(), shape, offset));
                }
                _ => return Err(bad(format!("unrecognized header line {line:?}"))),
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_end = 0usize;
        for (name, shape, offset) in entries {
            let len: usize = shape.iter().product();
            let end = offset + 4 * len;
            if end > payload.len() {
                return Err(bad(format!("tensor {name} runs past the payload")));
            }
            let values = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            expected_end = expected_end.max(end);
            tensors.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        if expected_end != payload.len() {
            return Err(bad("payload has trailing bytes"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
