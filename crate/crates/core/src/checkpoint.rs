//! Shared on-disk format for grids, denoisers and token tables: a short
//! text header followed by a little-endian `f32` blob.
//!
//! ```text
//! tokensds-checkpoint 1
//! kind voxel_grid
//! meta resolution 48
//! tensor density_raw 48 48 48
//! tensor color_raw 48 48 48 3
//! end_header
//! <f32 LE values of every tensor, in header order>
//! ```

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "tokensds-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    meta: Vec<(String, String)>,
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        assert!(!key.contains(char::is_whitespace) && !value.contains('\n'));
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}` has bad value `{raw}`")))
    }

    pub fn meta_floats(&self, key: &str) -> Result<Vec<f64>> {
        self.meta(key)?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Checkpoint(format!("meta `{key}` has bad number `{s}`")))
            })
            .collect()
    }

    pub fn push_tensor(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "tensor {name}");
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape,
            values,
        });
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.values.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {}\n", t.name, dims.join(" ")));
        }
        header.push_str("end_header\n");
        let mut out = header.into_bytes();
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Checkpoint("bad magic".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = next_line()?
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Checkpoint("missing kind".into()))?
            .to_string();
        let mut ck = Checkpoint::new(kind);
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end_header" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor without a name".into()))?;
                let shape = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape for `{name}`")))?;
                shapes.push((name.to_string(), shape));
            } else {
                return Err(Error::Checkpoint(format!("unrecognized header line `{line}`")));
            }
        }
        let mut blob = &bytes[pos..];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if blob.len() < n * 4 {
                return Err(Error::Checkpoint(format!("blob truncated in `{name}`")));
            }
            let values = blob[..n * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            blob = &blob[n * 4..];
            ck.tensors.push(Tensor { name, shape, values });
        }
        if !blob.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", blob.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rounds every value to the nearest `f32`, matching what a save/load
/// cycle produces.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}
