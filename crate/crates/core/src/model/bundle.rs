//! Binary embedding bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "IDSIMEMB"
//! version      u32       currently 1
//! token_kind   u32       0 = CLS, 1 = PATCH
//! dim          u32
//! count        u32
//! count x { id_len u32, id utf-8 bytes, rows u32 }
//! payload      f32 x (sum(rows) * dim), items in header order, row-major
//! ```
//!
//! The payload length is implied by the header; any disagreement with the
//! actual file length is reported as a corrupt bundle.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 8] = b"IDSIMEMB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Cls,
    Patch,
}

impl TokenKind {
    fn tag(self) -> u32 {
        match self {
            TokenKind::Cls => 0,
            TokenKind::Patch => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(TokenKind::Cls),
            1 => Ok(TokenKind::Patch),
            other => Err(Error::Format(format!("unknown token kind tag {other}"))),
        }
    }
}

/// One image's tokens: a single row for CLS bundles, `rows >= 1` for patch bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingItem {
    pub id: String,
    pub rows: usize,
    /// Row-major, `rows * dim` values.
    pub values: Vec<f32>,
}

impl EmbeddingItem {
    pub fn cls(id: impl Into<String>, values: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            rows: 1,
            values,
        }
    }

    pub fn patches(id: impl Into<String>, rows: usize, values: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            rows,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        if self.rows == 0 {
            0
        } else {
            self.values.len() / self.rows
        }
    }

    /// First row widened to f64.
    pub fn vector(&self) -> Array1<f64> {
        let d = self.dim();
        self.values[..d].iter().map(|&x| x as f64).collect()
    }

    /// All rows widened to f64.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((self.rows, d), |(r, c)| self.values[r * d + c] as f64)
    }

    pub fn from_matrix(id: impl Into<String>, m: ArrayView2<f64>) -> Self {
        Self {
            id: id.into(),
            rows: m.nrows(),
            values: m.iter().map(|&x| x as f32).collect(),
        }
    }
}

/// Header-level view of a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub token_kind: TokenKind,
    pub dim: usize,
    pub count: usize,
    pub total_rows: usize,
    pub min_rows: usize,
    pub max_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub token_kind: TokenKind,
    pub dim: usize,
    pub items: Vec<EmbeddingItem>,
}

impl EmbeddingBundle {
    /// Build a bundle, checking every invariant.
    pub fn new(token_kind: TokenKind, dim: usize, items: Vec<EmbeddingItem>) -> Result<Self> {
        let bundle = Self {
            token_kind,
            dim,
            items,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("bundle dim must be positive"));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.items.len());
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
            match self.token_kind {
                TokenKind::Cls if item.rows != 1 => {
                    return Err(Error::invalid(format!(
                        "CLS item {} has {} rows",
                        item.id, item.rows
                    )))
                }
                TokenKind::Patch if item.rows == 0 => {
                    return Err(Error::invalid(format!("patch item {} has no rows", item.id)))
                }
                _ => {}
            }
            if item.values.len() != item.rows * self.dim {
                return Err(Error::invalid(format!(
                    "item {} has {} values, expected {} x {}",
                    item.id,
                    item.values.len(),
                    item.rows,
                    self.dim
                )));
            }
            if item.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("item {} has non-finite values", item.id)));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> BundleSummary {
        let rows = self.items.iter().map(|i| i.rows);
        BundleSummary {
            token_kind: self.token_kind,
            dim: self.dim,
            count: self.items.len(),
            total_rows: rows.clone().sum(),
            min_rows: rows.clone().min().unwrap_or(0),
            max_rows: rows.max().unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// id -> position lookup table.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.as_str(), i))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(
            24 + self.items.iter().map(|i| 8 + i.id.len() + 4 * i.values.len()).sum::<usize>(),
        );
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.token_kind.tag().to_le_bytes());
        out.extend_from_slice(&u32_of(self.dim, "dim")?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.items.len(), "item count")?.to_le_bytes());
        for item in &self.items {
            out.extend_from_slice(&u32_of(item.id.len(), "id length")?.to_le_bytes());
            out.extend_from_slice(item.id.as_bytes());
            out.extend_from_slice(&u32_of(item.rows, "row count")?.to_le_bytes());
        }
        for item in &self.items {
            for v in &item.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8).map_err(|_| Error::Format("file too short for magic".into()))?;
        if magic != BUNDLE_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle version {version} (this build reads {BUNDLE_VERSION})"
            )));
        }
        let token_kind = TokenKind::from_tag(cur.u32()?)?;
        let dim = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::CorruptBundle("header dim is zero".into()));
        }
        let mut headers = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id_len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| Error::CorruptBundle("item id is not utf-8".into()))?
                .to_owned();
            let rows = cur.u32()? as usize;
            headers.push((id, rows));
        }
        let total_rows: usize = headers.iter().map(|(_, r)| *r).sum();
        let payload = &bytes[cur.pos..];
        let expected = total_rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptBundle("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::CorruptBundle(format!(
                "header implies {expected} payload bytes ({total_rows} rows x dim {dim}), file has {}",
                payload.len()
            )));
        }
        let mut items = Vec::with_capacity(headers.len());
        let mut offset = 0;
        for (id, rows) in headers {
            let n = rows * dim;
            let values: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptBundle(format!("item {id} has non-finite values")));
            }
            items.push(EmbeddingItem { id, rows, values });
        }
        let bundle = Self {
            token_kind,
            dim,
            items,
        };
        bundle.validate().map_err(|e| match e {
            Error::InvalidInput(msg) => Error::CorruptBundle(msg),
            other => other,
        })?;
        Ok(bundle)
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptBundle("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingBundle::from_bytes(&bytes)
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}
