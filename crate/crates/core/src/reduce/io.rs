//! Reducer files (REDM):
//!
//! ```text
//! "REDM" | u32 version | u8 kind | u64 header_len | header JSON | payload | u64 CRC-64/XZ(payload)
//! ```
//!
//! Arrays live in the little-endian payload as f64 (u32 for neighbour ids)
//! so a loaded model transforms bit-identically to the one that was saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pca::PcaModel;
use super::umap::{UmapModel, UmapParams};
use super::Reducer;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::CRC64;

pub const MAGIC: &[u8; 4] = b"REDM";
pub const VERSION: u32 = 1;
const KIND_PCA: u8 = 0;
const KIND_UMAP: u8 = 1;

#[derive(Serialize, Deserialize)]
struct PcaHeader {
    k: usize,
    dim: usize,
    fitted_on: String,
    centered: bool,
    rank_deficient: usize,
}

#[derive(Serialize, Deserialize)]
struct UmapHeader {
    params: UmapParams,
    out_dims: usize,
    n_fit: usize,
    dim: usize,
    k: usize,
}

fn put_f64(out: &mut Vec<u8>, v: &[f64]) {
    out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corruption("reducer payload is truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn reducer_to_bytes(r: &Reducer) -> Result<Vec<u8>> {
    let (kind, header, payload) = match r {
        Reducer::Pca(m) => {
            let header = serde_json::to_vec(&PcaHeader {
                k: m.k(),
                dim: m.dim(),
                fitted_on: m.fitted_on.clone(),
                centered: m.centered,
                rank_deficient: m.rank_deficient,
            })?;
            let mut p = Vec::with_capacity((m.k() * m.dim() + 2 * m.k()) * 8);
            put_f64(&mut p, m.basis.data());
            put_f64(&mut p, &m.singular_values);
            put_f64(&mut p, &m.explained);
            (KIND_PCA, header, p)
        }
        Reducer::Umap(m) => {
            let k = m.knn_indices.first().map_or(0, Vec::len);
            let header = serde_json::to_vec(&UmapHeader {
                params: m.params.clone(),
                out_dims: m.out_dims,
                n_fit: m.fit_data.rows(),
                dim: m.fit_data.cols(),
                k,
            })?;
            let mut p = Vec::new();
            put_f64(&mut p, &[m.a, m.b]);
            put_f64(&mut p, m.fit_data.data());
            put_f64(&mut p, m.embedding.data());
            for row in &m.knn_indices {
                p.extend(row.iter().flat_map(|j| j.to_le_bytes()));
            }
            for row in &m.knn_weights {
                put_f64(&mut p, row);
            }
            (KIND_UMAP, header, p)
        }
    };
    let mut out = Vec::with_capacity(4 + 4 + 1 + 8 + header.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&CRC64.checksum(&payload).to_le_bytes());
    Ok(out)
}

pub fn reducer_from_bytes(bytes: &[u8]) -> Result<Reducer> {
    let fixed = 4 + 4 + 1 + 8;
    if bytes.len() < fixed + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a REDM reducer file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "REDM version {version} is not supported (expected {VERSION})"
        )));
    }
    let kind = bytes[8];
    let header_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(fixed))
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file")))?;
    let header = &bytes[fixed..header_end];
    let payload = &bytes[header_end..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if CRC64.checksum(payload) != stored {
        return Err(Error::Corruption("reducer payload checksum mismatch".into()));
    }
    let mut rd = Reader { buf: payload, at: 0 };
    let reducer = match kind {
        KIND_PCA => {
            let h: PcaHeader = serde_json::from_slice(header)
                .map_err(|e| Error::Format(format!("PCA header: {e}")))?;
            let basis = Matrix::new(h.k, h.dim, rd.f64s(h.k * h.dim)?)?;
            Reducer::Pca(PcaModel {
                basis,
                singular_values: rd.f64s(h.k)?,
                explained: rd.f64s(h.k)?,
                fitted_on: h.fitted_on,
                centered: h.centered,
                rank_deficient: h.rank_deficient,
            })
        }
        KIND_UMAP => {
            let h: UmapHeader = serde_json::from_slice(header)
                .map_err(|e| Error::Format(format!("UMAP header: {e}")))?;
            let ab = rd.f64s(2)?;
            let fit_data = Matrix::new(h.n_fit, h.dim, rd.f64s(h.n_fit * h.dim)?)?;
            let embedding = Matrix::new(h.n_fit, h.out_dims, rd.f64s(h.n_fit * h.out_dims)?)?;
            let ids = rd.u32s(h.n_fit * h.k)?;
            let ws = rd.f64s(h.n_fit * h.k)?;
            let chunk = h.k.max(1);
            Reducer::Umap(UmapModel {
                params: h.params,
                a: ab[0],
                b: ab[1],
                out_dims: h.out_dims,
                fit_data,
                knn_indices: ids.chunks(chunk).map(<[u32]>::to_vec).collect(),
                knn_weights: ws.chunks(chunk).map(<[f64]>::to_vec).collect(),
                embedding,
            })
        }
        other => return Err(Error::Format(format!("unknown reducer kind tag {other}"))),
    };
    if rd.at != payload.len() {
        return Err(Error::Corruption(format!(
            "{} unread bytes after reducer payload",
            payload.len() - rd.at
        )));
    }
    Ok(reducer)
}

pub fn reducer_save(path: impl AsRef<Path>, r: &Reducer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, reducer_to_bytes(r)?).map_err(|e| Error::io(path, e))
}

pub fn reducer_load(path: impl AsRef<Path>) -> Result<Reducer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    reducer_from_bytes(&bytes)
}
