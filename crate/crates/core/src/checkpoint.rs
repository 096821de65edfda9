//! Single-file named-tensor containers (the safetensors layout) and binding
//! of their entries onto [`ModelWeights`].
//!
//! Layout: `u64` little-endian header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}` (plus an optional `__metadata__`
//! string map), then the raw little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use memmap2::Mmap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    Activation, BlockWeights, Linear, Model, ModelConfig, ModelWeights, NormKind, NormWeights,
    PosKind,
};

const METADATA_KEY: &str = "__metadata__";
const CONFIG_METADATA_KEY: &str = "latentscope.config";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte range within the payload.
    pub offsets: (usize, usize),
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

enum Buffer {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Buffer {
    fn bytes(&self) -> &[u8] {
        match self {
            Buffer::Mapped(m) => m,
            Buffer::Owned(v) => v,
        }
    }
}

/// A validated, read-only tensor container.
pub struct TensorContainer {
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
    buffer: Buffer,
    payload_start: usize,
}

impl std::fmt::Debug for TensorContainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TensorContainer")
            .field("entries", &self.entries)
            .field("metadata", &self.metadata)
            .finish()
    }
}

impl TensorContainer {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: the mapping is read-only and the container never hands out
        // references that outlive it.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        Self::parse(Buffer::Mapped(map))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::parse(Buffer::Owned(bytes))
    }

    fn parse(buffer: Buffer) -> Result<Self> {
        let bytes = buffer.bytes();
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "container is {} bytes, shorter than its length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])
                .map_err(|e| Error::Format(format!("container header is not valid JSON: {e}")))?;

        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value).map_err(|e| {
                    Error::Format(format!("container metadata must map strings: {e}"))
                })?;
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad entry for tensor {name:?}: {e}")))?;
            let dtype = match raw.dtype.as_str() {
                "F32" => DType::F32,
                "F16" => DType::F16,
                other => {
                    return Err(Error::Format(format!(
                        "tensor {name:?} has unsupported dtype {other}"
                    )))
                }
            };
            let entry = TensorEntry {
                dtype,
                shape: raw.shape,
                offsets: raw.data_offsets,
            };
            let (start, end) = entry.offsets;
            if end < start || end - start != entry.numel() * dtype.size() {
                return Err(Error::Validation(format!(
                    "tensor {name:?} spans {} bytes but shape {:?} needs {}",
                    end.saturating_sub(start),
                    entry.shape,
                    entry.numel() * dtype.size()
                )));
            }
            entries.insert(name, entry);
        }

        let payload_len = bytes.len() - header_end;
        let mut spans: Vec<(usize, usize, &str)> = entries
            .iter()
            .map(|(n, e)| (e.offsets.0, e.offsets.1, n.as_str()))
            .collect();
        spans.sort_unstable();
        let mut cursor = 0;
        for &(start, end, name) in &spans {
            if start < cursor {
                return Err(Error::Validation(format!(
                    "tensor {name:?} overlaps the previous entry"
                )));
            }
            if start > cursor {
                return Err(Error::Validation(format!(
                    "gap of {} bytes before tensor {name:?}",
                    start - cursor
                )));
            }
            cursor = end;
        }
        if cursor != payload_len {
            return Err(Error::Validation(format!(
                "payload holds {payload_len} bytes but entries cover {cursor}"
            )));
        }
        Ok(Self {
            entries,
            metadata,
            buffer,
            payload_start: header_end,
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorEntry> {
        &self.entries
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    /// Raw little-endian bytes of an entry.
    pub fn raw(&self, name: &str) -> Option<&[u8]> {
        let e = self.entries.get(name)?;
        let b = self.buffer.bytes();
        Some(&b[self.payload_start + e.offsets.0..self.payload_start + e.offsets.1])
    }

    /// Entry values widened to f32.
    pub fn to_f32(&self, name: &str) -> Result<Vec<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no tensor named {name:?}")))?;
        let raw = self.raw(name).expect("entry exists");
        Ok(match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        })
    }

    /// The model config stored by [`write_container`] for synthetic models.
    pub fn stored_config(&self) -> Result<Option<ModelConfig>> {
        self.metadata
            .get(CONFIG_METADATA_KEY)
            .map(|s| serde_json::from_str(s).map_err(Error::from))
            .transpose()
    }
}

/// A tensor to be written by [`write_container`].
pub struct TensorData<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f32],
}

/// Writes f32 tensors in the container layout. Entries are laid out in name
/// order; the header is space-padded to a multiple of 8 bytes.
pub fn container_bytes(
    tensors: &[TensorData<'_>],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut sorted: Vec<&TensorData<'_>> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), serde_json::to_value(metadata)?);
    }
    let mut offset = 0usize;
    for t in &sorted {
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(Error::Shape(format!(
                "tensor {:?} has {} values for shape {:?}",
                t.name,
                t.values.len(),
                t.shape
            )));
        }
        let len = t.values.len() * 4;
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in &sorted {
        for v in t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_container(
    path: impl AsRef<Path>,
    tensors: &[TensorData<'_>],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = container_bytes(tensors, metadata)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Tensor naming convention of a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMap {
    /// GPT-2 names (`wte.weight`, `h.{i}.attn.c_attn.weight`, ...), with
    /// convolution-style `[in, out]` projection weights and a fused QKV.
    Gpt2,
    /// `tok_embeddings.weight`, `blocks.{i}.attn.q_proj.weight`, ... with
    /// linear-style `[out, in]` projection weights.
    Generic,
}

impl WeightMap {
    pub fn detect(c: &TensorContainer) -> Self {
        if c.contains("wte.weight") || c.contains("transformer.wte.weight") {
            WeightMap::Gpt2
        } else {
            WeightMap::Generic
        }
    }
}

/// Resolves names against a container and checks shapes.
struct Binder<'a> {
    c: &'a TensorContainer,
    prefix: &'static str,
}

impl Binder<'_> {
    fn fetch(&self, slot: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let name = format!("{}{slot}", self.prefix);
        let entry = self.c.entry(&name).ok_or_else(|| Error::Binding {
            slot: name.clone(),
            reason: "no such tensor in the container".into(),
        })?;
        if entry.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        Ok(self.c.to_f32(&name)?.into_iter().map(f64::from).collect())
    }

    fn has(&self, slot: &str) -> bool {
        self.c.contains(&format!("{}{slot}", self.prefix))
    }

    fn matrix(&self, slot: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.fetch(slot, &[rows, cols])?)
    }

    /// Loads a `[out, in]` weight and returns it as `[in, out]`.
    fn linear_t(&self, slot: &str, d_in: usize, d_out: usize) -> Result<Matrix> {
        Ok(self.matrix(slot, d_out, d_in)?.transpose())
    }

    fn norm(&self, gain: &str, bias: Option<&str>, d: usize) -> Result<NormWeights> {
        Ok(NormWeights {
            gain: self.fetch(gain, &[d])?,
            bias: bias.map(|b| self.fetch(b, &[d])).transpose()?,
        })
    }
}

/// Maps every parameter slot required by `cfg` onto container entries.
pub fn bind_weights(c: &TensorContainer, cfg: &ModelConfig, map: WeightMap) -> Result<ModelWeights> {
    cfg.validate()?;
    match map {
        WeightMap::Gpt2 => bind_gpt2(c, cfg),
        WeightMap::Generic => bind_generic(c, cfg),
    }
}

fn bind_gpt2(c: &TensorContainer, cfg: &ModelConfig) -> Result<ModelWeights> {
    if cfg.norm_kind != NormKind::LayerNorm
        || cfg.pos_kind != PosKind::Learned
        || cfg.activation != Activation::Gelu
    {
        return Err(Error::Validation(
            "the gpt2 weight map needs layernorm, learned positions and gelu".into(),
        ));
    }
    let prefix = if c.contains("transformer.wte.weight") {
        "transformer."
    } else {
        ""
    };
    let bd = Binder { c, prefix };
    let d = cfg.d_model;
    let token_embedding = bd.matrix("wte.weight", cfg.vocab_size, d)?;
    let position_embedding = Some(bd.matrix("wpe.weight", cfg.max_seq, d)?);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let p = |s: &str| format!("h.{i}.{s}");
        let qkv = bd.matrix(&p("attn.c_attn.weight"), d, 3 * d)?;
        let qkv_b = bd.fetch(&p("attn.c_attn.bias"), &[3 * d])?;
        let split = |part: usize| -> Result<Linear> {
            let mut w = Matrix::zeros(d, d);
            for r in 0..d {
                w.row_mut(r)
                    .copy_from_slice(&qkv.row(r)[part * d..(part + 1) * d]);
            }
            Ok(Linear {
                w,
                b: Some(qkv_b[part * d..(part + 1) * d].to_vec()),
            })
        };
        blocks.push(BlockWeights {
            ln1: bd.norm(&p("ln_1.weight"), Some(&p("ln_1.bias")), d)?,
            q: split(0)?,
            k: split(1)?,
            v: split(2)?,
            o: Linear {
                w: bd.matrix(&p("attn.c_proj.weight"), d, d)?,
                b: Some(bd.fetch(&p("attn.c_proj.bias"), &[d])?),
            },
            ln2: bd.norm(&p("ln_2.weight"), Some(&p("ln_2.bias")), d)?,
            up: Linear {
                w: bd.matrix(&p("mlp.c_fc.weight"), d, cfg.d_mlp)?,
                b: Some(bd.fetch(&p("mlp.c_fc.bias"), &[cfg.d_mlp])?),
            },
            gate: None,
            down: Linear {
                w: bd.matrix(&p("mlp.c_proj.weight"), cfg.d_mlp, d)?,
                b: Some(bd.fetch(&p("mlp.c_proj.bias"), &[d])?),
            },
        });
    }
    let final_norm = bd.norm("ln_f.weight", Some("ln_f.bias"), d)?;
    let unembedding = if c.contains("lm_head.weight") {
        let root = Binder { c, prefix: "" };
        Some(root.matrix("lm_head.weight", cfg.vocab_size, d)?)
    } else {
        None
    };
    Ok(ModelWeights {
        token_embedding,
        position_embedding,
        blocks,
        final_norm,
        unembedding,
    })
}

fn bind_generic(c: &TensorContainer, cfg: &ModelConfig) -> Result<ModelWeights> {
    let bd = Binder { c, prefix: "" };
    let d = cfg.d_model;
    let ln = cfg.norm_kind == NormKind::LayerNorm;
    let token_embedding = bd.matrix("tok_embeddings.weight", cfg.vocab_size, d)?;
    let position_embedding = match cfg.pos_kind {
        PosKind::Learned => Some(bd.matrix("pos_embeddings.weight", cfg.max_seq, d)?),
        PosKind::Rope => None,
    };
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{i}.{s}");
        let bias = |s: &str| if ln { Some(p(s)) } else { None };
        let proj = |s: &str| -> Result<Linear> {
            Ok(Linear {
                w: bd.linear_t(&p(s), d, d)?,
                b: None,
            })
        };
        let (up, gate, down) = match cfg.activation {
            Activation::Gelu => (
                Linear {
                    w: bd.linear_t(&p("mlp.up_proj.weight"), d, cfg.d_mlp)?,
                    b: Some(bd.fetch(&p("mlp.up_proj.bias"), &[cfg.d_mlp])?),
                },
                None,
                Linear {
                    w: bd.linear_t(&p("mlp.down_proj.weight"), cfg.d_mlp, d)?,
                    b: Some(bd.fetch(&p("mlp.down_proj.bias"), &[d])?),
                },
            ),
            Activation::Silu => (
                Linear {
                    w: bd.linear_t(&p("mlp.up_proj.weight"), d, cfg.d_mlp)?,
                    b: None,
                },
                Some(Linear {
                    w: bd.linear_t(&p("mlp.gate_proj.weight"), d, cfg.d_mlp)?,
                    b: None,
                }),
                Linear {
                    w: bd.linear_t(&p("mlp.down_proj.weight"), cfg.d_mlp, d)?,
                    b: None,
                },
            ),
        };
        blocks.push(BlockWeights {
            ln1: bd.norm(&p("attn_norm.weight"), bias("attn_norm.bias").as_deref(), d)?,
            q: proj("attn.q_proj.weight")?,
            k: proj("attn.k_proj.weight")?,
            v: proj("attn.v_proj.weight")?,
            o: proj("attn.o_proj.weight")?,
            ln2: bd.norm(&p("mlp_norm.weight"), bias("mlp_norm.bias").as_deref(), d)?,
            up,
            gate,
            down,
        });
    }
    let final_norm = bd.norm(
        "final_norm.weight",
        if ln { Some("final_norm.bias") } else { None },
        d,
    )?;
    let unembedding = if bd.has("lm_head.weight") {
        Some(bd.matrix("lm_head.weight", cfg.vocab_size, d)?)
    } else {
        None
    };
    Ok(ModelWeights {
        token_embedding,
        position_embedding,
        blocks,
        final_norm,
        unembedding,
    })
}

/// GPT-2 hyperparameters read from tensor shapes. The head count is not
/// recoverable from shapes, so it comes from `n_heads` or the GPT-2
/// convention of 64-wide heads.
pub fn infer_gpt2_config(c: &TensorContainer, n_heads: Option<usize>) -> Result<ModelConfig> {
    let prefix = if c.contains("transformer.wte.weight") {
        "transformer."
    } else {
        ""
    };
    let shape = |n: &str| -> Result<Vec<usize>> {
        c.entry(&format!("{prefix}{n}"))
            .map(|e| e.shape.clone())
            .ok_or_else(|| Error::Binding {
                slot: format!("{prefix}{n}"),
                reason: "needed to infer the model config".into(),
            })
    };
    let wte = shape("wte.weight")?;
    let wpe = shape("wpe.weight")?;
    let fc = shape("h.0.mlp.c_fc.weight")?;
    let n_blocks = (0..)
        .take_while(|i| c.contains(&format!("{prefix}h.{i}.ln_1.weight")))
        .count();
    let d_model = wte[1];
    let vocab_size = wte[0];
    let cfg = ModelConfig {
        n_blocks,
        d_model,
        n_heads: n_heads.unwrap_or(d_model / 64),
        d_mlp: fc[1],
        vocab_size,
        max_seq: wpe[0],
        norm_kind: NormKind::LayerNorm,
        pos_kind: PosKind::Learned,
        activation: Activation::Gelu,
        rope_theta: 10000.0,
        // <|endoftext|> is the last id of the GPT-2 vocab
        bos_id: (vocab_size == 50257).then_some(50256),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Deserialize)]
struct HfGpt2Config {
    n_head: usize,
}

/// Opens a checkpoint and binds it. The config comes from the container
/// metadata (synthetic models), or is inferred from GPT-2 tensor shapes,
/// taking the head count from a sibling `config.json` when present.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let c = TensorContainer::open(path)?;
    let map = WeightMap::detect(&c);
    let config = match (c.stored_config()?, map) {
        (Some(cfg), _) => cfg,
        (None, WeightMap::Gpt2) => {
            let sidecar = path.with_file_name("config.json");
            let n_heads = match fs::read_to_string(&sidecar) {
                Ok(text) => Some(serde_json::from_str::<HfGpt2Config>(&text)?.n_head),
                Err(_) => None,
            };
            infer_gpt2_config(&c, n_heads)?
        }
        (None, WeightMap::Generic) => {
            return Err(Error::Validation(format!(
                "{} carries no model config metadata and is not a GPT-2 checkpoint",
                path.display()
            )))
        }
    };
    let weights = bind_weights(&c, &config, map)?;
    Ok(Model { config, weights })
}

/// A named tensor: name, shape and row-major values.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

/// Seeded random tensors for every generic slot required by `cfg`.
pub fn synthetic_tensors(cfg: &ModelConfig, seed: u64) -> Result<Vec<NamedTensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let ln = cfg.norm_kind == NormKind::LayerNorm;
    let mut out = Vec::new();
    let mut uniform = |name: String, shape: Vec<usize>, std: f32, center: f32| {
        let n: usize = shape.iter().product();
        let a = std * 3f32.sqrt();
        let values = (0..n).map(|_| center + rng.gen_range(-a..=a)).collect();
        out.push((name, shape, values));
    };
    let wstd = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
    uniform("tok_embeddings.weight".into(), vec![cfg.vocab_size, d], 1.0, 0.0);
    if cfg.pos_kind == PosKind::Learned {
        uniform("pos_embeddings.weight".into(), vec![cfg.max_seq, d], 0.5, 0.0);
    }
    for i in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{i}.{s}");
        for norm in ["attn_norm", "mlp_norm"] {
            uniform(p(&format!("{norm}.weight")), vec![d], 0.1, 1.0);
            if ln {
                uniform(p(&format!("{norm}.bias")), vec![d], 0.1, 0.0);
            }
        }
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            uniform(p(&format!("attn.{proj}.weight")), vec![d, d], wstd(d), 0.0);
        }
        match cfg.activation {
            Activation::Gelu => {
                uniform(p("mlp.up_proj.weight"), vec![cfg.d_mlp, d], wstd(d), 0.0);
                uniform(p("mlp.up_proj.bias"), vec![cfg.d_mlp], 0.1, 0.0);
                uniform(p("mlp.down_proj.weight"), vec![d, cfg.d_mlp], wstd(cfg.d_mlp), 0.0);
                uniform(p("mlp.down_proj.bias"), vec![d], 0.1, 0.0);
            }
            Activation::Silu => {
                uniform(p("mlp.gate_proj.weight"), vec![cfg.d_mlp, d], wstd(d), 0.0);
                uniform(p("mlp.up_proj.weight"), vec![cfg.d_mlp, d], wstd(d), 0.0);
                uniform(p("mlp.down_proj.weight"), vec![d, cfg.d_mlp], wstd(cfg.d_mlp), 0.0);
            }
        }
    }
    uniform("final_norm.weight".into(), vec![d], 0.1, 1.0);
    if ln {
        uniform("final_norm.bias".into(), vec![d], 0.1, 0.0);
    }
    Ok(out)
}

/// Writes a seeded random-weight container (generic naming, tied
/// unembedding) with `cfg` recorded in its metadata.
pub fn write_synthetic(path: impl AsRef<Path>, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let bytes = synthetic_container_bytes(cfg, seed)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn synthetic_container_bytes(cfg: &ModelConfig, seed: u64) -> Result<Vec<u8>> {
    let tensors = synthetic_tensors(cfg, seed)?;
    let data: Vec<TensorData<'_>> = tensors
        .iter()
        .map(|(name, shape, values)| TensorData {
            name: name.clone(),
            shape: shape.clone(),
            values,
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert(CONFIG_METADATA_KEY.to_string(), serde_json::to_string(cfg)?);
    meta.insert("latentscope.seed".to_string(), seed.to_string());
    container_bytes(&data, &meta)
}

/// In-memory synthetic model, bound through the same path as files.
pub fn synthetic_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let c = TensorContainer::from_bytes(synthetic_container_bytes(cfg, seed)?)?;
    let weights = bind_weights(&c, cfg, WeightMap::Generic)?;
    Ok(Model {
        config: cfg.clone(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 4,
            d_mlp: 32,
            vocab_size: 32,
            max_seq: 8,
            norm_kind: NormKind::LayerNorm,
            pos_kind: PosKind::Rope,
            activation: Activation::Gelu,
            rope_theta: 10000.0,
            bos_id: None,
        }
    }

    #[test]
    fn single_tensor_reads_back() {
        let vals = [1.0f32, 2.0, 3.0, 4.0];
        let bytes = container_bytes(
            &[TensorData {
                name: "m".into(),
                shape: vec![2, 2],
                values: &vals,
            }],
            &BTreeMap::new(),
        )
        .unwrap();
        let c = TensorContainer::from_bytes(bytes).unwrap();
        assert_eq!(c.entry("m").unwrap().offsets, (0, 16));
        assert_eq!(c.to_f32("m").unwrap(), vals);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let vals = [1.0f32; 4];
        let mut bytes = container_bytes(
            &[TensorData {
                name: "m".into(),
                shape: vec![2, 2],
                values: &vals,
            }],
            &BTreeMap::new(),
        )
        .unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = TensorContainer::from_bytes(bytes).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn bad_length_prefix_is_format_error() {
        let mut bytes = vec![0u8; 16];
        bytes[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            TensorContainer::from_bytes(bytes),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            TensorContainer::from_bytes(vec![1, 2, 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let header = br#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        let err = TensorContainer::from_bytes(bytes).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn f16_entries_are_widened() {
        let header = br#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&half::f16::from_f32(1.5).to_le_bytes());
        bytes.extend_from_slice(&half::f16::from_f32(-2.0).to_le_bytes());
        let c = TensorContainer::from_bytes(bytes).unwrap();
        assert_eq!(c.to_f32("h").unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn generic_slot_count() {
        let cfg = small_cfg();
        let tensors = synthetic_tensors(&cfg, 1).unwrap();
        // 2 x (4 attn + 4 mlp + 4 norm) + token embedding + final gain/bias
        assert_eq!(tensors.len(), 2 * 12 + 3);
        let m = synthetic_model(&cfg, 1).unwrap();
        assert_eq!(m.weights.blocks.len(), 2);
        assert!(m.weights.unembedding.is_none());
    }

    #[test]
    fn missing_final_norm_gain_names_the_slot() {
        let cfg = small_cfg();
        let tensors: Vec<_> = synthetic_tensors(&cfg, 1)
            .unwrap()
            .into_iter()
            .filter(|(n, _, _)| n != "final_norm.weight")
            .collect();
        let data: Vec<TensorData<'_>> = tensors
            .iter()
            .map(|(n, s, v)| TensorData {
                name: n.clone(),
                shape: s.clone(),
                values: v,
            })
            .collect();
        let c = TensorContainer::from_bytes(container_bytes(&data, &BTreeMap::new()).unwrap())
            .unwrap();
        match bind_weights(&c, &cfg, WeightMap::Generic).unwrap_err() {
            Error::Binding { slot, .. } => assert_eq!(slot, "final_norm.weight"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut cfg = small_cfg();
        let c = TensorContainer::from_bytes(synthetic_container_bytes(&cfg, 3).unwrap()).unwrap();
        cfg.vocab_size = 33;
        let err = bind_weights(&c, &cfg, WeightMap::Generic).unwrap_err().to_string();
        assert!(err.contains("[32, 16]") && err.contains("[33, 16]"), "{err}");
    }

    #[test]
    fn gpt2_names_bind_with_fused_qkv() {
        let cfg = ModelConfig {
            n_blocks: 1,
            d_model: 4,
            n_heads: 1,
            d_mlp: 8,
            vocab_size: 5,
            max_seq: 3,
            norm_kind: NormKind::LayerNorm,
            pos_kind: PosKind::Learned,
            activation: Activation::Gelu,
            rope_theta: 10000.0,
            bos_id: None,
        };
        let d = 4;
        let seq = |n: usize| (0..n).map(|i| i as f32).collect::<Vec<f32>>();
        let specs: Vec<(&str, Vec<usize>)> = vec![
            ("wte.weight", vec![5, d]),
            ("wpe.weight", vec![3, d]),
            ("h.0.ln_1.weight", vec![d]),
            ("h.0.ln_1.bias", vec![d]),
            ("h.0.attn.c_attn.weight", vec![d, 3 * d]),
            ("h.0.attn.c_attn.bias", vec![3 * d]),
            ("h.0.attn.c_proj.weight", vec![d, d]),
            ("h.0.attn.c_proj.bias", vec![d]),
            ("h.0.ln_2.weight", vec![d]),
            ("h.0.ln_2.bias", vec![d]),
            ("h.0.mlp.c_fc.weight", vec![d, 8]),
            ("h.0.mlp.c_fc.bias", vec![8]),
            ("h.0.mlp.c_proj.weight", vec![8, d]),
            ("h.0.mlp.c_proj.bias", vec![d]),
            ("ln_f.weight", vec![d]),
            ("ln_f.bias", vec![d]),
        ];
        let values: Vec<Vec<f32>> = specs.iter().map(|(_, s)| seq(s.iter().product())).collect();
        let data: Vec<TensorData<'_>> = specs
            .iter()
            .zip(&values)
            .map(|((n, s), v)| TensorData {
                name: n.to_string(),
                shape: s.clone(),
                values: v,
            })
            .collect();
        let c = TensorContainer::from_bytes(container_bytes(&data, &BTreeMap::new()).unwrap())
            .unwrap();
        assert_eq!(WeightMap::detect(&c), WeightMap::Gpt2);
        let inferred = infer_gpt2_config(&c, Some(1)).unwrap();
        assert_eq!(inferred, cfg);
        let w = bind_weights(&c, &cfg, WeightMap::Gpt2).unwrap();
        // row 1 of c_attn is 12..24; the K slice is columns 4..8
        assert_eq!(w.blocks[0].k.w.row(1), &[16.0, 17.0, 18.0, 19.0]);
        assert_eq!(w.blocks[0].v.b.as_deref().unwrap(), &[8.0, 9.0, 10.0, 11.0]);
    }
}
