//! Instrumented forward pass of a pre-norm decoder-only transformer.
//!
//! Every block exposes six capture points:
//!
//! | point | component         | phase    |
//! |-------|-------------------|----------|
//! | 1     | `norm_pre_attn`   | pre-add  |
//! | 2     | `attn`            | pre-add  |
//! | 3     | `resid_post_attn` | post-add |
//! | 4     | `norm_pre_mlp`    | pre-add  |
//! | 5     | `mlp`             | pre-add  |
//! | 6     | `resid_post_mlp`  | post-add |
//!
//! plus the embedding output (`EMB`) and the final norm output
//! (`FINAL_NORM`). Enumeration order is `EMB`, then points 1–6 of each
//! block, then `FINAL_NORM`: `6 * n_blocks + 2` captures in total.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_transposed, Matrix};
use crate::tokenizer::TokenId;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Learned,
    Rope,
}

/// `Gelu` is the ungated tanh-approximated MLP; `Silu` is the gated
/// (SwiGLU-style) MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub activation: Activation,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub bos_id: Option<TokenId>,
}

fn default_rope_theta() -> f64 {
    10000.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("model config: {m}")));
        if self.n_blocks == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return fail("n_blocks, d_model, n_heads and d_mlp must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.pos_kind == PosKind::Rope && !self.d_head().is_multiple_of(2) {
            return fail(format!("RoPE needs an even head dim, got {}", self.d_head()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return fail(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        if let Some(b) = self.bos_id {
            if b as usize >= self.vocab_size {
                return fail(format!("bos_id {b} outside vocab of {}", self.vocab_size));
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_captures(&self) -> usize {
        6 * self.n_blocks + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    NormPreAttn,
    Attn,
    ResidPostAttn,
    NormPreMlp,
    Mlp,
    ResidPostMlp,
    FinalNorm,
}

impl Component {
    pub fn from_point(point: u8) -> Option<Self> {
        Some(match point {
            1 => Component::NormPreAttn,
            2 => Component::Attn,
            3 => Component::ResidPostAttn,
            4 => Component::NormPreMlp,
            5 => Component::Mlp,
            6 => Component::ResidPostMlp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::NormPreAttn => "norm_pre_attn",
            Component::Attn => "attn",
            Component::ResidPostAttn => "resid_post_attn",
            Component::NormPreMlp => "norm_pre_mlp",
            Component::Mlp => "mlp",
            Component::ResidPostMlp => "resid_post_mlp",
            Component::FinalNorm => "final_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Component::Embedding,
            Component::NormPreAttn,
            Component::Attn,
            Component::ResidPostAttn,
            Component::NormPreMlp,
            Component::Mlp,
            Component::ResidPostMlp,
            Component::FinalNorm,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddPhase {
    PreAdd,
    PostAdd,
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// Where in the network a capture lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockRef {
    Emb,
    Block(u32),
    FinalNorm,
}

impl Serialize for BlockRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BlockRef::Emb => s.serialize_str("EMB"),
            BlockRef::Block(b) => s.serialize_u32(*b),
            BlockRef::FinalNorm => s.serialize_str("FINAL_NORM"),
        }
    }
}

impl<'de> Deserialize<'de> for BlockRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(b) => Ok(BlockRef::Block(b)),
            Raw::Name(n) if n == "EMB" => Ok(BlockRef::Emb),
            Raw::Name(n) if n == "FINAL_NORM" => Ok(BlockRef::FinalNorm),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown block ref {n:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptureTag {
    pub block: BlockRef,
    /// 1..=6 inside a block, `None` for the sentinels.
    pub point: Option<u8>,
    pub component: Component,
    pub add_phase: AddPhase,
}

impl CaptureTag {
    pub fn embedding() -> Self {
        Self {
            block: BlockRef::Emb,
            point: None,
            component: Component::Embedding,
            add_phase: AddPhase::NotApplicable,
        }
    }

    pub fn final_norm() -> Self {
        Self {
            block: BlockRef::FinalNorm,
            point: None,
            component: Component::FinalNorm,
            add_phase: AddPhase::NotApplicable,
        }
    }

    /// Panics unless `point` is in 1..=6.
    pub fn block_point(block: u32, point: u8) -> Self {
        let component = Component::from_point(point).expect("capture point must be in 1..=6");
        let add_phase = if point == 3 || point == 6 {
            AddPhase::PostAdd
        } else {
            AddPhase::PreAdd
        };
        Self {
            block: BlockRef::Block(block),
            point: Some(point),
            component,
            add_phase,
        }
    }

    pub fn block_index(&self) -> Option<u32> {
        match self.block {
            BlockRef::Block(b) => Some(b),
            _ => None,
        }
    }

    /// Structural check of the point/component/phase relationship.
    pub fn is_consistent(&self) -> bool {
        match (self.block, self.point) {
            (BlockRef::Block(b), Some(p)) => *self == Self::block_point(b, p),
            (BlockRef::Emb, None) => *self == Self::embedding(),
            (BlockRef::FinalNorm, None) => *self == Self::final_norm(),
            _ => false,
        }
    }

    /// All `6 * n_blocks + 2` tags in enumeration order.
    pub fn enumerate(n_blocks: usize) -> Vec<CaptureTag> {
        let mut tags = Vec::with_capacity(6 * n_blocks + 2);
        tags.push(Self::embedding());
        for b in 0..n_blocks as u32 {
            for p in 1..=6 {
                tags.push(Self::block_point(b, p));
            }
        }
        tags.push(Self::final_norm());
        tags
    }
}

impl fmt::Display for CaptureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.block, self.point) {
            (BlockRef::Block(b), Some(p)) => write!(f, "block{b}.p{p}.{}", self.component.name()),
            (BlockRef::Emb, _) => f.write_str("EMB"),
            (BlockRef::FinalNorm, _) => f.write_str("FINAL_NORM"),
            _ => write!(f, "{:?}", self),
        }
    }
}

impl std::str::FromStr for CaptureTag {
    type Err = Error;

    /// Inverse of `Display`: `EMB`, `FINAL_NORM` or `block{b}.p{p}.{name}`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("unrecognised capture tag {s:?}"));
        match s {
            "EMB" => return Ok(Self::embedding()),
            "FINAL_NORM" => return Ok(Self::final_norm()),
            _ => {}
        }
        let rest = s.strip_prefix("block").ok_or_else(bad)?;
        let mut parts = rest.splitn(3, '.');
        let block: u32 = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let point: u8 = parts
            .next()
            .and_then(|p| p.strip_prefix('p'))
            .and_then(|p| p.parse().ok())
            .filter(|p| (1..=6).contains(p))
            .ok_or_else(bad)?;
        let tag = Self::block_point(block, point);
        match parts.next() {
            None => Ok(tag),
            Some(name) if name == tag.component.name() => Ok(tag),
            Some(_) => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSpec {
    /// Selected tags, kept in enumeration order.
    pub tags: Vec<CaptureTag>,
    pub precision: Precision,
}

impl CaptureSpec {
    pub fn all(cfg: &ModelConfig) -> Self {
        Self {
            tags: CaptureTag::enumerate(cfg.n_blocks),
            precision: Precision::F32,
        }
    }

    /// Keeps the tags accepted by `keep`, in enumeration order.
    pub fn filtered(cfg: &ModelConfig, keep: impl Fn(&CaptureTag) -> bool) -> Result<Self> {
        let spec = Self {
            tags: CaptureTag::enumerate(cfg.n_blocks)
                .into_iter()
                .filter(|t| keep(t))
                .collect(),
            precision: Precision::F32,
        };
        spec.validate(cfg)?;
        Ok(spec)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tags.is_empty() {
            return Err(Error::Validation("capture selection is empty".into()));
        }
        for t in &self.tags {
            if !t.is_consistent() {
                return Err(Error::Validation(format!("inconsistent capture tag {t:?}")));
            }
            if let Some(b) = t.block_index() {
                if b as usize >= cfg.n_blocks {
                    return Err(Error::Validation(format!(
                        "capture tag {t} refers to block {b} of a {}-block model",
                        cfg.n_blocks
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NormWeights {
    pub gain: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// `y = x · w + b` with `w` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

impl Linear {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.w)?;
        if let Some(b) = &self.b {
            for r in 0..y.rows() {
                y.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1: NormWeights,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: NormWeights,
    pub up: Linear,
    /// Present for the gated (silu) MLP only.
    pub gate: Option<Linear>,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct ModelWeights {
    /// `[vocab, d_model]`
    pub token_embedding: Matrix,
    /// `[max_seq, d_model]`, learned positions only.
    pub position_embedding: Option<Matrix>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormWeights,
    /// `[vocab, d_model]`; `None` ties the unembedding to `token_embedding`.
    pub unembedding: Option<Matrix>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[seq, vocab]`, absent when logits were not requested.
    pub logits: Option<Matrix>,
    /// One `[seq, d_model]` matrix per selected tag, in spec order.
    pub captures: Vec<(CaptureTag, Matrix)>,
}

impl ForwardOutput {
    pub fn capture(&self, tag: &CaptureTag) -> Option<&Matrix> {
        self.captures.iter().find(|(t, _)| t == tag).map(|(_, m)| m)
    }
}

/// Weights bound to their configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn forward(&self, tokens: &[TokenId], spec: &CaptureSpec) -> Result<ForwardOutput> {
        forward(&self.weights, &self.config, tokens, spec)
    }
}

pub fn forward(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    spec: &CaptureSpec,
) -> Result<ForwardOutput> {
    forward_with(weights, cfg, tokens, spec, true)
}

struct Recorder<'a> {
    spec: &'a CaptureSpec,
    out: Vec<(CaptureTag, Matrix)>,
}

impl Recorder<'_> {
    fn record(&mut self, tag: CaptureTag, m: &Matrix) -> Result<()> {
        if !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation at {tag}")));
        }
        if self.spec.tags.contains(&tag) {
            self.out.push((tag, m.clone()));
        }
        Ok(())
    }
}

/// Full-sequence forward; `want_logits = false` skips the unembedding.
pub fn forward_with(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    spec: &CaptureSpec,
    want_logits: bool,
) -> Result<ForwardOutput> {
    let seq = tokens.len();
    if seq == 0 || seq > cfg.max_seq {
        return Err(Error::Validation(format!(
            "sequence length {seq} outside 1..={}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} outside vocab of {}",
            cfg.vocab_size
        )));
    }
    let d = cfg.d_model;
    let mut rec = Recorder {
        spec,
        out: Vec::with_capacity(spec.tags.len()),
    };

    let mut resid = Matrix::zeros(seq, d);
    for (pos, &tok) in tokens.iter().enumerate() {
        let row = resid.row_mut(pos);
        row.copy_from_slice(weights.token_embedding.row(tok as usize));
        if let Some(pe) = &weights.position_embedding {
            row.iter_mut().zip(pe.row(pos)).for_each(|(v, p)| *v += p);
        }
    }
    rec.record(CaptureTag::embedding(), &resid)?;

    let positions: Vec<usize> = (0..seq).collect();
    for (b, block) in weights.blocks.iter().enumerate() {
        let b = b as u32;
        let x1 = normalize(&resid, cfg.norm_kind, &block.ln1)?;
        rec.record(CaptureTag::block_point(b, 1), &x1)?;
        let a = attention(&x1, block, cfg, &positions)?;
        rec.record(CaptureTag::block_point(b, 2), &a)?;
        add_in_place(&mut resid, &a);
        rec.record(CaptureTag::block_point(b, 3), &resid)?;
        let x4 = normalize(&resid, cfg.norm_kind, &block.ln2)?;
        rec.record(CaptureTag::block_point(b, 4), &x4)?;
        let m = mlp(&x4, block, cfg.activation)?;
        rec.record(CaptureTag::block_point(b, 5), &m)?;
        add_in_place(&mut resid, &m);
        rec.record(CaptureTag::block_point(b, 6), &resid)?;
    }
    let fin = normalize(&resid, cfg.norm_kind, &weights.final_norm)?;
    rec.record(CaptureTag::final_norm(), &fin)?;

    let logits = if want_logits {
        let unembed = weights
            .unembedding
            .as_ref()
            .unwrap_or(&weights.token_embedding);
        let logits = matmul_transposed(&fin, unembed)?;
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Some(logits)
    } else {
        None
    };
    Ok(ForwardOutput {
        logits,
        captures: rec.out,
    })
}

fn add_in_place(acc: &mut Matrix, x: &Matrix) {
    acc.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(a, b)| *a += b);
}

pub fn normalize(x: &Matrix, kind: NormKind, w: &NormWeights) -> Result<Matrix> {
    let d = x.cols();
    if w.gain.len() != d || w.bias.as_ref().is_some_and(|b| b.len() != d) {
        return Err(Error::Shape(format!(
            "norm parameters do not match width {d}"
        )));
    }
    let mut out = x.clone();
    let n = d as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        match kind {
            NormKind::LayerNorm => {
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * w.gain[i] + w.bias.as_ref().map_or(0.0, |b| b[i]);
                }
            }
            NormKind::RmsNorm => {
                let ms = dot(row, row) / n;
                let inv = 1.0 / (ms + NORM_EPS).sqrt();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = *v * inv * w.gain[i] + w.bias.as_ref().map_or(0.0, |b| b[i]);
                }
            }
        }
    }
    Ok(out)
}

/// Rotates consecutive pairs `(2i, 2i+1)` of one head vector by
/// `pos * theta^(-2i / d_head)`.
pub fn apply_rope(head: &mut [f64], pos: usize, theta: f64) {
    let d_head = head.len();
    for i in 0..d_head / 2 {
        let freq = theta.powf(-((2 * i) as f64) / d_head as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let (x0, x1) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// Causal multi-head self-attention; returns the pre-add contribution.
pub fn attention(
    x: &Matrix,
    block: &BlockWeights,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Result<Matrix> {
    let seq = x.rows();
    if positions.len() != seq {
        return Err(Error::Shape(format!(
            "{} positions for {seq} rows",
            positions.len()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    let mut q = block.q.apply(x)?;
    let mut k = block.k.apply(x)?;
    let v = block.v.apply(x)?;
    let dh = cfg.d_head();
    if cfg.pos_kind == PosKind::Rope {
        for (r, &pos) in positions.iter().enumerate() {
            for h in 0..cfg.n_heads {
                apply_rope(&mut q.row_mut(r)[h * dh..(h + 1) * dh], pos, cfg.rope_theta);
                apply_rope(&mut k.row_mut(r)[h * dh..(h + 1) * dh], pos, cfg.rope_theta);
            }
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Matrix::zeros(seq, cfg.d_model);
    let mut scores = vec![0.0; seq];
    for h in 0..cfg.n_heads {
        let span = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let qi = &q.row(i)[span.clone()];
            // keys after i are masked out entirely, which matches an additive
            // mask whose exp underflows to zero
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores[..=i].iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[span.clone()]) * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scores[..=i].iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut mixed.row_mut(i)[span.clone()];
            for (j, s) in scores[..=i].iter().enumerate() {
                let wgt = s / total;
                out.iter_mut()
                    .zip(&v.row(j)[span.clone()])
                    .for_each(|(o, vj)| *o += wgt * vj);
            }
        }
    }
    let out = block.o.apply(&mixed)?;
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok(out)
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn mlp(x: &Matrix, block: &BlockWeights, activation: Activation) -> Result<Matrix> {
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite MLP input".into()));
    }
    let mut hidden = block.up.apply(x)?;
    match (activation, &block.gate) {
        (Activation::Gelu, _) => hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v)),
        (Activation::Silu, Some(gate)) => {
            let g = gate.apply(x)?;
            hidden
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(h, gv)| *h *= silu(*gv));
        }
        (Activation::Silu, None) => {
            return Err(Error::Validation("silu MLP needs a gate projection".into()))
        }
    }
    let out = block.down.apply(&hidden)?;
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite MLP output".into()));
    }
    Ok(out)
}
