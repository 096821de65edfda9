//! Latent datasets on disk (LATDS) and the selection / augmentation steps
//! applied before any analysis.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "LATDS" | u32 version | u64 header_len | header JSON | payload | u64 CRC-64/XZ(payload)
//! ```
//!
//! The payload is a dense `[n_samples, seq_len, n_captures, dim]` tensor in
//! f32 or f16.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{AddPhase, CaptureTag, Component, ModelConfig, Precision};
use crate::pipeline::RunConfig;

pub const MAGIC: &[u8; 5] = b"LATDS";
pub const FORMAT_VERSION: u32 = 1;
pub static CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// Norms below this are treated as zero vectors by [`unit_normalize`].
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub from_dim: usize,
    pub to_dim: usize,
    /// Reducer file holding the fitted basis, relative to the dataset.
    pub reducer_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub run: RunConfig,
    pub seed: u64,
    /// Capture axis, in enumeration order.
    pub captures: Vec<CaptureTag>,
    pub n_samples: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub precision: Precision,
    pub compressed: bool,
    pub compression: Option<Compression>,
    pub skipped: Vec<SkippedSample>,
    /// Original sample index of each stored row.
    pub sample_ids: Vec<usize>,
    /// Token ids of each stored row.
    pub tokens: Vec<Vec<u32>>,
    /// Pad mask: positions `>= valid_lengths[i]` of row `i` are padding.
    pub valid_lengths: Vec<usize>,
}

impl DatasetHeader {
    pub fn n_captures(&self) -> usize {
        self.captures.len()
    }

    pub fn numel(&self) -> usize {
        self.n_samples * self.seq_len * self.n_captures() * self.dim
    }

    pub fn payload_bytes(&self) -> usize {
        self.numel()
            * match self.precision {
                Precision::F32 => 4,
                Precision::F16 => 2,
            }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("dataset header: {m}")));
        if self.captures.is_empty() {
            return fail("empty capture enumeration".into());
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.captures {
            if !seen.insert(*t) {
                return fail(format!("capture {t} listed twice"));
            }
        }
        if self.sample_ids.len() != self.n_samples
            || self.tokens.len() != self.n_samples
            || self.valid_lengths.len() != self.n_samples
        {
            return fail(format!(
                "per-sample metadata does not cover {} samples",
                self.n_samples
            ));
        }
        if self.valid_lengths.iter().any(|&v| v > self.seq_len) {
            return fail("valid length beyond seq_len".into());
        }
        if self.compressed != self.compression.is_some() {
            return fail("compressed flag disagrees with compression record".into());
        }
        Ok(())
    }
}

enum Payload {
    Owned(Vec<u8>),
    Mapped { map: Mmap, start: usize, len: usize },
}

impl Payload {
    fn bytes(&self) -> &[u8] {
        match self {
            Payload::Owned(v) => v,
            Payload::Mapped { map, start, len } => &map[*start..*start + *len],
        }
    }
}

pub struct LatentDataset {
    header: DatasetHeader,
    payload: Payload,
}

impl std::fmt::Debug for LatentDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentDataset")
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}

impl LatentDataset {
    /// Encodes `values` (`[n, s, c, dim]`, row-major) at the header's
    /// precision.
    pub fn from_values(header: DatasetHeader, values: &[f32]) -> Result<Self> {
        header.validate()?;
        if values.len() != header.numel() {
            return Err(Error::Shape(format!(
                "{} latent values for a [{}, {}, {}, {}] dataset",
                values.len(),
                header.n_samples,
                header.seq_len,
                header.n_captures(),
                header.dim
            )));
        }
        let bytes = match header.precision {
            Precision::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Precision::F16 => values
                .iter()
                .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                .collect(),
        };
        Ok(Self {
            header,
            payload: Payload::Owned(bytes),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn payload_bytes(&self) -> &[u8] {
        self.payload.bytes()
    }

    pub fn shape(&self) -> [usize; 4] {
        let h = &self.header;
        [h.n_samples, h.seq_len, h.n_captures(), h.dim]
    }

    /// Copies the latent vector at `(sample, pos, capture)` into `out`,
    /// widening to f64.
    pub fn read_vector(&self, sample: usize, pos: usize, capture: usize, out: &mut [f64]) {
        let [_, s, c, d] = self.shape();
        let start = ((sample * s + pos) * c + capture) * d;
        let bytes = self.payload.bytes();
        match self.header.precision {
            Precision::F32 => {
                for (o, chunk) in out
                    .iter_mut()
                    .zip(bytes[start * 4..(start + d) * 4].chunks_exact(4))
                {
                    *o = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
                }
            }
            Precision::F16 => {
                for (o, chunk) in out
                    .iter_mut()
                    .zip(bytes[start * 2..(start + d) * 2].chunks_exact(2))
                {
                    *o = f64::from(
                        half::f16::from_le_bytes(chunk.try_into().expect("2 bytes")).to_f32(),
                    );
                }
            }
        }
    }

    pub fn vector(&self, sample: usize, pos: usize, capture: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.header.dim];
        self.read_vector(sample, pos, capture, &mut v);
        v
    }

    pub fn checksum(&self) -> u64 {
        CRC64.checksum(self.payload.bytes())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload = self.payload.bytes();
        let mut out = Vec::with_capacity(5 + 4 + 8 + header.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out.extend_from_slice(&self.checksum().to_le_bytes());
        Ok(out)
    }

    /// Writes through a sibling temp file; on failure nothing is left behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = partial_path(path);
        let result = (|| -> Result<()> {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let header = serde_json::to_vec(&self.header)?;
            let payload = self.payload.bytes();
            let mut w = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(&tmp, e));
            w(MAGIC)?;
            w(&FORMAT_VERSION.to_le_bytes())?;
            w(&(header.len() as u64).to_le_bytes())?;
            w(&header)?;
            w(payload)?;
            w(&self.checksum().to_le_bytes())?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    /// Memory-maps the file; vectors are decoded lazily on access.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: read-only mapping owned by the dataset.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let (header, start, len) = parse_layout(&map)?;
        let ds = Self {
            header,
            payload: Payload::Mapped { map, start, len },
        };
        Ok(ds)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (header, start, len) = parse_layout(&bytes)?;
        Ok(Self {
            header,
            payload: Payload::Owned(bytes[start..start + len].to_vec()),
        })
    }

    /// The whole dataset as a view.
    pub fn view(&self) -> LatentView {
        select(self, &Selection::default()).expect("the full selection is never empty")
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn parse_layout(bytes: &[u8]) -> Result<(DatasetHeader, usize, usize)> {
    let fixed = MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + 8 || &bytes[..5] != MAGIC {
        return Err(Error::Format("not a LATDS file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "LATDS version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(fixed))
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file")))?;
    let header: DatasetHeader = serde_json::from_slice(&bytes[fixed..header_end])
        .map_err(|e| Error::Format(format!("dataset header is not valid: {e}")))?;
    if header.format_version != version {
        return Err(Error::Format(format!(
            "header version {} disagrees with file version {version}",
            header.format_version
        )));
    }
    header.validate()?;
    let payload_len = bytes.len() - header_end - 8;
    if payload_len != header.payload_bytes() {
        return Err(Error::Corruption(format!(
            "payload is {payload_len} bytes, header implies {}",
            header.payload_bytes()
        )));
    }
    let payload = &bytes[header_end..header_end + payload_len];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let actual = CRC64.checksum(payload);
    if stored != actual {
        return Err(Error::Corruption(format!(
            "payload checksum {actual:016x} does not match stored {stored:016x}"
        )));
    }
    Ok((header, header_end, payload_len))
}

/// Streams a payload to a side file so a dataset never has to fit in
/// memory, then assembles the final file once the header is known. Temp
/// files are removed if the writer is dropped before [`finish`].
///
/// [`finish`]: DatasetWriter::finish
pub struct DatasetWriter {
    out: PathBuf,
    payload_path: PathBuf,
    file: Option<std::io::BufWriter<fs::File>>,
    digest: crc::Digest<'static, u64>,
    precision: Precision,
    written: usize,
}

impl DatasetWriter {
    pub fn create(out: impl AsRef<Path>, precision: Precision) -> Result<Self> {
        let out = out.as_ref().to_path_buf();
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".payload.partial");
        let payload_path = out.with_file_name(name);
        let file = fs::File::create(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        Ok(Self {
            out,
            payload_path,
            file: Some(std::io::BufWriter::new(file)),
            digest: CRC64.digest(),
            precision,
            written: 0,
        })
    }

    pub fn write_values(&mut self, values: &[f32]) -> Result<()> {
        let bytes: Vec<u8> = match self.precision {
            Precision::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Precision::F16 => values
                .iter()
                .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                .collect(),
        };
        self.digest.update(&bytes);
        self.file
            .as_mut()
            .expect("writer is open until finish")
            .write_all(&bytes)
            .map_err(|e| Error::io(&self.payload_path, e))?;
        self.written += values.len();
        Ok(())
    }

    pub fn values_written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self, header: &DatasetHeader) -> Result<()> {
        header.validate()?;
        if header.precision != self.precision || header.numel() != self.written {
            return Err(Error::Shape(format!(
                "wrote {} values but the header describes {}",
                self.written,
                header.numel()
            )));
        }
        let file = self.file.take().expect("writer is open until finish");
        file.into_inner()
            .map_err(|e| Error::io(&self.payload_path, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&self.payload_path, e))?;
        let checksum = std::mem::replace(&mut self.digest, CRC64.digest()).finalize();
        let tmp = partial_path(&self.out);
        let result = (|| -> Result<()> {
            let header_json = serde_json::to_vec(header)?;
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
            let io = |e| Error::io(&tmp, e);
            f.write_all(MAGIC).map_err(io)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
            f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
            f.write_all(&header_json).map_err(io)?;
            let mut payload =
                fs::File::open(&self.payload_path).map_err(|e| Error::io(&self.payload_path, e))?;
            std::io::copy(&mut payload, &mut f).map_err(io)?;
            f.write_all(&checksum.to_le_bytes()).map_err(io)?;
            f.into_inner()
                .map_err(|e| Error::io(&tmp, e.into_error()))?
                .sync_all()
                .map_err(io)?;
            fs::rename(&tmp, &self.out).map_err(|e| Error::io(&self.out, e))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }
}

impl Drop for DatasetWriter {
    fn drop(&mut self) {
        self.file = None;
        let _ = fs::remove_file(&self.payload_path);
    }
}

/// Which captures to keep. Unset fields do not filter. A block range drops
/// the `EMB` and `FINAL_NORM` sentinels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureFilter {
    /// Inclusive block range.
    pub blocks: Option<(u32, u32)>,
    pub points: Option<Vec<u8>>,
    pub components: Option<Vec<Component>>,
    pub add_phase: Option<AddPhase>,
}

impl CaptureFilter {
    pub fn accepts(&self, t: &CaptureTag) -> bool {
        if let Some((lo, hi)) = self.blocks {
            match t.block_index() {
                Some(b) if (lo..=hi).contains(&b) => {}
                _ => return false,
            }
        }
        if let Some(points) = &self.points {
            if !t.point.is_some_and(|p| points.contains(&p)) {
                return false;
            }
        }
        if let Some(cs) = &self.components {
            if !cs.contains(&t.component) {
                return false;
            }
        }
        if let Some(phase) = self.add_phase {
            if t.add_phase != phase {
                return false;
            }
        }
        true
    }

    pub fn block_range(lo: u32, hi: u32) -> Self {
        Self {
            blocks: Some((lo, hi)),
            ..Self::default()
        }
    }
}

/// The "intermediate blocks" of a model: blocks 2–8 of a 12-block model and
/// 6–27 of a 32-block model. Other depths need an explicit range.
pub fn intermediate_blocks(n_blocks: usize) -> Result<(u32, u32)> {
    match n_blocks {
        12 => Ok((2, 8)),
        32 => Ok((6, 27)),
        n => Err(Error::Validation(format!(
            "no intermediate-block preset for a {n}-block model; pass an explicit block range"
        ))),
    }
}

/// Named presets: `gpt2-12` and `llama-32`.
pub fn intermediate_preset(name: &str) -> Result<(u32, u32)> {
    match name {
        "gpt2-12" => intermediate_blocks(12),
        "llama-32" => intermediate_blocks(32),
        other => Err(Error::Validation(format!(
            "unknown intermediate preset {other:?} (known: gpt2-12, llama-32)"
        ))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceFilter {
    /// Half-open position range.
    pub range: Option<(usize, usize)>,
    pub exclude_position_0: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum SampleFilter {
    #[default]
    All,
    /// A seeded subset of `n` samples, kept in ascending order.
    Count { n: usize, seed: u64 },
    Indices(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub captures: CaptureFilter,
    pub sequence: SequenceFilter,
    pub samples: SampleFilter,
}

/// Label along a sample or position axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisLabel {
    Index(usize),
    Collapsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaptureLabel {
    Tag(CaptureTag),
    Collapsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Sample,
    Sequence,
    Capture,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" | "samples" => Ok(Axis::Sample),
            "sequence" | "seq" | "position" => Ok(Axis::Sequence),
            "capture" | "layer" | "layers" => Ok(Axis::Capture),
            other => Err(Error::Validation(format!("unknown axis {other:?}"))),
        }
    }
}

/// A dense `[n, s, c, dim]` block of latents with aligned labels. Sample
/// labels index dataset rows; the validity mask marks non-padding entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentView {
    pub samples: Vec<AxisLabel>,
    pub positions: Vec<AxisLabel>,
    pub captures: Vec<CaptureLabel>,
    pub dim: usize,
    pub data: Vec<f64>,
    /// `[n, s]`, true where the entry is real data.
    pub valid: Vec<bool>,
}

/// Where each row of a flattened view came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowLabel {
    pub sample: AxisLabel,
    pub position: AxisLabel,
    pub capture: CaptureLabel,
}

impl LatentView {
    pub fn shape(&self) -> [usize; 4] {
        [
            self.samples.len(),
            self.positions.len(),
            self.captures.len(),
            self.dim,
        ]
    }

    #[inline]
    fn offset(&self, n: usize, s: usize, c: usize) -> usize {
        let [_, ns, nc, d] = self.shape();
        ((n * ns + s) * nc + c) * d
    }

    pub fn vector(&self, n: usize, s: usize, c: usize) -> &[f64] {
        let o = self.offset(n, s, c);
        &self.data[o..o + self.dim]
    }

    pub fn is_valid(&self, n: usize, s: usize) -> bool {
        self.valid[n * self.positions.len() + s]
    }

    /// Flattens to one row per latent vector, skipping padding entries.
    pub fn to_rows(&self) -> (Matrix, Vec<RowLabel>) {
        let [n, s, c, d] = self.shape();
        let mut data = Vec::with_capacity(self.data.len());
        let mut labels = Vec::with_capacity(n * s * c);
        for i in 0..n {
            for j in 0..s {
                if !self.is_valid(i, j) {
                    continue;
                }
                for k in 0..c {
                    data.extend_from_slice(self.vector(i, j, k));
                    labels.push(RowLabel {
                        sample: self.samples[i],
                        position: self.positions[j],
                        capture: self.captures[k],
                    });
                }
            }
        }
        let rows = labels.len();
        (
            Matrix::new(rows, d, data).expect("row buffer matches labels"),
            labels,
        )
    }

    pub fn select(&self, sel: &Selection) -> Result<LatentView> {
        select(self, sel)
    }
}

/// Read access shared by datasets and views so one selection routine
/// serves both.
pub trait LatentSource {
    fn sample_labels(&self) -> Vec<AxisLabel>;
    fn position_labels(&self) -> Vec<AxisLabel>;
    fn capture_labels(&self) -> Vec<CaptureLabel>;
    fn dim(&self) -> usize;
    fn read(&self, n: usize, s: usize, c: usize, out: &mut [f64]);
    fn valid(&self, n: usize, s: usize) -> bool;
}

impl LatentSource for LatentDataset {
    fn sample_labels(&self) -> Vec<AxisLabel> {
        (0..self.header.n_samples).map(AxisLabel::Index).collect()
    }
    fn position_labels(&self) -> Vec<AxisLabel> {
        (0..self.header.seq_len).map(AxisLabel::Index).collect()
    }
    fn capture_labels(&self) -> Vec<CaptureLabel> {
        self.header.captures.iter().map(|&t| CaptureLabel::Tag(t)).collect()
    }
    fn dim(&self) -> usize {
        self.header.dim
    }
    fn read(&self, n: usize, s: usize, c: usize, out: &mut [f64]) {
        self.read_vector(n, s, c, out)
    }
    fn valid(&self, n: usize, s: usize) -> bool {
        s < self.header.valid_lengths[n]
    }
}

impl LatentSource for LatentView {
    fn sample_labels(&self) -> Vec<AxisLabel> {
        self.samples.clone()
    }
    fn position_labels(&self) -> Vec<AxisLabel> {
        self.positions.clone()
    }
    fn capture_labels(&self) -> Vec<CaptureLabel> {
        self.captures.clone()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn read(&self, n: usize, s: usize, c: usize, out: &mut [f64]) {
        out.copy_from_slice(self.vector(n, s, c))
    }
    fn valid(&self, n: usize, s: usize) -> bool {
        self.is_valid(n, s)
    }
}

/// Source indices picked out by a selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub samples: Vec<usize>,
    pub positions: Vec<usize>,
    pub captures: Vec<usize>,
}

/// Resolves `sel` against the labels of `src`; an empty result is an error
/// naming the filter.
pub fn resolve<S: LatentSource + ?Sized>(src: &S, sel: &Selection) -> Result<Resolved> {
    let samples = src.sample_labels();
    let positions = src.position_labels();
    let captures = src.capture_labels();

    let sample_idx: Vec<usize> = match &sel.samples {
        SampleFilter::All => (0..samples.len()).collect(),
        SampleFilter::Count { n, seed } => {
            let n = (*n).min(samples.len());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut idx = sample_indices(&mut rng, samples.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        SampleFilter::Indices(wanted) => {
            let mut idx = Vec::with_capacity(wanted.len());
            for &w in wanted {
                let at = samples
                    .iter()
                    .position(|l| *l == AxisLabel::Index(w))
                    .ok_or_else(|| {
                        Error::Validation(format!("sample {w} is not part of the source"))
                    })?;
                idx.push(at);
            }
            idx
        }
    };
    let pos_idx: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, l)| match l {
            AxisLabel::Index(p) => {
                !(sel.sequence.exclude_position_0 && *p == 0)
                    && sel
                        .sequence
                        .range
                        .is_none_or(|(lo, hi)| (lo..hi).contains(p))
            }
            AxisLabel::Collapsed => sel.sequence.range.is_none(),
        })
        .map(|(i, _)| i)
        .collect();
    let cap_idx: Vec<usize> = captures
        .iter()
        .enumerate()
        .filter(|(_, l)| match l {
            CaptureLabel::Tag(t) => sel.captures.accepts(t),
            CaptureLabel::Collapsed => sel.captures == CaptureFilter::default(),
        })
        .map(|(i, _)| i)
        .collect();
    if sample_idx.is_empty() || pos_idx.is_empty() || cap_idx.is_empty() {
        return Err(Error::Validation(format!(
            "selection resolves to nothing ({} samples, {} positions, {} captures): {sel:?}",
            sample_idx.len(),
            pos_idx.len(),
            cap_idx.len()
        )));
    }
    Ok(Resolved {
        samples: sample_idx,
        positions: pos_idx,
        captures: cap_idx,
    })
}

/// Resolves `sel` against `src` and materialises the selected block.
pub fn select<S: LatentSource + ?Sized>(src: &S, sel: &Selection) -> Result<LatentView> {
    let Resolved {
        samples: sample_idx,
        positions: pos_idx,
        captures: cap_idx,
    } = resolve(src, sel)?;
    let samples = src.sample_labels();
    let positions = src.position_labels();
    let captures = src.capture_labels();
    let dim = src.dim();
    let mut data = vec![0.0; sample_idx.len() * pos_idx.len() * cap_idx.len() * dim];
    let mut valid = Vec::with_capacity(sample_idx.len() * pos_idx.len());
    let mut chunks = data.chunks_exact_mut(dim.max(1));
    for &n in &sample_idx {
        for &s in &pos_idx {
            valid.push(src.valid(n, s));
            for &c in &cap_idx {
                let out = chunks.next().expect("buffer sized for selection");
                src.read(n, s, c, out);
            }
        }
    }
    Ok(LatentView {
        samples: sample_idx.iter().map(|&i| samples[i]).collect(),
        positions: pos_idx.iter().map(|&i| positions[i]).collect(),
        captures: cap_idx.iter().map(|&i| captures[i]).collect(),
        dim,
        data,
        valid,
    })
}

/// Scales every vector to unit L2 norm. Vectors with norm below
/// [`DEGENERATE_NORM`] become zero and are counted.
pub fn unit_normalize(view: &LatentView) -> (LatentView, usize) {
    let mut out = view.clone();
    let mut degenerate = 0;
    for v in out.data.chunks_exact_mut(view.dim.max(1)) {
        let n = crate::linalg::norm(v);
        if n < DEGENERATE_NORM {
            v.iter_mut().for_each(|x| *x = 0.0);
            degenerate += 1;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    (out, degenerate)
}

/// Arithmetic mean over `axes`; padding entries are left out of the
/// denominators. Collapsed axes keep a single `Collapsed` label.
pub fn mean_over(view: &LatentView, axes: &[Axis]) -> Result<LatentView> {
    if axes.is_empty() {
        return Err(Error::Validation("mean_over needs at least one axis".into()));
    }
    let [n, s, c, d] = view.shape();
    let over_n = axes.contains(&Axis::Sample);
    let over_s = axes.contains(&Axis::Sequence);
    let over_c = axes.contains(&Axis::Capture);
    let (on, os, oc) = (
        if over_n { 1 } else { n },
        if over_s { 1 } else { s },
        if over_c { 1 } else { c },
    );
    let mut sums = vec![0.0; on * os * oc * d];
    let mut counts = vec![0usize; on * os * oc];
    for i in 0..n {
        for j in 0..s {
            if !view.is_valid(i, j) {
                continue;
            }
            for k in 0..c {
                let (ti, tj, tk) = (
                    if over_n { 0 } else { i },
                    if over_s { 0 } else { j },
                    if over_c { 0 } else { k },
                );
                let cell = (ti * os + tj) * oc + tk;
                counts[cell] += 1;
                sums[cell * d..(cell + 1) * d]
                    .iter_mut()
                    .zip(view.vector(i, j, k))
                    .for_each(|(acc, v)| *acc += v);
            }
        }
    }
    let mut valid = vec![false; on * os];
    for (cell, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            sums[cell * d..(cell + 1) * d]
                .iter_mut()
                .for_each(|v| *v *= inv);
            valid[cell / oc] = true;
        }
    }
    Ok(LatentView {
        samples: if over_n {
            vec![AxisLabel::Collapsed]
        } else {
            view.samples.clone()
        },
        positions: if over_s {
            vec![AxisLabel::Collapsed]
        } else {
            view.positions.clone()
        },
        captures: if over_c {
            vec![CaptureLabel::Collapsed]
        } else {
            view.captures.clone()
        },
        dim: d,
        data: sums,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn view_from(n: usize, s: usize, c: usize, d: usize, data: Vec<f64>) -> LatentView {
        LatentView {
            samples: (0..n).map(AxisLabel::Index).collect(),
            positions: (0..s).map(AxisLabel::Index).collect(),
            captures: CaptureTag::enumerate(c.saturating_sub(2).div_ceil(6))
                .into_iter()
                .take(c)
                .map(CaptureLabel::Tag)
                .collect(),
            dim: d,
            data,
            valid: vec![true; n * s],
        }
    }

    #[test]
    fn unit_normalize_cases() {
        let v = view_from(1, 1, 3, 3, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0]);
        let (u, degenerate) = unit_normalize(&v);
        assert_eq!(degenerate, 1);
        assert!((u.data[0] - 0.6).abs() < 1e-15 && (u.data[1] - 0.8).abs() < 1e-15);
        assert_eq!(&u.data[3..6], &[0.0, 0.0, 0.0]);
        assert!((u.data[6] - 0.6).abs() < 1e-12 && (u.data[7] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mean_cases() {
        let v = view_from(2, 2, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let over_samples = mean_over(&v, &[Axis::Sample]).unwrap();
        assert_eq!(over_samples.data, vec![2.0, 3.0]);
        let over_seq = mean_over(&v, &[Axis::Sequence]).unwrap();
        assert_eq!(over_seq.data, vec![1.5, 3.5]);
        let all = mean_over(&v, &[Axis::Sample, Axis::Sequence]).unwrap();
        assert_eq!(all.data, vec![2.5]);
        // size-1 axis is the identity
        let same = mean_over(&v, &[Axis::Capture]).unwrap();
        assert_eq!(same.data, v.data);
        let sym = view_from(2, 1, 1, 2, vec![1.5, -2.0, -1.5, 2.0]);
        assert_eq!(mean_over(&sym, &[Axis::Sample]).unwrap().data, vec![0.0, 0.0]);
        assert!(mean_over(&v, &[]).is_err());
    }

    #[test]
    fn mean_skips_padding() {
        let mut v = view_from(1, 3, 1, 1, vec![1.0, 2.0, 100.0]);
        v.valid[2] = false;
        assert_eq!(mean_over(&v, &[Axis::Sequence]).unwrap().data, vec![1.5]);
    }

    #[test]
    fn presets() {
        assert_eq!(intermediate_preset("gpt2-12").unwrap(), (2, 8));
        assert_eq!(intermediate_blocks(32).unwrap(), (6, 27));
        assert!(intermediate_blocks(24).is_err());
    }
}
