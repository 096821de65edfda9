//! Input generation, instrumented forwards and dataset writing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{CaptureSpec, Model, ModelConfig, Precision};
use crate::reduce::{pca_fit, pca_transform, reducer_save, PcaModel, Reducer};
use crate::store::{Compression, DatasetHeader, DatasetWriter, SkippedSample, FORMAT_VERSION};
use crate::tokenizer::{TokenId, Tokenizer};

/// Upper bound on the number of latent vectors used to fit the
/// compression basis.
pub const COMPRESSION_FIT_MAX: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Text,
    Singular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub corpus_path: Option<PathBuf>,
    pub n_samples: usize,
    /// Tokens per row including BOS; singular mode always uses 1 probe
    /// token.
    pub seq_len: usize,
    pub prepend_bos: bool,
    pub capture: CaptureSpec,
    pub compress_to: Option<usize>,
    pub seed: u64,
    /// Singular mode: draw a seeded subset of the vocabulary instead of the
    /// first `n_samples` ids.
    #[serde(default)]
    pub singular_subsample: bool,
}

impl RunConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        match self.mode {
            Mode::Text => {
                if self.corpus_path.is_none() {
                    return fail("text mode needs a corpus path".into());
                }
                if self.seq_len == 0 || self.seq_len > model.max_seq {
                    return fail(format!(
                        "seq_len {} outside 1..={}",
                        self.seq_len, model.max_seq
                    ));
                }
                if self.prepend_bos && self.seq_len < 2 {
                    return fail("seq_len must leave room for text after BOS".into());
                }
            }
            Mode::Singular => {
                if self.seq_len != 1 {
                    return fail(format!(
                        "singular mode feeds one token per row, got seq_len {}",
                        self.seq_len
                    ));
                }
                if self.n_samples > model.vocab_size {
                    return fail(format!(
                        "singular mode asks for {} samples from a vocabulary of {}",
                        self.n_samples, model.vocab_size
                    ));
                }
                if self.prepend_bos && model.max_seq < 2 {
                    return fail("model context too short for BOS + token".into());
                }
            }
        }
        if self.prepend_bos && model.bos_id.is_none() {
            return fail("prepend_bos set but the model config names no BOS token".into());
        }
        if let Some(k) = self.compress_to {
            if k == 0 || k >= model.d_model {
                return fail(format!(
                    "compress_to {k} must be in 1..{} (below d_model)",
                    model.d_model
                ));
            }
        }
        self.capture.validate(model)
    }

    /// Sequence length of the stored rows.
    pub fn stored_seq_len(&self) -> usize {
        match self.mode {
            Mode::Text => self.seq_len,
            Mode::Singular => 1 + usize::from(self.prepend_bos),
        }
    }
}

/// Token rows of equal length, with the count of real (non-padding)
/// tokens per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<Vec<TokenId>>,
    pub valid_lengths: Vec<usize>,
}

/// Seeded windows of a tokenised corpus. When the corpus is long enough the
/// windows are disjoint; otherwise they may overlap, and a corpus shorter
/// than one window is used whole and padded with `pad_id`.
#[allow(clippy::too_many_arguments)]
pub fn sample_text_inputs(
    corpus_path: &Path,
    n_samples: usize,
    seq_len: usize,
    tokenizer: &Tokenizer,
    prepend_bos: Option<TokenId>,
    pad_id: TokenId,
    seed: u64,
) -> Result<TokenBatch> {
    let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let ids = tokenizer.encode(&text);
    windows_from_tokens(&ids, n_samples, seq_len, prepend_bos, pad_id, seed)
}

pub fn windows_from_tokens(
    ids: &[TokenId],
    n_samples: usize,
    seq_len: usize,
    prepend_bos: Option<TokenId>,
    pad_id: TokenId,
    seed: u64,
) -> Result<TokenBatch> {
    if ids.is_empty() {
        return Err(Error::Validation("corpus produced no tokens".into()));
    }
    let body = seq_len - usize::from(prepend_bos.is_some());
    if body == 0 {
        return Err(Error::Validation("seq_len leaves no room for text".into()));
    }
    let total = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<usize> = if total >= n_samples * body {
        // sorted draws from [0, slack] shifted by i * body never overlap
        let slack = total - n_samples * body;
        let mut s: Vec<usize> = (0..n_samples).map(|_| rng.gen_range(0..=slack)).collect();
        s.sort_unstable();
        s.iter().enumerate().map(|(i, &o)| o + i * body).collect()
    } else if total >= body {
        (0..n_samples).map(|_| rng.gen_range(0..=total - body)).collect()
    } else {
        vec![0; n_samples]
    };
    let mut tokens = Vec::with_capacity(n_samples);
    let mut valid_lengths = Vec::with_capacity(n_samples);
    for start in starts {
        let mut row = Vec::with_capacity(seq_len);
        row.extend(prepend_bos);
        row.extend_from_slice(&ids[start..(start + body).min(total)]);
        valid_lengths.push(row.len());
        row.resize(seq_len, pad_id);
        tokens.push(row);
    }
    Ok(TokenBatch {
        tokens,
        valid_lengths,
    })
}

/// One vocabulary token per row: ids `0..n_samples` in order, or a seeded
/// sorted subset when `subsample` is set. BOS, when given, puts the probe
/// token at position 1.
pub fn sample_singular_inputs(
    vocab_size: usize,
    n_samples: usize,
    seed: u64,
    prepend_bos: Option<TokenId>,
    subsample: bool,
) -> Result<TokenBatch> {
    if n_samples > vocab_size {
        return Err(Error::Validation(format!(
            "{n_samples} singular samples requested from a vocabulary of {vocab_size}"
        )));
    }
    let ids: Vec<usize> = if subsample && n_samples < vocab_size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample_indices(&mut rng, vocab_size, n_samples).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n_samples).collect()
    };
    let tokens: Vec<Vec<TokenId>> = ids
        .into_iter()
        .map(|t| prepend_bos.into_iter().chain([t as TokenId]).collect())
        .collect();
    let valid_lengths = tokens.iter().map(Vec::len).collect();
    Ok(TokenBatch {
        tokens,
        valid_lengths,
    })
}

/// Machine-readable outcome of a capture run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub path: PathBuf,
    pub shape: [usize; 4],
    pub bytes: u64,
    pub skipped: Vec<SkippedSample>,
    pub compressed: bool,
    pub reducer_path: Option<PathBuf>,
}

/// Builds the token rows for `cfg`.
pub fn make_inputs(cfg: &RunConfig, model: &ModelConfig, tokenizer: &Tokenizer) -> Result<TokenBatch> {
    let bos = if cfg.prepend_bos { model.bos_id } else { None };
    match cfg.mode {
        Mode::Text => {
            let corpus = cfg
                .corpus_path
                .as_deref()
                .ok_or_else(|| Error::Validation("text mode needs a corpus path".into()))?;
            let pad = model.bos_id.unwrap_or(0);
            sample_text_inputs(corpus, cfg.n_samples, cfg.seq_len, tokenizer, bos, pad, cfg.seed)
        }
        Mode::Singular => sample_singular_inputs(
            model.vocab_size,
            cfg.n_samples,
            cfg.seed,
            bos,
            cfg.singular_subsample,
        ),
    }
}

/// Forward one row; padding positions stay zero.
fn capture_row(model: &Model, spec: &CaptureSpec, row: &[TokenId], valid: usize) -> Result<Vec<f32>> {
    let d = model.config.d_model;
    let c = spec.tags.len();
    let mut out = vec![0.0f32; row.len() * c * d];
    let fwd = crate::model::forward_with(&model.weights, &model.config, &row[..valid], spec, false)?;
    for (ci, (_, m)) in fwd.captures.iter().enumerate() {
        for p in 0..valid {
            let dst = &mut out[(p * c + ci) * d..(p * c + ci + 1) * d];
            dst.iter_mut().zip(m.row(p)).for_each(|(o, &v)| *o = v as f32);
        }
    }
    Ok(out)
}

/// Runs every input through the model and writes a dataset to `out_path`.
/// Samples hitting a numeric error are skipped and listed in the header.
pub fn run_capture(
    cfg: &RunConfig,
    model: &Model,
    tokenizer: &Tokenizer,
    out_path: impl AsRef<Path>,
) -> Result<CaptureSummary> {
    let out_path = out_path.as_ref();
    cfg.validate(&model.config)?;
    let batch = make_inputs(cfg, &model.config, tokenizer)?;
    run_capture_on(cfg, model, &batch, out_path)
}

pub fn run_capture_on(
    cfg: &RunConfig,
    model: &Model,
    batch: &TokenBatch,
    out_path: &Path,
) -> Result<CaptureSummary> {
    cfg.validate(&model.config)?;
    let spec = &cfg.capture;
    let d = model.config.d_model;
    let seq_len = batch.tokens.first().map_or(0, Vec::len);

    // with compression the raw pass is kept at full precision
    let raw_precision = if cfg.compress_to.is_some() {
        Precision::F32
    } else {
        spec.precision
    };
    let raw_path = if cfg.compress_to.is_some() {
        let mut name = out_path.file_name().unwrap_or_default().to_os_string();
        name.push(".raw.partial");
        out_path.with_file_name(name)
    } else {
        out_path.to_path_buf()
    };
    let mut writer = DatasetWriter::create(&raw_path, raw_precision)?;
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    let chunk = (rayon::current_num_threads() * 2).max(1);
    for start in (0..batch.tokens.len()).step_by(chunk) {
        let end = (start + chunk).min(batch.tokens.len());
        let results: Vec<Result<Vec<f32>>> = (start..end)
            .into_par_iter()
            .map(|i| capture_row(model, spec, &batch.tokens[i], batch.valid_lengths[i]))
            .collect();
        for (i, r) in (start..end).zip(results) {
            match r {
                Ok(values) => {
                    writer.write_values(&values)?;
                    kept.push(i);
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!("sample {i} skipped: {msg}");
                    skipped.push(SkippedSample {
                        index: i,
                        reason: msg,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Numeric(format!(
            "every sample failed; first error: {}",
            skipped.first().map_or("none", |s| s.reason.as_str())
        )));
    }
    let mut header = DatasetHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        run: cfg.clone(),
        seed: cfg.seed,
        captures: spec.tags.clone(),
        n_samples: kept.len(),
        seq_len,
        dim: d,
        precision: raw_precision,
        compressed: false,
        compression: None,
        skipped,
        sample_ids: kept.clone(),
        tokens: kept.iter().map(|&i| batch.tokens[i].clone()).collect(),
        valid_lengths: kept.iter().map(|&i| batch.valid_lengths[i]).collect(),
    };
    writer.finish(&header)?;

    let mut reducer_path = None;
    if let Some(k) = cfg.compress_to {
        let result = compress_file(&raw_path, &header, k, cfg.seed, spec.precision, out_path);
        let _ = fs::remove_file(&raw_path);
        let (pca, compressed_header) = result?;
        let rpath = reducer_path_for(out_path);
        reducer_save(&rpath, &Reducer::Pca(pca))?;
        header = compressed_header;
        reducer_path = Some(rpath);
    }
    let bytes = fs::metadata(out_path)
        .map_err(|e| Error::io(out_path, e))?
        .len();
    Ok(CaptureSummary {
        path: out_path.to_path_buf(),
        shape: [header.n_samples, header.seq_len, header.n_captures(), header.dim],
        bytes,
        skipped: header.skipped.clone(),
        compressed: header.compressed,
        reducer_path,
    })
}

/// `<dataset>.pca.redm`, next to the dataset.
pub fn reducer_path_for(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".pca.redm");
    dataset.with_file_name(name)
}

/// Seeded subset of up to `max` indices out of `n`, ascending.
fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Uncentered PCA fit on a seeded subsample of at most
/// [`COMPRESSION_FIT_MAX`] rows, applied to every row.
pub fn compress_latents(latents: &Matrix, target_dims: usize, seed: u64) -> Result<(Matrix, PcaModel)> {
    let (n, dim) = latents.shape();
    if target_dims == 0 || target_dims > dim {
        return Err(Error::Validation(format!(
            "compression target {target_dims} outside 1..={dim}"
        )));
    }
    let idx = subsample(n, COMPRESSION_FIT_MAX, seed);
    let fit = latents.select_rows(&idx);
    let pca = fit_compression(&fit, target_dims, idx.len())?;
    let projected = pca_transform(&pca, latents)?;
    Ok((projected, pca))
}

fn fit_compression(fit: &Matrix, target_dims: usize, n_fit: usize) -> Result<PcaModel> {
    if target_dims > fit.rows() {
        return Err(Error::Validation(format!(
            "compression target {target_dims} exceeds the {} fit vectors",
            fit.rows()
        )));
    }
    let pca = pca_fit(fit, target_dims, &format!("compression fit on {n_fit} latent vectors"))?;
    if pca.rank_deficient > 0 {
        return Err(Error::Validation(format!(
            "compression target {target_dims} exceeds the rank {} of the fit sample",
            target_dims - pca.rank_deficient
        )));
    }
    Ok(pca)
}

/// Fits the compression basis on the raw dataset file and streams the
/// projected dataset to `out_path`.
fn compress_file(
    raw_path: &Path,
    raw_header: &DatasetHeader,
    k: usize,
    seed: u64,
    precision: Precision,
    out_path: &Path,
) -> Result<(PcaModel, DatasetHeader)> {
    let raw = crate::store::LatentDataset::load(raw_path)?;
    let [n, s, c, d] = raw.shape();
    // only real (non-padding) vectors take part in the fit
    let mut rows = Vec::new();
    for i in 0..n {
        for p in 0..raw_header.valid_lengths[i] {
            for ci in 0..c {
                rows.push((i, p, ci));
            }
        }
    }
    let pick = subsample(rows.len(), COMPRESSION_FIT_MAX, seed);
    let mut fit = Matrix::zeros(pick.len(), d);
    for (r, &at) in pick.iter().enumerate() {
        let (i, p, ci) = rows[at];
        raw.read_vector(i, p, ci, fit.row_mut(r));
    }
    let pca = fit_compression(&fit, k, pick.len())?;
    drop(fit);

    let mut writer = DatasetWriter::create(out_path, precision)?;
    let mut block = Matrix::zeros(s * c, d);
    for i in 0..n {
        for p in 0..s {
            for ci in 0..c {
                raw.read_vector(i, p, ci, block.row_mut(p * c + ci));
            }
        }
        let projected = pca_transform(&pca, &block)?;
        let values: Vec<f32> = projected.data().iter().map(|&v| v as f32).collect();
        writer.write_values(&values)?;
    }
    let mut header = raw_header.clone();
    header.dim = k;
    header.precision = precision;
    header.compressed = true;
    header.compression = Some(Compression {
        from_dim: d,
        to_dim: k,
        reducer_file: reducer_path_for(out_path)
            .file_name()
            .map(|f| f.to_string_lossy().into_owned()),
    });
    writer.finish(&header)?;
    drop(raw);
    Ok((pca, header))
}

/// Header-only preview of the dataset a config would produce.
pub fn planned_shape(cfg: &RunConfig, model: &ModelConfig) -> [usize; 4] {
    [
        cfg.n_samples,
        cfg.stored_seq_len(),
        cfg.capture.tags.len(),
        cfg.compress_to.unwrap_or(model.d_model),
    ]
}
