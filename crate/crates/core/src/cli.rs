//! The `latentscope` command line: capture → analyze/reduce → plot, with
//! files as the interface between stages.
//!
//! Every command prints two JSON lines on stdout: the resolved config
//! (`{"config": {...}}`, accepted back by `--config`) and a summary.
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numeric.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analyze::{
    norms_by_capture, norms_by_position, token_norm_histogram, Histogram, NormAxis, NormReport,
};
use crate::checkpoint::{load_model, write_synthetic};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, CaptureSpec, CaptureTag, ModelConfig, NormKind, PosKind, Precision};
use crate::pipeline::{run_capture, Mode, RunConfig};
use crate::plot::{
    limits_from_svg, render_histogram, render_line, render_pair_grid, render_scatter, ColorBy,
    Limits, PlotSpec, PointTag, DEFAULT_MAX_POINTS,
};
use crate::reduce::{
    pca_fit, reducer_load, reducer_save, umap_fit, Metric, Reducer, UmapParams,
};
use crate::store::{
    intermediate_blocks, mean_over, select, unit_normalize, Axis, AxisLabel, CaptureFilter,
    CaptureLabel, LatentDataset, RowLabel, SampleFilter, Selection, SequenceFilter, MAGIC,
};
use crate::tokenizer::{BpeVocab, Tokenizer};

pub const THREADS_ENV: &str = "LATENTSCOPE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "latentscope", version, about = "Capture, reduce and plot transformer latent states")]
pub struct Cli {
    /// Worker threads (falls back to LATENTSCOPE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// JSON config; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a model over generated inputs and save the latent states.
    Capture(CaptureArgs),
    /// Norm statistics of a dataset.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Reduce selected latents with PCA or UMAP.
    Reduce(ReduceArgs),
    /// Render a points, norms or histogram CSV to SVG.
    Plot(PlotArgs),
    /// Print the header of a dataset or reducer file.
    Info(InfoArgs),
    /// Write a seeded random-weight checkpoint.
    GenSynthetic(GenArgs),
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Mean L2 norms by position, capture or token.
    Norms(NormsArgs),
}

/// Capture, sequence and sample filters shared by analyze and reduce.
#[derive(Args, Debug, Default, Clone)]
pub struct SelectArgs {
    /// Inclusive block range, `LO-HI`.
    #[arg(long)]
    pub blocks: Option<String>,
    /// Use the model's intermediate-block preset.
    #[arg(long)]
    pub intermediate: bool,
    /// Capture points, e.g. `2,5`.
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<u8>>,
    /// Half-open position range, `START,END`.
    #[arg(long)]
    pub positions: Option<String>,
    #[arg(long)]
    pub exclude_pos0: bool,
    /// Seeded subset of this many samples.
    #[arg(long)]
    pub sample_count: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub blocks: Option<(u32, u32)>,
    pub intermediate: bool,
    pub points: Option<Vec<u8>>,
    pub positions: Option<(usize, usize)>,
    pub exclude_pos0: bool,
    pub sample_count: Option<usize>,
}

impl SelectConfig {
    fn overlay(mut self, a: &SelectArgs) -> Result<Self> {
        if let Some(b) = &a.blocks {
            self.blocks = Some(parse_block_range(b)?);
        }
        self.intermediate |= a.intermediate;
        if let Some(p) = &a.points {
            self.points = Some(p.clone());
        }
        if let Some(p) = &a.positions {
            self.positions = Some(parse_pair(p)?);
        }
        self.exclude_pos0 |= a.exclude_pos0;
        if a.sample_count.is_some() {
            self.sample_count = a.sample_count;
        }
        Ok(self)
    }

    pub fn selection(&self, n_blocks: usize, seed: u64) -> Result<Selection> {
        let blocks = match (self.blocks, self.intermediate) {
            (Some(_), true) => {
                return Err(Error::Validation(
                    "give either a block range or the intermediate preset, not both".into(),
                ))
            }
            (Some(b), false) => Some(b),
            (None, true) => Some(intermediate_blocks(n_blocks)?),
            (None, false) => None,
        };
        Ok(Selection {
            captures: CaptureFilter {
                blocks,
                points: self.points.clone(),
                ..CaptureFilter::default()
            },
            sequence: SequenceFilter {
                range: self.positions,
                exclude_position_0: self.exclude_pos0,
            },
            samples: match self.sample_count {
                Some(n) => SampleFilter::Count { n, seed },
                None => SampleFilter::All,
            },
        })
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn parse_block_range(s: &str) -> Result<(u32, u32)> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| usage(format!("block range must look like LO-HI, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|_| usage(format!("bad block index {v:?}")));
    let (lo, hi) = (p(a)?, p(b)?);
    if lo > hi {
        return Err(usage(format!("empty block range {s:?}")));
    }
    Ok((lo, hi))
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| usage(format!("expected START,END, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("bad integer {v:?}")));
    Ok((p(a)?, p(b)?))
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| usage(format!("unknown {what} {s:?}")))
}

#[derive(Args, Debug)]
pub struct CaptureArgs {
    /// Checkpoint (safetensors layout).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// GPT-2 style vocab.json; defaults to one beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub merges: Option<PathBuf>,
    /// `text` or `singular`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seqlen: Option<usize>,
    /// Prepend the model's BOS token.
    #[arg(long)]
    pub bos: bool,
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<u8>>,
    /// `f32` or `f16`.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub compress_to: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Singular mode: seeded vocabulary subset instead of the first ids.
    #[arg(long)]
    pub subsample: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub model: PathBuf,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub mode: Mode,
    pub corpus: Option<PathBuf>,
    pub samples: usize,
    pub seqlen: usize,
    pub bos: bool,
    pub blocks: Option<(u32, u32)>,
    pub points: Option<Vec<u8>>,
    pub precision: Precision,
    pub compress_to: Option<usize>,
    pub seed: u64,
    pub subsample: bool,
    pub out: PathBuf,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            vocab: None,
            merges: None,
            mode: Mode::Text,
            corpus: None,
            samples: 8,
            seqlen: 64,
            bos: false,
            blocks: None,
            points: None,
            precision: Precision::F32,
            compress_to: None,
            seed: 0,
            subsample: false,
            out: PathBuf::new(),
        }
    }
}

impl CaptureArgs {
    fn resolve(&self, mut c: CaptureConfig) -> Result<CaptureConfig> {
        macro_rules! take {
            ($($f:ident => $g:ident),*) => {$( if let Some(v) = &self.$f { c.$g = v.clone(); } )*};
        }
        take!(model => model, samples => samples, seqlen => seqlen, out => out, seed => seed);
        if self.vocab.is_some() {
            c.vocab = self.vocab.clone();
        }
        if self.merges.is_some() {
            c.merges = self.merges.clone();
        }
        if self.corpus.is_some() {
            c.corpus = self.corpus.clone();
        }
        if let Some(m) = &self.mode {
            c.mode = parse_enum("mode", m)?;
        }
        if let Some(p) = &self.precision {
            c.precision = parse_enum("precision", p)?;
        }
        if let Some(b) = &self.blocks {
            c.blocks = Some(parse_block_range(b)?);
        }
        if self.points.is_some() {
            c.points = self.points.clone();
        }
        if self.compress_to.is_some() {
            c.compress_to = self.compress_to;
        }
        c.bos |= self.bos;
        c.subsample |= self.subsample;
        if c.model.as_os_str().is_empty() {
            return Err(usage("capture needs --model"));
        }
        if c.out.as_os_str().is_empty() {
            return Err(usage("capture needs --out"));
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct NormsArgs {
    pub dataset: Option<PathBuf>,
    /// `position`, `capture` or `token`.
    #[arg(long)]
    pub by: Option<String>,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Histogram bins for `--by token`.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render an SVG chart here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub log_y: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormsConfig {
    pub dataset: PathBuf,
    pub by: NormAxis,
    pub select: SelectConfig,
    pub bins: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
    pub log_y: bool,
}

impl Default for NormsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            by: NormAxis::Position,
            select: SelectConfig::default(),
            bins: 50,
            seed: 0,
            out: PathBuf::new(),
            svg: None,
            log_y: false,
        }
    }
}

impl NormsArgs {
    fn resolve(&self, mut c: NormsConfig) -> Result<NormsConfig> {
        if let Some(d) = &self.dataset {
            c.dataset = d.clone();
        }
        if let Some(b) = &self.by {
            c.by = parse_enum("norm axis", b)?;
        }
        c.select = c.select.overlay(&self.select)?;
        if let Some(b) = self.bins {
            c.bins = b;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if self.svg.is_some() {
            c.svg = self.svg.clone();
        }
        c.log_y |= self.log_y;
        if c.dataset.as_os_str().is_empty() || c.out.as_os_str().is_empty() {
            return Err(usage("analyze norms needs a dataset and --out"));
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct ReduceArgs {
    pub dataset: Option<PathBuf>,
    /// `pca` or `umap`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub dims: Option<usize>,
    /// `euclidean` or `cosine` (UMAP).
    #[arg(long)]
    pub metric: Option<String>,
    /// Scale every vector to unit length (after any averaging).
    #[arg(long)]
    pub unit: bool,
    /// Axes to average over, e.g. `sample,capture`.
    #[arg(long, value_delimiter = ',')]
    pub mean_over: Option<Vec<String>>,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Fit on a seeded subset of this many rows.
    #[arg(long)]
    pub fit_subset: Option<usize>,
    /// Transform and write a seeded subset of this many rows.
    #[arg(long)]
    pub transform_subset: Option<usize>,
    /// Transform with a saved reducer instead of fitting.
    #[arg(long)]
    pub reuse_reducer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    #[arg(long)]
    pub min_dist: Option<f64>,
    #[arg(long)]
    pub n_epochs: Option<usize>,
    /// Points CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reducer output; defaults to the points path with a `.redm` extension.
    #[arg(long)]
    pub reducer_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Umap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReduceConfig {
    pub dataset: PathBuf,
    pub method: Method,
    pub dims: usize,
    pub metric: Metric,
    pub unit: bool,
    pub mean_over: Vec<String>,
    pub select: SelectConfig,
    pub fit_subset: Option<usize>,
    pub transform_subset: Option<usize>,
    pub reuse_reducer: Option<PathBuf>,
    pub seed: u64,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    pub out: PathBuf,
    pub reducer_out: Option<PathBuf>,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        let u = UmapParams::default();
        Self {
            dataset: PathBuf::new(),
            method: Method::Pca,
            dims: 2,
            metric: Metric::Euclidean,
            unit: false,
            mean_over: Vec::new(),
            select: SelectConfig::default(),
            fit_subset: None,
            transform_subset: None,
            reuse_reducer: None,
            seed: 0,
            n_neighbors: u.n_neighbors,
            min_dist: u.min_dist,
            n_epochs: u.n_epochs,
            out: PathBuf::new(),
            reducer_out: None,
        }
    }
}

impl ReduceArgs {
    fn resolve(&self, mut c: ReduceConfig) -> Result<ReduceConfig> {
        if let Some(d) = &self.dataset {
            c.dataset = d.clone();
        }
        if let Some(m) = &self.method {
            c.method = parse_enum("method", m)?;
        }
        if let Some(m) = &self.metric {
            c.metric = m.parse()?;
        }
        if let Some(v) = self.dims {
            c.dims = v;
        }
        c.unit |= self.unit;
        if let Some(m) = &self.mean_over {
            c.mean_over = m.clone();
        }
        c.select = c.select.overlay(&self.select)?;
        if self.fit_subset.is_some() {
            c.fit_subset = self.fit_subset;
        }
        if self.transform_subset.is_some() {
            c.transform_subset = self.transform_subset;
        }
        if self.reuse_reducer.is_some() {
            c.reuse_reducer = self.reuse_reducer.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.n_neighbors {
            c.n_neighbors = v;
        }
        if let Some(v) = self.min_dist {
            c.min_dist = v;
        }
        if let Some(v) = self.n_epochs {
            c.n_epochs = v;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if self.reducer_out.is_some() {
            c.reducer_out = self.reducer_out.clone();
        }
        if c.dataset.as_os_str().is_empty() || c.out.as_os_str().is_empty() {
            return Err(usage("reduce needs a dataset and --out"));
        }
        for a in &c.mean_over {
            a.parse::<Axis>()?;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Points CSV from `reduce`, or a CSV from `analyze norms`.
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One panel per pair of reduced dimensions.
    #[arg(long)]
    pub grid_pairs: bool,
    /// `component`, `position` or `none`.
    #[arg(long)]
    pub color_by: Option<String>,
    /// `MIN,MAX`.
    #[arg(long, allow_hyphen_values = true)]
    pub xlim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub ylim: Option<String>,
    /// Reuse the axis limits of an earlier SVG.
    #[arg(long)]
    pub limits_from: Option<PathBuf>,
    #[arg(long)]
    pub title: Option<String>,
    #[arg(long)]
    pub point_size: Option<f64>,
    #[arg(long)]
    pub max_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_y: bool,
    /// Block count for depth colouring; inferred when absent.
    #[arg(long)]
    pub n_blocks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub input: PathBuf,
    pub out: PathBuf,
    pub grid_pairs: bool,
    pub color_by: ColorBy,
    pub xlim: Option<(f64, f64)>,
    pub ylim: Option<(f64, f64)>,
    pub limits_from: Option<PathBuf>,
    pub title: String,
    pub point_size: f64,
    pub max_points: usize,
    pub seed: u64,
    pub log_y: bool,
    pub n_blocks: Option<usize>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        let s = PlotSpec::default();
        Self {
            input: PathBuf::new(),
            out: PathBuf::new(),
            grid_pairs: false,
            color_by: s.color_by,
            xlim: None,
            ylim: None,
            limits_from: None,
            title: String::new(),
            point_size: s.point_size,
            max_points: DEFAULT_MAX_POINTS,
            seed: 0,
            log_y: false,
            n_blocks: None,
        }
    }
}

impl PlotArgs {
    fn resolve(&self, mut c: PlotConfig) -> Result<PlotConfig> {
        if let Some(v) = &self.input {
            c.input = v.clone();
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.grid_pairs |= self.grid_pairs;
        if let Some(v) = &self.color_by {
            c.color_by = v.parse()?;
        }
        if let Some(v) = &self.xlim {
            c.xlim = Some(crate::plot::parse_range(v)?);
        }
        if let Some(v) = &self.ylim {
            c.ylim = Some(crate::plot::parse_range(v)?);
        }
        if self.limits_from.is_some() {
            c.limits_from = self.limits_from.clone();
        }
        if let Some(v) = &self.title {
            c.title = v.clone();
        }
        if let Some(v) = self.point_size {
            c.point_size = v;
        }
        if let Some(v) = self.max_points {
            c.max_points = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.log_y |= self.log_y;
        if self.n_blocks.is_some() {
            c.n_blocks = self.n_blocks;
        }
        if c.input.as_os_str().is_empty() || c.out.as_os_str().is_empty() {
            return Err(usage("plot needs an input CSV and --out"));
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    pub path: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// `layernorm` or `rmsnorm`.
    #[arg(long)]
    pub norm: Option<String>,
    /// `learned` or `rope`.
    #[arg(long)]
    pub pos: Option<String>,
    /// `gelu` or `silu`.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub bos_id: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::new(),
            model: ModelConfig {
                n_blocks: 4,
                d_model: 64,
                n_heads: 4,
                d_mlp: 256,
                vocab_size: 512,
                max_seq: 128,
                norm_kind: NormKind::LayerNorm,
                pos_kind: PosKind::Learned,
                activation: Activation::Gelu,
                rope_theta: 10000.0,
                bos_id: None,
            },
            seed: 0,
        }
    }
}

impl GenArgs {
    fn resolve(&self, mut c: GenConfig) -> Result<GenConfig> {
        let m = &mut c.model;
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { m.$f = v; } )*};
        }
        take!(n_blocks, d_model, n_heads, d_mlp, vocab_size, max_seq);
        if let Some(v) = &self.norm {
            m.norm_kind = parse_enum("norm kind", v)?;
        }
        if let Some(v) = &self.pos {
            m.pos_kind = parse_enum("position kind", v)?;
        }
        if let Some(v) = &self.activation {
            m.activation = parse_enum("activation", v)?;
        }
        if self.bos_id.is_some() {
            m.bos_id = self.bos_id;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if c.out.as_os_str().is_empty() {
            return Err(usage("gen-synthetic needs --out"));
        }
        c.model.validate()?;
        Ok(c)
    }
}

/// Reads the named section of a config file. Accepts the echoed form
/// `{"config": {"<section>": {...}}}`, `{"<section>": {...}}`, or a bare
/// section object.
fn config_section<T: DeserializeOwned + Default>(path: Option<&Path>, section: &str) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v: Value = serde_json::from_str(&text)?;
    if let Some(inner) = v.get_mut("config") {
        v = inner.take();
    }
    let body = match v.get_mut(section) {
        Some(s) => s.take(),
        None => v,
    };
    Ok(serde_json::from_value(body)?)
}

fn thread_count(cli: &Cli) -> Result<usize> {
    if cli.deterministic {
        return Ok(1);
    }
    if let Some(n) = cli.threads {
        return if n == 0 { Err(usage("--threads must be positive")) } else { Ok(n) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs a parsed command, writing the config echo and summary to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let threads = thread_count(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let (section, config, summary) = pool.install(|| dispatch(cli))?;
    let echo = json!({ "config": { section: config } });
    let w = |out: &mut dyn Write, v: &Value| -> Result<()> {
        writeln!(out, "{v}").map_err(|e| Error::io("<stdout>", e))
    };
    w(out, &echo)?;
    w(out, &json!({ "summary": summary }))
}

type Outcome = (&'static str, Value, Value);

fn outcome(section: &'static str, config: &impl Serialize, summary: Value) -> Result<Outcome> {
    Ok((section, serde_json::to_value(config)?, summary))
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Capture(a) => {
            let c = a.resolve(config_section(cfg_path, "capture")?)?;
            let summary = cmd_capture(&c)?;
            outcome("capture", &c, summary)
        }
        Command::Analyze(AnalyzeCommand::Norms(a)) => {
            let c = a.resolve(config_section(cfg_path, "norms")?)?;
            let summary = cmd_norms(&c)?;
            outcome("norms", &c, summary)
        }
        Command::Reduce(a) => {
            let c = a.resolve(config_section(cfg_path, "reduce")?)?;
            let summary = cmd_reduce(&c)?;
            outcome("reduce", &c, summary)
        }
        Command::Plot(a) => {
            let c = a.resolve(config_section(cfg_path, "plot")?)?;
            let summary = cmd_plot(&c)?;
            outcome("plot", &c, summary)
        }
        Command::Info(a) => {
            let summary = cmd_info(&a.path)?;
            outcome("info", &json!({ "path": a.path }), summary)
        }
        Command::GenSynthetic(a) => {
            let c = a.resolve(config_section(cfg_path, "gen_synthetic")?)?;
            write_synthetic(&c.out, &c.model, c.seed)?;
            let summary = json!({ "path": c.out, "n_blocks": c.model.n_blocks, "d_model": c.model.d_model });
            outcome("gen_synthetic", &c, summary)
        }
    }
}

fn tokenizer_for(c: &CaptureConfig, vocab_size: usize) -> Result<Tokenizer> {
    let dir = c.model.parent().unwrap_or(Path::new("."));
    let vocab = c.vocab.clone().unwrap_or_else(|| dir.join("vocab.json"));
    let merges = c.merges.clone().unwrap_or_else(|| dir.join("merges.txt"));
    if vocab.exists() && merges.exists() {
        return Ok(Tokenizer::Bpe(Box::new(BpeVocab::load(vocab, merges)?)));
    }
    if c.vocab.is_some() || c.merges.is_some() {
        return Err(usage("both --vocab and --merges must point at existing files"));
    }
    if c.mode == Mode::Text && vocab_size < 256 {
        return Err(usage(format!(
            "no tokenizer files found and the byte tokenizer needs a vocabulary of 256, model has {vocab_size}"
        )));
    }
    Ok(Tokenizer::Bytes)
}

fn cmd_capture(c: &CaptureConfig) -> Result<Value> {
    let model = load_model(&c.model)?;
    let capture = match (c.blocks, &c.points) {
        (None, None) => CaptureSpec::all(&model.config),
        _ => {
            let f = CaptureFilter {
                blocks: c.blocks,
                points: c.points.clone(),
                ..CaptureFilter::default()
            };
            CaptureSpec::filtered(&model.config, |t| f.accepts(t))?
        }
    };
    let run = RunConfig {
        mode: c.mode,
        corpus_path: c.corpus.clone(),
        n_samples: c.samples,
        seq_len: if c.mode == Mode::Singular { 1 } else { c.seqlen },
        prepend_bos: c.bos,
        capture: CaptureSpec {
            precision: c.precision,
            ..capture
        },
        compress_to: c.compress_to,
        seed: c.seed,
        singular_subsample: c.subsample,
    };
    run.validate(&model.config)?;
    let tokenizer = tokenizer_for(c, model.config.vocab_size)?;
    let summary = run_capture(&run, &model, &tokenizer, &c.out)?;
    Ok(serde_json::to_value(summary)?)
}

fn cmd_norms(c: &NormsConfig) -> Result<Value> {
    let ds = LatentDataset::load(&c.dataset)?;
    let sel = c.select.selection(ds.header().model.n_blocks, c.seed)?;
    match c.by {
        NormAxis::Position | NormAxis::Capture => {
            let report = if c.by == NormAxis::Position {
                norms_by_position(&ds, &sel)?
            } else {
                norms_by_capture(&ds, &sel)?
            };
            write_text(&c.out, &report.to_csv())?;
            if let Some(svg) = &c.svg {
                let spec = PlotSpec {
                    log_y: c.log_y,
                    x_label: format!("{:?}", c.by).to_lowercase(),
                    y_label: "mean L2 norm".into(),
                    ..PlotSpec::default()
                };
                write_text(svg, &render_line(&report, &spec)?)?;
            }
            Ok(json!({ "csv": c.out, "svg": c.svg, "rows": report.len(), "by": c.by }))
        }
        NormAxis::Token => {
            let t = token_norm_histogram(&ds, &sel, c.bins)?;
            write_text(&c.out, &t.histogram.to_csv())?;
            if let Some(svg) = &c.svg {
                let spec = PlotSpec {
                    x_label: "mean L2 norm".into(),
                    y_label: "tokens".into(),
                    ..PlotSpec::default()
                };
                write_text(svg, &render_histogram(&t.histogram, &spec)?)?;
            }
            Ok(json!({ "csv": c.out, "svg": c.svg, "tokens": t.norms.len(), "bins": c.bins, "by": c.by }))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seeded ascending subset of `0..n` of size `min(m, n)`.
fn subset(n: usize, m: Option<usize>, seed: u64) -> Vec<usize> {
    match m {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample_indices(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn label_field(l: AxisLabel) -> String {
    match l {
        AxisLabel::Index(i) => i.to_string(),
        AxisLabel::Collapsed => "*".into(),
    }
}

/// `sample,position,capture,d0,...`; collapsed axes are written as `*`.
pub fn points_to_csv(points: &Matrix, labels: &[RowLabel]) -> String {
    let mut s = String::from("sample,position,capture");
    for j in 0..points.cols() {
        s.push_str(&format!(",d{j}"));
    }
    s.push('\n');
    for (i, l) in labels.iter().enumerate() {
        let cap = match l.capture {
            CaptureLabel::Tag(t) => t.to_string(),
            CaptureLabel::Collapsed => "*".into(),
        };
        s.push_str(&format!("{},{},{cap}", label_field(l.sample), label_field(l.position)));
        for v in points.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Inverse of [`points_to_csv`].
pub fn points_from_csv(text: &str) -> Result<(Matrix, Vec<RowLabel>)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let dims = header.split(',').count().saturating_sub(3);
    if !header.starts_with("sample,position,capture") || dims == 0 {
        return Err(Error::Parse {
            file: "points csv".into(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse {
            file: "points csv".into(),
            line: n + 2,
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dims + 3 {
            return Err(bad(format!("expected {} fields, got {}", dims + 3, f.len())));
        }
        let axis = |s: &str| -> Result<AxisLabel> {
            if s == "*" {
                Ok(AxisLabel::Collapsed)
            } else {
                s.parse().map(AxisLabel::Index).map_err(|_| bad(format!("bad index {s:?}")))
            }
        };
        let capture = if f[2] == "*" {
            CaptureLabel::Collapsed
        } else {
            CaptureLabel::Tag(f[2].parse::<CaptureTag>().map_err(|e| bad(e.to_string()))?)
        };
        labels.push(RowLabel {
            sample: axis(f[0])?,
            position: axis(f[1])?,
            capture,
        });
        for v in &f[3..] {
            data.push(v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")))?);
        }
    }
    Ok((Matrix::new(labels.len(), dims, data)?, labels))
}

fn cmd_reduce(c: &ReduceConfig) -> Result<Value> {
    let ds = LatentDataset::load(&c.dataset)?;
    let sel = c.select.selection(ds.header().model.n_blocks, c.seed)?;
    let mut view = select(&ds, &sel)?;
    if !c.mean_over.is_empty() {
        let axes = c
            .mean_over
            .iter()
            .map(|a| a.parse())
            .collect::<Result<Vec<Axis>>>()?;
        view = mean_over(&view, &axes)?;
    }
    let mut degenerate = 0;
    if c.unit {
        let (v, d) = unit_normalize(&view);
        view = v;
        degenerate = d;
    }
    let (rows, labels) = view.to_rows();
    let n = rows.rows();

    let fit_idx = subset(n, c.fit_subset, c.seed);
    let out_idx = subset(n, c.transform_subset, c.seed.wrapping_add(1));
    let mut warnings = Vec::new();
    let (reducer, fit_embedding, reducer_path) = match &c.reuse_reducer {
        Some(p) => {
            let r = reducer_load(p)?;
            if r.input_dim() != rows.cols() {
                return Err(Error::Shape(format!(
                    "reducer {} expects {} dims, selection has {}",
                    p.display(),
                    r.input_dim(),
                    rows.cols()
                )));
            }
            (r, None, p.clone())
        }
        None => {
            let fit_rows = rows.select_rows(&fit_idx);
            let path = c
                .reducer_out
                .clone()
                .unwrap_or_else(|| c.out.with_extension("redm"));
            let (r, emb) = match c.method {
                Method::Pca => (
                    Reducer::Pca(pca_fit(&fit_rows, c.dims, &c.dataset.display().to_string())?),
                    None,
                ),
                Method::Umap => {
                    let params = UmapParams {
                        n_neighbors: c.n_neighbors,
                        min_dist: c.min_dist,
                        metric: c.metric,
                        n_epochs: c.n_epochs,
                        seed: c.seed,
                        ..UmapParams::default()
                    };
                    let (m, report) = umap_fit(&fit_rows, c.dims, &params)?;
                    warnings.extend(report.warnings);
                    let emb = m.embedding.clone();
                    (Reducer::Umap(m), Some(emb))
                }
            };
            reducer_save(&path, &r)?;
            (r, emb, path)
        }
    };

    // rows that were fitted keep their fitted coordinates
    let mut points = Matrix::zeros(out_idx.len(), reducer.output_dim());
    let mut pending = Vec::new();
    let mut fit_pos = 0;
    for (o, &i) in out_idx.iter().enumerate() {
        while fit_pos < fit_idx.len() && fit_idx[fit_pos] < i {
            fit_pos += 1;
        }
        match &fit_embedding {
            Some(e) if fit_pos < fit_idx.len() && fit_idx[fit_pos] == i => {
                points.row_mut(o).copy_from_slice(e.row(fit_pos));
            }
            _ => pending.push(o),
        }
    }
    if !pending.is_empty() {
        let src: Vec<usize> = pending.iter().map(|&o| out_idx[o]).collect();
        let t = reducer.transform(&rows.select_rows(&src))?;
        for (k, &o) in pending.iter().enumerate() {
            points.row_mut(o).copy_from_slice(t.row(k));
        }
    }
    let out_labels: Vec<RowLabel> = out_idx.iter().map(|&i| labels[i]).collect();
    write_text(&c.out, &points_to_csv(&points, &out_labels))?;
    Ok(json!({
        "points": c.out,
        "reducer": reducer_path,
        "method": reducer.kind(),
        "rows": points.rows(),
        "dims": points.cols(),
        "fit_rows": if c.reuse_reducer.is_some() { 0 } else { fit_idx.len() },
        "degenerate_vectors": degenerate,
        "warnings": warnings,
    }))
}

enum PlotInput {
    Points(Matrix, Vec<RowLabel>),
    Norms(NormReport),
    Histogram(Histogram),
}

fn read_plot_input(path: &Path) -> Result<PlotInput> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or_default();
    if header.starts_with("sample,position,capture") {
        let (m, l) = points_from_csv(&text)?;
        Ok(PlotInput::Points(m, l))
    } else if header == "index,mean,count,label" {
        let r = NormReport::from_csv(&text, NormAxis::Position)?;
        Ok(PlotInput::Norms(r))
    } else if header == "lo,hi,count" {
        Ok(PlotInput::Histogram(Histogram::from_csv(&text)?))
    } else {
        Err(Error::Parse {
            file: path.display().to_string(),
            line: 1,
            message: format!("unrecognised CSV header {header:?}"),
        })
    }
}

fn cmd_plot(c: &PlotConfig) -> Result<Value> {
    let limits = match (c.xlim, c.ylim) {
        (Some((xmin, xmax)), Some((ymin, ymax))) => Some(Limits {
            xmin,
            xmax,
            ymin,
            ymax,
        }),
        (None, None) => None,
        _ => return Err(usage("--xlim and --ylim must be given together")),
    };
    let panel_limits = match &c.limits_from {
        Some(p) => Some(limits_from_svg(
            &fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None => None,
    };
    let spec = PlotSpec {
        color_by: c.color_by,
        limits,
        panel_limits,
        point_size: c.point_size,
        title: c.title.clone(),
        n_blocks: c.n_blocks,
        max_points: c.max_points,
        seed: c.seed,
        log_y: c.log_y,
        ..PlotSpec::default()
    };
    let (svg, kind, items) = match read_plot_input(&c.input)? {
        PlotInput::Points(m, labels) => {
            let tags: Vec<PointTag> = labels.iter().map(PointTag::from).collect();
            let n = m.rows();
            if c.grid_pairs {
                (render_pair_grid(&m, &tags, &spec)?, "pair_grid", n)
            } else {
                if m.cols() < 2 {
                    return Err(usage("scatter needs at least 2 reduced dimensions"));
                }
                let xy = if m.cols() == 2 {
                    m
                } else {
                    let rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(i)[..2].to_vec()).collect();
                    Matrix::from_rows(&rows)?
                };
                (render_scatter(&xy, &tags, &spec)?, "scatter", n)
            }
        }
        PlotInput::Norms(r) => {
            let n = r.len();
            (render_line(&r, &spec)?, "line", n)
        }
        PlotInput::Histogram(h) => {
            let n = h.total();
            (render_histogram(&h, &spec)?, "histogram", n)
        }
    };
    write_text(&c.out, &svg)?;
    Ok(json!({ "svg": c.out, "kind": kind, "items": items, "bytes": svg.len() }))
}

fn cmd_info(path: &Path) -> Result<Value> {
    let head = {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = [0u8; 5];
        let n = std::io::Read::read(&mut f, &mut buf).map_err(|e| Error::io(path, e))?;
        buf[..n].to_vec()
    };
    if head.starts_with(MAGIC) {
        let ds = LatentDataset::load(path)?;
        Ok(json!({
            "kind": "latds",
            "shape": ds.shape(),
            "checksum": ds.checksum(),
            "header": ds.header(),
        }))
    } else if head.starts_with(b"REDM") {
        let r = reducer_load(path)?;
        Ok(json!({
            "kind": "redm",
            "method": r.kind(),
            "input_dim": r.input_dim(),
            "output_dim": r.output_dim(),
        }))
    } else {
        Err(Error::Format(format!(
            "{} is neither a latent dataset nor a reducer file",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_ranges() {
        assert_eq!(parse_block_range("2-8").unwrap(), (2, 8));
        assert_eq!(parse_block_range("2..8").unwrap(), (2, 8));
        assert!(parse_block_range("8-2").is_err());
        assert!(parse_block_range("x").is_err());
    }

    #[test]
    fn points_csv_round_trip() {
        let m = Matrix::from_rows(&[vec![0.1, -2.5], vec![1e-17, 3.0]]).unwrap();
        let labels = vec![
            RowLabel {
                sample: AxisLabel::Index(3),
                position: AxisLabel::Collapsed,
                capture: CaptureLabel::Tag(CaptureTag::block_point(2, 5)),
            },
            RowLabel {
                sample: AxisLabel::Collapsed,
                position: AxisLabel::Index(0),
                capture: CaptureLabel::Tag(CaptureTag::embedding()),
            },
        ];
        let (m2, l2) = points_from_csv(&points_to_csv(&m, &labels)).unwrap();
        assert_eq!(m2, m);
        assert_eq!(l2, labels);
    }
}
