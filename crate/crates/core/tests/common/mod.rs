#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use latentscope::linalg::Matrix;
use latentscope::model::{
    Activation, CaptureSpec, CaptureTag, ModelConfig, NormKind, PosKind, Precision,
};
use latentscope::pipeline::{Mode, RunConfig};
use latentscope::store::{DatasetHeader, LatentDataset, FORMAT_VERSION};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn small_config(n_blocks: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d_model,
        n_heads: 4,
        d_mlp: 4 * d_model,
        vocab_size: 300,
        max_seq: 64,
        norm_kind: NormKind::LayerNorm,
        pos_kind: PosKind::Learned,
        activation: Activation::Gelu,
        rope_theta: 10000.0,
        bos_id: Some(299),
    }
}

/// Header for an uncompressed text-mode dataset with every capture of an
/// `n_blocks` model.
pub fn header(n: usize, s: usize, n_blocks: usize, dim: usize, precision: Precision) -> DatasetHeader {
    let mut model = small_config(n_blocks, dim.max(4));
    model.d_model = dim;
    model.n_heads = 1;
    let captures = CaptureTag::enumerate(n_blocks);
    DatasetHeader {
        format_version: FORMAT_VERSION,
        run: RunConfig {
            mode: Mode::Text,
            corpus_path: Some("corpus.txt".into()),
            n_samples: n,
            seq_len: s,
            prepend_bos: false,
            capture: CaptureSpec {
                tags: captures.clone(),
                precision,
            },
            compress_to: None,
            seed: 0,
            singular_subsample: false,
        },
        model,
        seed: 0,
        captures,
        n_samples: n,
        seq_len: s,
        dim,
        precision,
        compressed: false,
        compression: None,
        skipped: Vec::new(),
        sample_ids: (0..n).collect(),
        tokens: vec![vec![1; s]; n],
        valid_lengths: vec![s; n],
    }
}

pub fn random_values(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-3.0f32..3.0)).collect()
}

pub fn random_dataset(n: usize, s: usize, n_blocks: usize, dim: usize, seed: u64) -> LatentDataset {
    let h = header(n, s, n_blocks, dim, Precision::F32);
    let values = random_values(h.numel(), seed);
    LatentDataset::from_values(h, &values).unwrap()
}

/// Box–Muller standard normal.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two isotropic Gaussian blobs (σ = 1) centred at ±(sep/2)·e₀.
pub fn two_gaussians(n: usize, d: usize, sep: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let mut r: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        r[0] += if c == 0 { sep / 2.0 } else { -sep / 2.0 };
        rows.push(r);
        labels.push(c);
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

/// Lloyd's 2-means seeded with the two mutually farthest of a few probes,
/// then the best label-matching accuracy.
pub fn two_means_purity(x: &Matrix, truth: &[usize]) -> f64 {
    let n = x.rows();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let first = x.row(0).to_vec();
    let far = (0..n)
        .max_by(|&i, &j| dist(x.row(i), &first).total_cmp(&dist(x.row(j), &first)))
        .unwrap();
    let mut centres = [first, x.row(far).to_vec()];
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for i in 0..n {
            assign[i] = usize::from(dist(x.row(i), &centres[1]) < dist(x.row(i), &centres[0]));
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..x.cols() {
                centre[j] = members.iter().map(|&i| x.get(i, j)).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let agree = (0..n).filter(|&i| assign[i] == truth[i]).count();
    agree.max(n - agree) as f64 / n as f64
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

pub fn run_config(mode: Mode, model: &ModelConfig, n: usize, seq_len: usize) -> RunConfig {
    RunConfig {
        mode,
        corpus_path: None,
        n_samples: n,
        seq_len,
        prepend_bos: false,
        capture: CaptureSpec::all(model),
        compress_to: None,
        seed: 3,
        singular_subsample: false,
    }
}

/// Captures a singular-mode dataset of the first `n` vocabulary ids from a
/// seeded synthetic model.
pub fn singular_dataset(dir: &std::path::Path, n_blocks: usize, d: usize, n: usize) -> LatentDataset {
    let cfg = small_config(n_blocks, d);
    let model = latentscope::checkpoint::synthetic_model(&cfg, 17).unwrap();
    let run = run_config(Mode::Singular, &cfg, n, 1);
    let path = dir.join("singular.latds");
    latentscope::pipeline::run_capture(&run, &model, &latentscope::tokenizer::Tokenizer::Bytes, &path).unwrap();
    LatentDataset::load(&path).unwrap()
}

/// At least `bytes` of mixed prose, code-like text, digits, whitespace runs and
/// non-ASCII scripts.
pub fn mixed_corpus(seed: u64, bytes: usize) -> String {
    let words = [
        "the", "latent", "state", "of", "a", "transformer", "is", "high-dimensional", "It's", "we'll",
        "norms", "grow", "with", "depth", "café", "naïve", "東京", "Ünïcödé", "🙂", "(x+y)*2", "{key: 'v'}",
        "3.14159", "1,000,000", "e-mail", "\"quoted\"", "tab\there", "CRLF\r\n", "\u{2014}", "¿qué?", "Привет",
        "مرحبا", "<|endoftext|>", "   ", "\n\n",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::with_capacity(bytes + 64);
    while s.len() < bytes {
        s.push_str(words.choose(&mut rng).unwrap());
        s.push_str(match rng.gen_range(0..10) {
            0 => "\n",
            1 => ". ",
            2 => ", ",
            3 => "",
            _ => " ",
        });
    }
    s
}
