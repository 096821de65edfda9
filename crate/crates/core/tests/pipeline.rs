mod common;

use std::path::Path;

use common::{run_config, small_config};
use latentscope::checkpoint::synthetic_model;
use latentscope::model::{forward_with, CaptureSpec, Model};
use latentscope::pipeline::{reducer_path_for, run_capture, Mode, RunConfig};
use latentscope::reduce::{reducer_load, Reducer};
use latentscope::store::LatentDataset;
use latentscope::tokenizer::Tokenizer;
use latentscope::Error;

fn corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.txt");
    let text = "Residual streams accumulate every block's contribution. ".repeat(40);
    std::fs::write(&path, text).unwrap();
    path
}

fn text_run(dir: &Path, model: &Model, n: usize, seq_len: usize) -> RunConfig {
    let mut run = run_config(Mode::Text, &model.config, n, seq_len);
    run.corpus_path = Some(corpus(dir));
    run
}

#[test]
fn stored_vectors_equal_a_direct_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2, 16);
    let model = synthetic_model(&cfg, 4).unwrap();
    let run = text_run(dir.path(), &model, 6, 12);
    let out = dir.path().join("t.latds");
    let summary = run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap();
    assert_eq!(summary.shape, [6, 12, 14, 16]);
    let ds = LatentDataset::load(&out).unwrap();
    let h = ds.header();
    let spec = CaptureSpec::all(&cfg);

    let text = std::fs::read(run.corpus_path.as_ref().unwrap()).unwrap();
    let mut last_end = 0;
    for (s, row) in h.tokens.iter().enumerate() {
        // each window is a contiguous, non-overlapping slice of the corpus
        let bytes: Vec<u8> = row.iter().map(|&t| t as u8).collect();
        let start = (last_end..text.len()).find(|&i| text[i..].starts_with(&bytes)).unwrap();
        last_end = start + bytes.len();

        let fwd = forward_with(&model.weights, &cfg, row, &spec, false).unwrap();
        for (c, (_, m)) in fwd.captures.iter().enumerate() {
            for p in 0..row.len() {
                let want: Vec<f64> = m.row(p).iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(ds.vector(s, p, c), want);
            }
        }
    }
}

#[test]
fn capture_is_reproducible_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2, 16);
    let model = synthetic_model(&cfg, 4).unwrap();
    let run = text_run(dir.path(), &model, 9, 8);
    let mut files = Vec::new();
    for (i, threads) in [1, 1, 3, 8].into_iter().enumerate() {
        let out = dir.path().join(format!("{i}.latds"));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap());
        files.push(std::fs::read(&out).unwrap());
    }
    assert!(files.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn singular_mode_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(3, 8);
    let model = synthetic_model(&cfg, 1).unwrap();
    let mut run = run_config(Mode::Singular, &cfg, 40, 1);
    let out = dir.path().join("s.latds");
    let s = run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap();
    assert_eq!(s.shape, [40, 1, 6 * 3 + 2, 8]);

    run.prepend_bos = true;
    let s = run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap();
    assert_eq!(s.shape, [40, 2, 20, 8]);
    let ds = LatentDataset::load(&out).unwrap();
    assert!(ds.header().tokens.iter().enumerate().all(|(i, t)| t == &vec![299, i as u32]));

    run.prepend_bos = false;
    run.singular_subsample = true;
    run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap();
    let ids: Vec<u32> = LatentDataset::load(&out).unwrap().header().tokens.iter().map(|t| t[0]).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_ne!(ids, (0..40).collect::<Vec<u32>>());
}

#[test]
fn compression_stores_the_projection_and_its_basis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2, 16);
    let model = synthetic_model(&cfg, 4).unwrap();
    let raw_out = dir.path().join("raw.latds");
    let run = text_run(dir.path(), &model, 5, 10);
    run_capture(&run, &model, &Tokenizer::Bytes, &raw_out).unwrap();

    let mut packed = run.clone();
    packed.compress_to = Some(4);
    let out = dir.path().join("c.latds");
    let s = run_capture(&packed, &model, &Tokenizer::Bytes, &out).unwrap();
    assert_eq!(s.shape, [5, 10, 14, 4]);
    assert_eq!(s.reducer_path.as_deref(), Some(reducer_path_for(&out).as_path()));
    let ds = LatentDataset::load(&out).unwrap();
    assert!(ds.header().compressed);
    assert_eq!(ds.header().compression.as_ref().unwrap().from_dim, 16);

    let Reducer::Pca(pca) = reducer_load(reducer_path_for(&out)).unwrap() else {
        panic!("expected a PCA reducer");
    };
    let raw = LatentDataset::load(&raw_out).unwrap();
    let (rows, _) = raw.view().to_rows();
    let proj = pca.transform(&rows).unwrap();
    let (packed_rows, _) = ds.view().to_rows();
    for (a, b) in proj.data().iter().zip(packed_rows.data()) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
    }
    // no temporary files left behind
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 4, "{names:?}");
}

#[test]
fn invalid_runs_are_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1, 8);
    let model = synthetic_model(&cfg, 0).unwrap();
    let out = dir.path().join("x.latds");
    let mut run = text_run(dir.path(), &model, 2, 4);
    run.compress_to = Some(8);
    assert!(matches!(run_capture(&run, &model, &Tokenizer::Bytes, &out), Err(Error::Validation(_))));
    let mut run = run_config(Mode::Singular, &cfg, 2, 3);
    assert!(run_capture(&run, &model, &Tokenizer::Bytes, &out).is_err());
    run.seq_len = 1;
    run.n_samples = 301;
    assert!(run_capture(&run, &model, &Tokenizer::Bytes, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn short_corpus_is_padded_and_masked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1, 8);
    let model = synthetic_model(&cfg, 0).unwrap();
    let path = dir.path().join("short.txt");
    std::fs::write(&path, "hey").unwrap();
    let mut run = run_config(Mode::Text, &cfg, 2, 6);
    run.corpus_path = Some(path);
    let out = dir.path().join("p.latds");
    run_capture(&run, &model, &Tokenizer::Bytes, &out).unwrap();
    let ds = LatentDataset::load(&out).unwrap();
    assert_eq!(ds.header().valid_lengths, vec![3, 3]);
    for p in 3..6 {
        assert!(ds.vector(0, p, 0).iter().all(|v| *v == 0.0));
    }
}
