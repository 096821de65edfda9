use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentscope"));
    c.env_remove("LATENTSCOPE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> (Value, Value) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap());
    let config = lines.next().unwrap();
    let summary = lines.next().unwrap();
    assert!(config.get("config").is_some() && summary.get("summary").is_some());
    (config, summary["summary"].clone())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 2-block, 16-wide synthetic checkpoint and a short corpus.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let model = dir.join("model.safetensors");
    ok(&["gen-synthetic", "--out", p(&model), "--n-blocks", "2", "--d-model", "16", "--n-heads", "2", "--vocab-size", "300", "--seed", "1"]);
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, "Latent states drift as depth grows; norms follow. ".repeat(30)).unwrap();
    (model, corpus)
}

fn capture_text(dir: &Path, model: &Path, corpus: &Path, out: &str, extra: &[&str]) -> (Value, Value) {
    let out = dir.join(out);
    let mut args = vec!["capture", "--model", p(model), "--mode", "text", "--corpus", p(corpus), "--samples", "6", "--seqlen", "10", "--seed", "2", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn singular_capture_has_one_row_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = setup(dir.path());
    let out = dir.path().join("s.latds");
    let (_, s) = ok(&["capture", "--model", p(&model), "--mode", "singular", "--samples", "256", "--out", p(&out)]);
    assert_eq!(s["shape"], serde_json::json!([256, 1, 14, 16]));
    let (_, info) = ok(&["info", p(&out)]);
    assert_eq!(info["kind"], "latds");
    assert_eq!(info["shape"], serde_json::json!([256, 1, 14, 16]));
    assert_eq!(info["header"]["run"]["mode"], "singular");

    let csv = dir.path().join("tok.csv");
    let (_, s) = ok(&["analyze", "norms", p(&out), "--by", "token", "--bins", "8", "--out", p(&csv)]);
    assert_eq!(s["tokens"], 256);
    let text = std::fs::read_to_string(&csv).unwrap();
    let total: usize = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 256);
}

#[test]
fn text_capture_is_reproducible_and_config_can_be_replayed() {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus) = setup(dir.path());
    let (config, first) = capture_text(dir.path(), &model, &corpus, "a.latds", &[]);
    let a = std::fs::read(dir.path().join("a.latds")).unwrap();
    capture_text(dir.path(), &model, &corpus, "a.latds", &[]);
    assert_eq!(std::fs::read(dir.path().join("a.latds")).unwrap(), a);

    // the echoed config alone reproduces the run
    let cfg_path = dir.path().join("capture.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    std::fs::remove_file(dir.path().join("a.latds")).unwrap();
    let (config2, second) = ok(&["--config", p(&cfg_path), "capture"]);
    assert_eq!(config2, config);
    assert_eq!(second, first);
    assert_eq!(std::fs::read(dir.path().join("a.latds")).unwrap(), a);

    // flags still override the file
    let (c3, _) = ok(&["--config", p(&cfg_path), "capture", "--samples", "3"]);
    assert_eq!(c3["config"]["capture"]["samples"], 3);
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus) = setup(dir.path());
    let mut files = Vec::new();
    for (i, t) in ["1", "4"].iter().enumerate() {
        let name = format!("t{i}.latds");
        capture_text(dir.path(), &model, &corpus, &name, &["--threads", t]);
        files.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    capture_text(dir.path(), &model, &corpus, "d.latds", &["--deterministic"]);
    files.push(std::fs::read(dir.path().join("d.latds")).unwrap());
    let env = bin()
        .env("LATENTSCOPE_THREADS", "3")
        .args(["capture", "--model", p(&model), "--mode", "text", "--corpus", p(&corpus), "--samples", "6", "--seqlen", "10", "--seed", "2", "--out", p(&dir.path().join("e.latds"))])
        .output()
        .unwrap();
    assert!(env.status.success());
    files.push(std::fs::read(dir.path().join("e.latds")).unwrap());
    assert!(files.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn compressed_datasets_cannot_be_analysed() {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus) = setup(dir.path());
    let (_, s) = capture_text(dir.path(), &model, &corpus, "c.latds", &["--compress-to", "4"]);
    assert_eq!(s["shape"][3], 4);
    let reducer = s["reducer_path"].as_str().unwrap();
    let (_, info) = ok(&["info", reducer]);
    assert_eq!(info["kind"], "redm");
    assert_eq!(info["output_dim"], 4);

    let out = run(&["analyze", "norms", p(&dir.path().join("c.latds")), "--by", "position", "--out", p(&dir.path().join("n.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("compress"));
}

#[test]
fn reduce_then_plot_a_pair_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus) = setup(dir.path());
    capture_text(dir.path(), &model, &corpus, "a.latds", &[]);
    let ds = dir.path().join("a.latds");
    let pts = dir.path().join("pts.csv");
    let (_, s) = ok(&["reduce", p(&ds), "--method", "pca", "--dims", "6", "--unit", "--mean-over", "sample,capture", "--out", p(&pts)]);
    assert_eq!(s["rows"], 10);
    assert_eq!(s["dims"], 6);
    let header = std::fs::read_to_string(&pts).unwrap();
    assert!(header.starts_with("sample,position,capture,d0,d1,d2,d3,d4,d5\n"), "{header}");

    let svg = dir.path().join("grid.svg");
    let (_, s) = ok(&["plot", p(&pts), "--grid-pairs", "--out", p(&svg)]);
    assert_eq!(s["kind"], "pair_grid");
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<g class=\"panel\"").count(), 15);

    // the same plot twice is byte-identical, and limits carry over
    let again = dir.path().join("again.svg");
    ok(&["plot", p(&pts), "--grid-pairs", "--out", p(&again)]);
    assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());
    let reused = dir.path().join("reused.svg");
    ok(&["plot", p(&pts), "--grid-pairs", "--limits-from", p(&svg), "--out", p(&reused)]);
    let lims = |s: &str| latentscope::plot::limits_from_svg(s).unwrap();
    assert_eq!(lims(&std::fs::read_to_string(&reused).unwrap()), lims(&text));

    // the saved reducer projects a second dataset
    let reducer = dir.path().join("pts.redm");
    let out2 = dir.path().join("pts2.csv");
    let (_, s2) = ok(&["reduce", p(&ds), "--reuse-reducer", p(&reducer), "--unit", "--mean-over", "sample,capture", "--out", p(&out2)]);
    assert_eq!(s2["fit_rows"], 0);
    assert_eq!(std::fs::read(&out2).unwrap(), std::fs::read(&pts).unwrap());
}

#[test]
fn norms_line_plot_by_position() {
    let dir = tempfile::tempdir().unwrap();
    let (model, corpus) = setup(dir.path());
    capture_text(dir.path(), &model, &corpus, "a.latds", &[]);
    let csv = dir.path().join("n.csv");
    let svg = dir.path().join("n.svg");
    let (_, s) = ok(&["analyze", "norms", p(&dir.path().join("a.latds")), "--by", "position", "--blocks", "0-1", "--out", p(&csv), "--svg", p(&svg)]);
    assert_eq!(s["rows"], 10);
    let (_, s) = ok(&["plot", p(&csv), "--out", p(&dir.path().join("n2.svg"))]);
    assert_eq!(s["kind"], "line");
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(run(&["capture", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["reduce"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    // io
    let missing = dir.path().join("nope.latds");
    let out = run(&["info", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.latds"));
    // validation
    let (model, _) = setup(dir.path());
    let out = run(&["capture", "--model", p(&model), "--mode", "singular", "--samples", "301", "--out", p(&dir.path().join("x.latds"))]);
    assert_eq!(out.status.code(), Some(3));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"hello").unwrap();
    assert_eq!(run(&["info", p(&junk)]).status.code(), Some(3));
}
