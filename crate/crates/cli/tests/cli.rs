mod common;

use std::fs;
use std::path::Path;

use common::*;
use rrsearch_cli::commands::SearchBody;

/// A small synthetic corpus with trained RR artifacts.
fn pipeline(dir: &Path) -> Workspace {
    let ws = Workspace::new(dir);
    ok(run([
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--pairs",
        "60",
        "--vocab-size",
        "80",
        "--seed",
        "3",
    ]));
    let small = ["--dim", "8", "--epochs", "2", "--batch-size", "8", "--n-neg", "4"];
    ok(ws.cmd("build-vocab", &[]));
    ok(ws.cmd("train-rr", &small));
    ok(ws.cmd("build-index", &["--dim", "8"]));
    ok(ws.cmd("train-cross", &[&small[..], &["--ps-window", "10"]].concat()));
    ws
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = run(["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_exits_0() {
    let out = run(["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for sub in [
        "synth", "build-vocab", "train-dual", "train-rr", "build-index", "train-cross", "search", "eval", "sweep-k",
        "bench", "serve",
    ] {
        assert!(stdout(&out).contains(sub), "help lacks {sub}");
    }
}

#[test]
fn search_without_index_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write(dir.path(), "v.json", "{}");
    let out = run(["search", "--vocab", &vocab, "read file"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("--index"), "{err}");
    assert!(err.contains("Usage: rrsearch search"), "{err}");
}

#[test]
fn unreadable_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run([
        "build-vocab",
        "--train",
        missing.to_str().unwrap(),
        "--vocab",
        &dir.path().join("v.json").to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn malformed_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "t.jsonl", "{\"id\": 1, \"query\": \"a b\", \"code\": \"a c\"}\n");
    let vocab = dir.path().join("v.json");
    ok(run(["build-vocab", "--train", &train, "--vocab", vocab.to_str().unwrap()]));
    let bad = write(dir.path(), "bad.ckpt", "not a checkpoint");
    let out = run([
        "build-index",
        "--codebase",
        &train,
        "--vocab",
        vocab.to_str().unwrap(),
        "--dual",
        &bad,
        "--index",
        &dir.path().join("i.bin").to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("malformed"), "{}", stderr(&out));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"port": 0}"#);
    let out = run(["--config", &cfg, "serve"]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = write(dir.path(), "d.json", r#"{"no_such_field": 1}"#);
    let out = run(["--config", &cfg, "build-vocab"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    ok(run(["synth", "--out-dir", dir.path().to_str().unwrap(), "--pairs", "20"]));
    ok(ws.cmd("build-vocab", &[]));
    ok(ws.cmd("train-dual", &["--epochs", "0", "--dim", "8"]));
    let saved = rrsearch::encoders::DualEncoder::load(&dir.path().join("dual.ckpt")).unwrap();
    let vocab = rrsearch::corpus::Vocabulary::load(&dir.path().join("vocab.json")).unwrap();
    let cfg = rrsearch_cli::config::AppConfig {
        model: rrsearch_cli::config::ModelSettings {
            dim: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let init = rrsearch::encoders::DualEncoder::new(cfg.model_config(vocab.len(), 42), true).unwrap();
    // Checkpoints store f32, so compare after the same rounding.
    let rounded = rrsearch::encoders::DualEncoder::from_bytes(&init.to_bytes().unwrap()).unwrap();
    assert_eq!(saved, rounded);
}

#[test]
fn eval_reports_perfect_mrr_when_every_gold_ranks_first() {
    let dir = tempfile::tempdir().unwrap();
    let lines: String = ["open file read", "parse json value", "sort list descending", "send http request"]
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{{\"id\": {i}, \"query\": \"{t}\", \"code\": \"{t}\"}}\n"))
        .collect();
    let data = write(dir.path(), "pairs.jsonl", &lines);
    let ws = Workspace::new(dir.path());
    let common = |sub: &str, extra: &[&str]| {
        let mut args = vec![
            sub.to_string(),
            "--train".into(),
            data.clone(),
            "--test".into(),
            data.clone(),
            "--codebase".into(),
            data.clone(),
            "--vocab".into(),
            ws.path("vocab.json"),
            "--dual".into(),
            ws.path("dual.ckpt"),
            "--index".into(),
            ws.path("index.bin"),
            "--dim".into(),
            "8".into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        run(args)
    };
    ok(common("build-vocab", &[]));
    ok(common("train-dual", &["--epochs", "0"]));
    ok(common("build-index", &[]));
    let out = ok(common("eval", &["--mode", "dual", "--out", &ws.path("report.json")]));
    assert!(stdout(&out).starts_with("MRR 1.000000"), "{}", stdout(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["mrr"], 1.0);
    assert_eq!(report["queries"], 4);
}

#[test]
fn full_pipeline_and_serving() {
    let dir = tempfile::tempdir().unwrap();
    let ws = pipeline(dir.path());

    let out = ok(ws.cmd("eval", &["--k", "5"]));
    assert!(stdout(&out).contains("(rr, k=5, 6 queries over 60 codes)"), "{}", stdout(&out));

    let out = ok(ws.cmd("search", &["--k", "3", "--json", "t1 t2 t3"]));
    let body: SearchBody = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(body.query, "t1 t2 t3");
    assert_eq!(body.results.len(), 10);
    assert_eq!(body.results.iter().map(|h| h.rank).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());

    let out = ok(ws.cmd("search", &["--k", "3", "-n", "4", "t1 t2 t3"]));
    assert_eq!(stdout(&out).lines().count(), 4);

    let csv = ws.path("sweep.csv");
    ok(ws.cmd("sweep-k", &["--ks", "0,2,60", "--out", &csv]));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,mrr,mean_latency_ms"));
    assert_eq!(lines.count(), 3);

    let server = Server::start(&ws.artifact_args());
    assert_eq!(server.get("/healthz"), (200, "ok".to_string()));

    let (status, body) = server.get("/search?q=t1+t2+t3&k=3");
    assert_eq!(status, 200);
    let http: SearchBody = serde_json::from_str(&body).unwrap();
    assert_eq!(http.query, "t1 t2 t3");
    assert_eq!(
        http.results.iter().map(|h| (h.id, h.rank)).collect::<Vec<_>>(),
        body_of(&ws, &["--k", "3"], "t1 t2 t3").results.iter().map(|h| (h.id, h.rank)).collect::<Vec<_>>()
    );

    // k = 0 is the dual ranking.
    let (_, body) = server.get("/search?q=t5%20t9&k=0&n=60");
    let http: SearchBody = serde_json::from_str(&body).unwrap();
    let dual = body_of(&ws, &["--mode", "dual", "-n", "60"], "t5 t9");
    assert_eq!(http.results, dual.results);
    assert_eq!(http.results.len(), 60);

    // Results never exceed the codebase.
    let (_, body) = server.get("/search?q=t5&k=2&n=500");
    assert_eq!(serde_json::from_str::<SearchBody>(&body).unwrap().results.len(), 60);

    let (status, body) = server.get("/search?k=3");
    assert_eq!(status, 400);
    assert!(body.contains("error"));
    let (status, _) = server.get("/search?q=x&k=three");
    assert_eq!(status, 400);
    let (status, _) = server.get("/search?q=x&k=-1");
    assert_eq!(status, 400);

    // A query with no tokens is a model-side failure, reported as JSON.
    let (status, body) = server.get("/search?q=%2B%2B");
    assert_eq!(status, 500);
    let err: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("no tokens"));
}

fn body_of(ws: &Workspace, extra: &[&str], query: &str) -> SearchBody {
    let mut args: Vec<&str> = extra.to_vec();
    args.push("--json");
    args.push(query);
    serde_json::from_str(stdout(&ok(ws.cmd("search", &args))).trim()).unwrap()
}

#[test]
fn five_code_index_returns_five_ranked_results() {
    let dir = tempfile::tempdir().unwrap();
    let lines: String = ["read file", "write file", "open socket", "close socket", "read line"]
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{{\"id\": {i}, \"query\": \"{t}\", \"code\": \"{t}\"}}\n"))
        .collect();
    let data = write(dir.path(), "pairs.jsonl", &lines);
    let ws = Workspace::new(dir.path());
    let mut args: Vec<String> = vec!["--train".into(), data.clone(), "--codebase".into(), data];
    for (flag, file) in [("--vocab", "v.json"), ("--dual", "d.ckpt"), ("--cross", "c.ckpt"), ("--index", "i.bin")] {
        args.push(flag.into());
        args.push(ws.path(file));
    }
    args.extend(["--dim".to_string(), "8".to_string()]);
    let with = |sub: &str, extra: &[&str]| {
        let mut a = vec![sub.to_string()];
        a.extend(args.iter().cloned());
        a.extend(extra.iter().map(|s| s.to_string()));
        ok(run(a))
    };
    with("build-vocab", &[]);
    with("train-rr", &["--epochs", "1", "--batch-size", "5"]);
    with("build-index", &[]);
    let server = Server::start(&args);
    let (status, body) = server.get("/search?q=read+file&k=5");
    assert_eq!(status, 200);
    let body: SearchBody = serde_json::from_str(&body).unwrap();
    assert_eq!(body.results.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn config_file_supplies_paths_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(["synth", "--out-dir", dir.path().to_str().unwrap(), "--pairs", "20"]));
    let ws = Workspace::new(dir.path());
    let cfg = serde_json::json!({
        "paths": {
            "train": ws.path("train.jsonl"),
            "vocab": ws.path("vocab.json"),
            "dual": ws.path("from-config.ckpt"),
        },
        "model": {"dim": 4},
        "training": {"epochs": 7},
    });
    let cfg_path = write(dir.path(), "cfg.json", &cfg.to_string());
    ok(run(["--config", &cfg_path, "build-vocab"]));
    let out = ok(run([
        "--config",
        &cfg_path,
        "train-dual",
        "--epochs",
        "1",
        "--batch-size",
        "6",
        "--dual",
        &ws.path("from-flag.ckpt"),
    ]));
    assert_eq!(stdout(&out).matches("dual epoch").count(), 1);
    assert!(!dir.path().join("from-config.ckpt").exists());
    let dual = rrsearch::encoders::DualEncoder::load(&dir.path().join("from-flag.ckpt")).unwrap();
    assert_eq!(dual.dim(), 4);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    ok(run([
        "bench",
        "--sizes",
        "20,40",
        "--queries",
        "2",
        "--repetitions",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("size,mode,queries,repetitions,mean_ms,median_ms,p95_ms,median_min_ms,median_max_ms")
    );
    assert_eq!(lines.count(), 6);
}
