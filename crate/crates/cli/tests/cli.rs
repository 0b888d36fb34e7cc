//! End-to-end tests of the `skillmatch` binary: the full pipeline, flag
//! precedence, exit codes, and CLI/server parity.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use skillmatch_core::corpus::load_corpus;
use skillmatch_core::evaluation::EvalReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skillmatch"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawning skillmatch");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path_str(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Runs synth → train → encode → index-build in `dir` with tiny settings,
/// returning (corpus, checkpoint, profile embeddings, index) paths.
fn build_artifacts(dir: &Path) -> (String, String, String, String) {
    let corpus = path_str(dir, "corpus.jsonl");
    let ckpt = path_str(dir, "model.ckpt");
    let emb = path_str(dir, "profiles.jsonl");
    let index = path_str(dir, "profiles.idx");
    run_ok(&[
        "synth", "--out", &corpus, "--seed", "3", "--categories", "3", "--freelancers", "30",
        "--projects", "8", "--skills-per-category", "8", "--skills-per-profile", "4",
        "--mandatory-skills", "3", "--bonus-skills", "1",
    ]);
    run_ok(&[
        "train", "--corpus", &corpus, "--out", &ckpt, "--loss", "infonce", "--epochs", "1",
        "--d-model", "16", "--heads", "2", "--head-layers", "1", "--ff-dim", "32",
        "--backbone-layers", "1", "--test-fraction", "0.25", "--seed", "0",
    ]);
    run_ok(&["encode", "--checkpoint", &ckpt, "--corpus", &corpus, "--side", "profiles", "--out", &emb]);
    run_ok(&["index-build", "--embeddings", &emb, "--out", &index]);
    (corpus, ckpt, emb, index)
}

/// Writes one corpus document as a standalone JSON file and returns
/// (path, category).
fn write_probe(dir: &Path, corpus: &str, doc_id: &str) -> (String, String) {
    let loaded = load_corpus(Path::new(corpus)).unwrap();
    let doc = loaded.document(doc_id).expect("probe document exists");
    let path = path_str(dir, "probe.json");
    fs::write(&path, serde_json::to_string(doc).unwrap()).unwrap();
    (path, doc.category.clone())
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let (corpus, ckpt, emb, index) = build_artifacts(dir);

    // Deterministic re-runs: byte-identical corpus and checkpoint.
    let corpus2 = path_str(dir, "corpus2.jsonl");
    run_ok(&[
        "synth", "--out", &corpus2, "--seed", "3", "--categories", "3", "--freelancers", "30",
        "--projects", "8", "--skills-per-category", "8", "--skills-per-profile", "4",
        "--mandatory-skills", "3", "--bonus-skills", "1",
    ]);
    assert_eq!(fs::read(&corpus).unwrap(), fs::read(&corpus2).unwrap(), "synth not deterministic");
    let ckpt2 = path_str(dir, "model2.ckpt");
    run_ok(&[
        "train", "--corpus", &corpus, "--out", &ckpt2, "--loss", "infonce", "--epochs", "1",
        "--d-model", "16", "--heads", "2", "--head-layers", "1", "--ff-dim", "32",
        "--backbone-layers", "1", "--test-fraction", "0.25", "--seed", "0",
    ]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap(), "train not deterministic");

    // The embeddings file round-trips with the declared dimension.
    let (header, items) = skillmatch_cli::files::load_embeddings(Path::new(&emb)).unwrap();
    assert_eq!(header.dim, 16);
    assert_eq!(items.len(), 30);

    // Identity probe: retrieving with an indexed profile's own document
    // ranks that profile first with a perfect cosine score.
    let (probe, probe_category) = write_probe(dir, &corpus, "f00007");
    let out = run_ok(&[
        "retrieve", "--checkpoint", &ckpt, "--index", &index, "--document", &probe, "--k", "5",
        "--mode", "exact",
    ]);
    let response: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let results = response["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    assert_eq!(results[0]["doc_id"], "f00007");
    assert_eq!(results[0]["score"], 1.0);

    // A filter naming a different category must exclude the probe.
    let other = if probe_category == "cat0" { "cat1" } else { "cat0" };
    let filter = format!("{{\"category\":\"{other}\"}}");
    let out = run_ok(&[
        "retrieve", "--checkpoint", &ckpt, "--index", &index, "--document", &probe, "--k", "5",
        "--filter", &filter, "--mode", "exact",
    ]);
    let response: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for hit in response["results"].as_array().unwrap() {
        assert_ne!(hit["doc_id"], "f00007");
    }

    // Eval prints the metric table and writes a parseable JSON report.
    let report_path = path_str(dir, "report.json");
    let out = run_ok(&[
        "eval", "--checkpoint", &ckpt, "--corpus", &corpus, "--test-fraction", "0.25", "--ks",
        "5,10", "--retrieval-k", "10", "--out", &report_path,
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("overall"), "missing table:\n{table}");
    assert!(table.contains("recall_single"), "missing header:\n{table}");
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.overall.projects > 0);
    assert_eq!(report.retrieval_k, 10);

    // Export: one CSV row per embedding plus a header, tags in column two.
    let csv_path = path_str(dir, "proj.csv");
    run_ok(&["export-embeddings", "--embeddings", &emb, "--out", &csv_path]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines[0].starts_with("id,tag,v0,"));
    assert!(lines[1].starts_with("f00000,cat"));
}

#[test]
fn invalid_flags_print_usage_and_exit_2() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "stderr: {stderr}");

    let out = bin().args(["retrieve", "--k", "notanumber"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["synth", "--no-such-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Runtime failures (missing files) are ordinary errors, not usage errors.
    let out = bin().args(["encode", "--checkpoint", "/nonexistent", "--corpus", "/nonexistent",
        "--side", "profiles", "--out", "/tmp/never.jsonl"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let config = path_str(dir, "synth.json");
    fs::write(&config, r#"{"n_freelancers": 12, "n_projects": 4, "n_categories": 2}"#).unwrap();

    // File values apply where no flag is given; the flag wins where it is.
    let corpus = path_str(dir, "corpus.jsonl");
    run_ok(&["synth", "--out", &corpus, "--config", &config, "--freelancers", "18"]);
    let loaded = load_corpus(Path::new(&corpus)).unwrap();
    assert_eq!(loaded.profiles().count(), 18, "flag should beat config file");
    assert_eq!(loaded.proposals().count(), 4, "config file should beat default (200)");

    // Same mechanism on train: config asks for 2 epochs, the flag forces 1.
    let train_config = path_str(dir, "train.json");
    fs::write(
        &train_config,
        r#"{"epochs": 2, "d_model": 16, "heads": 2, "head_layers": 1, "ff_dim": 32, "backbone_layers": 1}"#,
    )
    .unwrap();
    let ckpt = path_str(dir, "model.ckpt");
    let hist = path_str(dir, "hist.csv");
    run_ok(&[
        "train", "--corpus", &corpus, "--out", &ckpt, "--history", &hist, "--config",
        &train_config, "--epochs", "1",
    ]);
    let history = fs::read_to_string(&hist).unwrap();
    let max_epoch = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .max()
        .unwrap();
    assert_eq!(max_epoch, 1, "flag epochs=1 should beat config epochs=2");

    // Unknown fields in a config file are rejected, not ignored.
    let bad = path_str(dir, "bad.json");
    fs::write(&bad, r#"{"epochz": 3}"#).unwrap();
    let out = bin()
        .args(["train", "--corpus", &corpus, "--out", &ckpt, "--config", &bad])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Spawns `serve --port 0` and reads the bound address off stdout.
struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(ckpt: &str, index: &str) -> Server {
        let mut child = bin()
            .args(["serve", "--checkpoint", ckpt, "--index", index, "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawning serve");
        let stdout = child.stdout.take().unwrap();
        let mut lines = BufReader::new(stdout).lines();
        let deadline = Instant::now() + Duration::from_secs(30);
        let base = loop {
            if let Some(Ok(line)) = lines.next() {
                if let Some(addr) = line.strip_prefix("listening on ") {
                    break addr.trim().to_string();
                }
            }
            assert!(Instant::now() < deadline, "server never announced its address");
        };
        Server { child, base }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn serve_matches_cli_retrieval_and_maps_errors() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let (corpus, ckpt, _emb, index) = build_artifacts(dir);
    let (probe, _) = write_probe(dir, &corpus, "f00004");
    let server = Server::start(&ckpt, &index);
    let client = reqwest::blocking::Client::new();
    let get = |path: &str| client.get(format!("{}{path}", server.base)).send().unwrap();
    let post = |path: &str, body: String| {
        client.post(format!("{}{path}", server.base)).body(body).send().unwrap()
    };

    // Health.
    let resp = get("/healthz");
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.text().unwrap(), "ok");

    // Encode returns a vector of the model's width.
    let doc = fs::read_to_string(&probe).unwrap();
    let resp = post("/encode", doc.clone());
    assert_eq!(resp.status().as_u16(), 200);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["dim"], 16);
    assert_eq!(body["vector"].as_array().unwrap().len(), 16);
    assert_eq!(body["doc_id"], "f00004");

    // Parity: /retrieve equals CLI retrieve on identical inputs.
    let request = format!(r#"{{"document": {doc}, "k": 4, "mode": "exact"}}"#);
    let served: serde_json::Value = post("/retrieve", request).json().unwrap();
    let out = run_ok(&[
        "retrieve", "--checkpoint", &ckpt, "--index", &index, "--document", &probe, "--k", "4",
        "--mode", "exact",
    ]);
    let cli: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(served, cli, "server and CLI retrieval disagree");

    // Malformed bodies are 400s with an error message.
    let resp = post("/retrieve", "not json".into());
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = resp.json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("bad retrieve request"));
    let resp = post("/encode", "{\"id\": 5}".into());
    assert_eq!(resp.status().as_u16(), 400);

    // A filter matching nothing is a 200 with an empty list.
    let request = format!(r#"{{"document": {doc}, "k": 4, "filter": {{"category": "nothing"}}}}"#);
    let resp = post("/retrieve", request);
    assert_eq!(resp.status().as_u16(), 200);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["results"].as_array().unwrap().len(), 0);
}

#[test]
fn serve_reports_dimension_mismatch_as_500() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let (corpus, ckpt, _emb, _index) = build_artifacts(dir);
    let (probe, _) = write_probe(dir, &corpus, "f00001");

    // An index of 3-dim vectors behind a 16-dim model.
    let items: Vec<skillmatch_core::evaluation::EvalItem> = (0..4)
        .map(|i| skillmatch_core::evaluation::EvalItem {
            id: format!("x{i}"),
            vector: vec![i as f32, 1.0, 0.0],
            category: "cat0".into(),
            skills: Default::default(),
            language: "lang0".into(),
        })
        .collect();
    let small = PathBuf::from(path_str(dir, "small.jsonl"));
    skillmatch_cli::files::save_embeddings(&small, skillmatch_core::corpus::DocumentKind::Profile, &items)
        .unwrap();
    let small_index = path_str(dir, "small.idx");
    run_ok(&["index-build", "--embeddings", small.to_str().unwrap(), "--out", &small_index]);

    let server = Server::start(&ckpt, &small_index);
    let doc = fs::read_to_string(&probe).unwrap();
    let client = reqwest::blocking::Client::new();
    let resp = client
        .post(format!("{}/retrieve", server.base))
        .body(format!(r#"{{"document": {doc}, "k": 2}}"#))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 500);
    let body: serde_json::Value = resp.json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("dimension mismatch"));

    // The same mismatch fails the CLI path with a nonzero exit.
    let out = bin()
        .args(["retrieve", "--checkpoint", &ckpt, "--index", &small_index, "--document", &probe])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}
