use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::Value;

fn trajdemo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajdemo"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn trajdemo")
}

fn ok(args: &[&str]) -> String {
    let out = trajdemo(args);
    assert!(
        out.status.success(),
        "trajdemo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("generated_at");
    v
}

fn synth(dir: &Path, n: usize) -> String {
    let data = dir.join("data");
    ok(&["synth", "--n", &n.to_string(), "--seed", "7", "--out", data.to_str().unwrap()]);
    data.to_str().unwrap().to_string()
}

#[test]
fn synth_then_mock_inference_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 30);
    let out = dir.path().join("run");
    let rules = Path::new(&data).join("generator.json");
    let stdout = ok(&[
        "infer",
        "--data",
        &data,
        "--mock",
        "--mock-rules",
        rules.to_str().unwrap(),
        "--attribute",
        "income",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("report:"), "{stdout}");
    let report = read_json(&out.join("report.json"));
    let income = &report["attributes"]["income"];
    assert_eq!(income["n"], 30);
    assert!(income["accuracy"].as_f64().unwrap() >= 0.95, "{income}");
    assert_eq!(income["parse_failure_rate"], 0.0);
    assert!(out.join("report.md").exists());
    assert!(out.join("predictions.jsonl").exists());
    assert!(out.join("transcripts").join("income").join("full").is_dir());

    // eval recomputes the same metrics from the predictions file
    let eval: Value = serde_json::from_str(&ok(&["eval", "--predictions", out.join("predictions.jsonl").to_str().unwrap()])).unwrap();
    assert_eq!(eval["full"]["income"]["accuracy"], income["accuracy"]);
    assert_eq!(eval["full"]["income"]["macro_f1"], income["macro_f1"]);
}

#[test]
fn ingest_and_narrate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let summary: Value = serde_json::from_str(&ok(&["ingest", "--data", &data])).unwrap();
    assert_eq!(summary["labels"], 5);
    assert_eq!(summary["agents_with_visits"], 5);

    let out = dir.path().join("narratives");
    ok(&["narrate", "--data", &data, "--sample", "2", "--seed", "1", "--out", out.to_str().unwrap()]);
    let texts: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".narrative.txt"))
        .collect();
    assert_eq!(texts.len(), 2);
    let text = std::fs::read_to_string(texts[0].path()).unwrap();
    assert!(text.contains("Average activities on weekdays:"), "{text}");
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajdemo(&["infer", "--mock", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = trajdemo(&["infer", "--mock", "--backend", "x.toml", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_reports_json_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = trajdemo(&[
        "infer",
        "--data",
        missing.to_str().unwrap(),
        "--mock",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let body: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    assert!(body["error"].as_str().unwrap().contains("nope"), "{body}");
    assert!(body["kind"].is_string());
}

#[test]
fn ablation_replays_from_recorded_cache() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 12);
    let cache = dir.path().join("cache.jsonl");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let run = |out: &Path, cache_flag: &str| {
        ok(&[
            "ablate",
            "--data",
            &data,
            "--mock",
            "--mock-evidence",
            "stage1-only",
            "--attribute",
            "income,age",
            cache_flag,
            cache.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    run(&first, "--record");
    run(&second, "--replay");
    assert_eq!(
        without_timestamp(read_json(&first.join("ablation.json"))),
        without_timestamp(read_json(&second.join("ablation.json")))
    );
    for variant in ["full", "no_s1", "no_s2"] {
        assert_eq!(
            std::fs::read(first.join(variant).join("predictions.jsonl")).unwrap(),
            std::fs::read(second.join(variant).join("predictions.jsonl")).unwrap(),
            "{variant}"
        );
    }
}

/// Chat-completion stub answering every request with an income answer block.
struct Stub {
    addr: String,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Stub {
    fn start() -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (h, s) = (hits.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let mut reader = BufReader::new(stream.unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line.trim_end().is_empty() {
                        break;
                    }
                    if let Some((name, value)) = line.split_once(':') {
                        if name.eq_ignore_ascii_case("content-length") {
                            length = value.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                h.fetch_add(1, Ordering::SeqCst);
                // echo a digest of the request so every distinct prompt gets a distinct reply
                let mut hasher = DefaultHasher::new();
                body.hash(&mut hasher);
                let answer = format!(
                    "PREDICTION: Middle\nCONFIDENCE: 3\nINDICATORS: 5,5,5,5,5\nALTERNATIVES: Low\nREASONING: stub {:x}",
                    hasher.finish()
                );
                let payload = serde_json::json!({"choices": [{"message": {"content": answer}}]}).to_string();
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Stub {
            addr,
            hits,
            stop,
            handle: Some(handle),
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        self.handle.take().unwrap().join().unwrap();
    }
}

#[test]
fn live_run_replays_after_server_is_gone() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let mut stub = Stub::start();
    let backend = dir.path().join("backend.toml");
    std::fs::write(
        &backend,
        format!(
            "endpoint = \"http://{}\"\nmodel = \"stub-model\"\ntimeout_secs = 5\n\n[retry]\nmax_attempts = 1\n",
            stub.addr
        ),
    )
    .unwrap();
    let cache = dir.path().join("cache.jsonl");
    let first = dir.path().join("first");
    ok(&[
        "infer",
        "--data",
        &data,
        "--backend",
        backend.to_str().unwrap(),
        "--record",
        cache.to_str().unwrap(),
        "--parallel",
        "2",
        "--out",
        first.to_str().unwrap(),
    ]);
    stub.shutdown();
    // six agents, three stages each
    assert_eq!(stub.hits.load(Ordering::SeqCst), 18);

    let second = dir.path().join("second");
    ok(&[
        "replay",
        "--run",
        first.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(
        without_timestamp(read_json(&first.join("report.json"))),
        without_timestamp(read_json(&second.join("report.json")))
    );
    let report = read_json(&second.join("report.json"));
    assert_eq!(report["model"], "stub-model");
    assert_eq!(report["attributes"]["income"]["n"], 6);
}
