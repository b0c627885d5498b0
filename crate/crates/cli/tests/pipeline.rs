use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use tta_cli::{
    cmd_augment, cmd_report, cmd_run, cmd_synth, AugmentArgs, CliError, ReportArgs, RunArgs, RunConfig, RunOutcome,
    SynthArgs,
};
use tta_core::experiment::{ExperimentConfig, Mode};
use tta_core::transcriber::EndpointConfig;

fn dataset(dir: &Path, records: usize) -> PathBuf {
    let data = dir.join("data");
    cmd_synth(&SynthArgs {
        out: data.clone(),
        records,
        seed: 5,
        lexicon: None,
    })
    .unwrap();
    data.join("manifest.json")
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reports(out: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    snapshot(&out.join("report"))
        .into_iter()
        .map(|(p, b)| (p.file_name().unwrap().into(), b))
        .collect()
}

struct FakeServer {
    url: String,
    requests: Arc<AtomicUsize>,
    connections: Arc<AtomicUsize>,
    first_body: Arc<Mutex<Option<(String, String)>>>,
}

/// Minimal HTTP/1.1 endpoint. Answers the first request with 429 to
/// exercise the retry path, then a fixed six-field reply.
fn fake_server() -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/extract", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let connections = Arc::new(AtomicUsize::new(0));
    let first_body = Arc::new(Mutex::new(None));
    let (req, conn, body_slot) = (requests.clone(), connections.clone(), first_body.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            conn.fetch_add(1, Ordering::SeqCst);
            let (req, body_slot) = (req.clone(), body_slot.clone());
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut writer = stream;
                loop {
                    let mut length = 0usize;
                    let mut auth = String::new();
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    loop {
                        line.clear();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let trimmed = line.trim_end();
                        if trimmed.is_empty() {
                            break;
                        }
                        let lower = trimmed.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            length = v.trim().parse().unwrap();
                        }
                        if lower.starts_with("authorization:") {
                            auth = trimmed["authorization:".len()..].trim().to_owned();
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    let n = req.fetch_add(1, Ordering::SeqCst);
                    let mut slot = body_slot.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some((auth, String::from_utf8(body).unwrap()));
                    }
                    drop(slot);
                    let (status, payload) = if n == 0 {
                        ("429 Too Many Requests", "{}".to_owned())
                    } else {
                        let inner = r#"{"SelfGivenName":"Nydia","SelfSurname":"Brown","MotherGivenName":"Helen","MotherSurname":null,"FatherGivenName":"Carl"}"#;
                        (
                            "200 OK",
                            serde_json::json!({ "output": format!("```json\n{inner}\n```") }).to_string(),
                        )
                    };
                    let resp = format!(
                        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{payload}",
                        payload.len()
                    );
                    if writer.write_all(resp.as_bytes()).is_err() {
                        return;
                    }
                }
            });
        }
    });
    FakeServer {
        url,
        requests,
        connections,
        first_body,
    }
}

fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        categories: vec!["pad".into()],
        k_folds: 2,
        ensemble_sizes: vec![3],
        ..Default::default()
    }
}

fn endpoint(url: &str, key_env: &str) -> EndpointConfig {
    EndpointConfig {
        api_key_env: key_env.into(),
        base_backoff_ms: 1,
        max_backoff_ms: 5,
        requests_per_second: 10_000.0,
        ..EndpointConfig::new(url, "test-model")
    }
}

fn config(manifest: &Path, mode: Mode, out: &Path) -> RunConfig {
    RunConfig {
        manifest: manifest.to_owned(),
        mode,
        seed: Some(1),
        experiment: small_experiment(),
        endpoint: None,
        cache: None,
        parallelism: 2,
        out: out.to_owned(),
    }
}

#[test]
fn dry_run_counts_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 3);
    let c = RunConfig::resolve(&RunArgs {
        manifest: Some(manifest),
        mode: Some(Mode::Live),
        categories: vec!["pad".into(), "temp-0.5".into()],
        out: Some(tmp.path().join("out")),
        ..Default::default()
    })
    .unwrap();
    let planned = cmd_run(&c, true).unwrap();
    assert_eq!(
        planned,
        RunOutcome::Planned {
            requests: 3 * 41,
            records: 3,
            members: 41
        }
    );
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn live_then_offline_replay_without_network() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 4);
    let before = snapshot(&tmp.path().join("data"));
    let server = fake_server();
    std::env::set_var("TTA_TEST_KEY_LIVE", "secret-token");

    let live_out = tmp.path().join("live");
    let mut live = config(&manifest, Mode::Live, &live_out);
    live.endpoint = Some(endpoint(&server.url, "TTA_TEST_KEY_LIVE"));
    cmd_run(&live, false).unwrap();
    // 4 records x (20 pad specs + baseline), plus the rejected first attempt.
    assert_eq!(server.requests.load(Ordering::SeqCst), 4 * 21 + 1);
    let (auth, body) = server.first_body.lock().unwrap().clone().unwrap();
    assert_eq!(auth, "Bearer secret-token");
    let body: serde_json::Value = serde_json::from_str(&body).unwrap();
    for key in ["model", "prompt", "image", "temperature", "top_p"] {
        assert!(body.get(key).is_some(), "request lacks {key}");
    }
    assert_eq!(body["top_p"], 0.95);
    let manifest_text = fs::read_to_string(live_out.join("run-manifest.json")).unwrap();
    assert!(!manifest_text.contains("secret-token"));
    let outcomes = fs::read_to_string(live_out.join("report/outcomes.csv")).unwrap();
    assert!(outcomes.contains("Nydia"));

    // Same cache, endpoint pointing at a listener that must never be contacted.
    let sentinel = fake_server();
    let offline_out = tmp.path().join("offline");
    let mut offline = config(&manifest, Mode::Offline, &offline_out);
    offline.cache = Some(live_out.join("cache/transcriptions.jsonl"));
    offline.endpoint = Some(endpoint(&sentinel.url, "TTA_TEST_KEY_UNSET"));
    cmd_run(&offline, false).unwrap();
    assert_eq!(sentinel.connections.load(Ordering::SeqCst), 0);
    assert_eq!(reports(&live_out), reports(&offline_out));

    // A second live run is served entirely from the cache.
    let served = server.requests.load(Ordering::SeqCst);
    live.out = tmp.path().join("live-again");
    live.cache = Some(live_out.join("cache/transcriptions.jsonl"));
    cmd_run(&live, false).unwrap();
    assert_eq!(server.requests.load(Ordering::SeqCst), served);

    assert_eq!(before, snapshot(&tmp.path().join("data")));
}

#[test]
fn live_mode_requires_credential() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 2);
    let mut c = config(&manifest, Mode::Live, &tmp.path().join("out"));
    c.endpoint = Some(endpoint("http://127.0.0.1:9/x", "TTA_TEST_KEY_NEVER_SET"));
    let err = cmd_run(&c, false).unwrap_err();
    assert!(format!("{err:#}").contains("TTA_TEST_KEY_NEVER_SET"), "{err:#}");
}

#[test]
fn offline_with_missing_entries_reports_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 2);
    let out = tmp.path().join("out");
    let c = config(&manifest, Mode::Offline, &out);
    let err = cmd_run(&c, false).unwrap_err();
    match err.downcast_ref::<CliError>() {
        Some(CliError::Incomplete { missing, total, report }) => {
            assert_eq!((*missing, *total), (42, 42));
            let text = fs::read_to_string(report).unwrap();
            assert!(text.contains("pad: 0/40 cached"), "{text}");
        }
        other => panic!("unexpected error {other:?}: {err:#}"),
    }
    assert!(!out.join("report").exists());
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 2);
    let bin = env!("CARGO_BIN_EXE_tta");
    let status = Command::new(bin)
        .args([
            "run",
            "--mode",
            "offline",
            "--categories",
            "pad",
            "--k-folds",
            "2",
            "--manifest",
        ])
        .arg(&manifest)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let out = Command::new(bin)
        .args(["run", "--dry-run", "--categories", "pad,noise", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("planned requests: 82"));
    let status = Command::new(bin)
        .args(["run", "--manifest"])
        .arg(&manifest)
        .arg("--mode")
        .arg("bogus")
        .status()
        .unwrap();
    assert!(!status.success());
}

#[test]
fn manifest_replay_and_report_aggregation() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 6);
    let out = tmp.path().join("first");
    let mut c = config(&manifest, Mode::Simulate, &out);
    c.experiment.categories = vec!["resize".into(), "temp-1.0".into()];
    c.experiment.ensemble_sizes = vec![1, 3, 5];
    cmd_run(&c, false).unwrap();

    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run-manifest.json")).unwrap()).unwrap();
    for key in ["config", "seed", "input_hashes", "versions", "started", "finished"] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(m["input_hashes"].as_object().unwrap().len(), 7);

    let replay = RunConfig::resolve(&RunArgs {
        config: Some(out.join("run-manifest.json")),
        out: Some(tmp.path().join("replay")),
        ..Default::default()
    })
    .unwrap();
    cmd_run(&replay, false).unwrap();
    assert_eq!(reports(&out), reports(&tmp.path().join("replay")));

    let figs = cmd_report(&ReportArgs {
        input: out.clone(),
        categories: vec![],
        out: Some(tmp.path().join("figs")),
    })
    .unwrap();
    assert_eq!(figs.len(), 3);
    let fig2 = fs::read_to_string(tmp.path().join("figs/fig2_cer_vs_samples.csv")).unwrap();
    for cat in ["resize", "temp-1.0"] {
        assert_eq!(
            fig2.lines().filter(|l| l.starts_with(&format!("{cat},"))).count(),
            3,
            "{fig2}"
        );
    }
    assert_eq!(fig2.lines().filter(|l| l.starts_with("baseline,")).count(), 1);

    let err = cmd_report(&ReportArgs {
        input: tmp.path().join("nowhere"),
        categories: vec![],
        out: None,
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("nowhere"));
}

#[test]
fn augment_is_idempotent_and_counts_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 1);
    let before = snapshot(&tmp.path().join("data"));
    let out = tmp.path().join("out");
    let args = |cats: &[&str]| AugmentArgs {
        manifest: manifest.clone(),
        categories: cats.iter().map(|c| c.to_string()).collect(),
        out: out.clone(),
        parallelism: 2,
    };
    assert_eq!(cmd_augment(&args(&["pad"])).unwrap().written, 20);
    assert_eq!(cmd_augment(&args(&["pad"])).unwrap().written, 0);
    let all = cmd_augment(&args(&[])).unwrap();
    assert_eq!((all.written, all.skipped), (80, 20));
    let pngs = snapshot(&out.join("cache/aug"))
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .count();
    assert_eq!(pngs, 100);
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cache/aug/index.json")).unwrap()).unwrap();
    assert_eq!(index.as_object().unwrap().len(), 100);
    assert!(cmd_augment(&args(&["sharpen"])).is_err());
    assert!(cmd_augment(&AugmentArgs {
        out: tmp.path().join("data/inside"),
        ..args(&["pad"])
    })
    .is_err());
    assert_eq!(before, snapshot(&tmp.path().join("data")));
}
