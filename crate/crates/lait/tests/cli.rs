use std::path::Path;
use std::process::{Command, Output};

fn lait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lait"))
        .args(args)
        .output()
        .expect("spawn lait")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CORPUS: &str = r#"{"task": "mnli", "fields": {"premise": "the cat sat on the mat", "hypothesis": "a cat sat"}, "label": "entailment"}
{"task": "mnli", "fields": {"premise": "the cat sat on the mat", "hypothesis": "no animal is here"}, "label": "contradiction"}

{"task": "raw", "fields": ["first segment", "second one", "third"]}
{"task": "fever", "fields": {"claim": "the cat sat", "evidence": "the cat sat on the mat"}, "label": "supported"}
"#;

const SMALL: [&str; 10] = [
    "--layers",
    "3",
    "--p",
    "2",
    "--d-model",
    "16",
    "--heads",
    "2",
    "--d-ff",
    "16",
];

#[test]
fn verify_quick_passes() {
    let out = lait(&["verify", "--quick", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn cost_sweep_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let lengths = dir.path().join("lengths.jsonl");
    std::fs::write(
        &lengths,
        "{\"lengths\": [16, 31]}\n{\"lengths\": [10, 20], \"mult\": 3}\n",
    )
    .unwrap();
    let out_csv = dir.path().join("sweep.csv");
    let out = lait(&[
        "cost",
        "--lengths",
        path(&lengths),
        "--layers",
        "12",
        "--sweep-p",
        "--output",
        path(&out_csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut rdr = csv::Reader::from_path(&out_csv).unwrap();
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["P", "ops_total", "flops", "ratio_full", "ratio_cached"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 13);
    let ratios: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(ratios[0], 1.0);
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]));
    // no digests in the input, so no cached ratio
    assert!(rows.iter().all(|r| r[4].is_empty()));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("sweep.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "cost");
    assert_eq!(manifest["flags"]["model"]["layers"], 12);
    assert_eq!(manifest["flags"]["sweep_p"], true);
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn single_p_cost_row() {
    let dir = tempfile::tempdir().unwrap();
    let lengths = dir.path().join("l.jsonl");
    std::fs::write(&lengths, "{\"lengths\": [16, 31], \"digests\": [\"a\", \"b\"]}\n").unwrap();
    let out = lait(&["cost", "--lengths", path(&lengths), "--layers", "12", "--p", "9"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("9,17580,54005760,0.66319"), "{}", lines[1]);
}

#[test]
fn bench_cartesian_reports_exact_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    let out = lait(&[
        "bench",
        "cartesian",
        "--left",
        "4x5",
        "--right",
        "6x9",
        "--p",
        "2",
        "--layers",
        "3",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--cache",
        "--output",
        path(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    // uncached 24 * (2 * (25 + 81) + 14^2); cached 2 * (4*25 + 6*81) + 24 * 14^2
    assert_eq!(r["uncached_ops"], 24 * (2 * 106 + 196));
    assert_eq!(r["cached_ops"], 2 * (4 * 25 + 6 * 81) + 24 * 196);
    assert_eq!(r["ops_match_analytic"], true);
    assert_eq!(r["outputs_identical"], true);
    assert!(r["uncached_time"]["samples_ms"].as_array().unwrap().len() >= 5);
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_csv = dir.path().join(name);
        let weights = dir.path().join(format!("{name}.laitw"));
        let out = lait(&[
            "train",
            "--task",
            "shared_token",
            "--seq-len",
            "3",
            "--vocab",
            "20",
            "--n-train",
            "64",
            "--n-eval",
            "32",
            "--steps",
            "6",
            "--eval-every",
            "3",
            "--batch",
            "8",
            "--layers",
            "2",
            "--p",
            "1",
            "--d-model",
            "8",
            "--heads",
            "2",
            "--d-ff",
            "8",
            "--seed",
            "3",
            "--output",
            path(&out_csv),
            "--weights-out",
            path(&weights),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(&out_csv).unwrap(), std::fs::read(&weights).unwrap())
    };
    let (a, wa) = run("a.csv");
    let (b, wb) = run("b.csv");
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some("step,loss,eval_accuracy"));
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("a.csv.manifest.json").exists());
}

#[test]
fn encode_with_cache_dir_reuses_entries() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("in.jsonl");
    std::fs::write(&corpus, CORPUS).unwrap();
    let cache_dir = dir.path().join("cache");
    let encode = |out: &str, extra: &[&str]| {
        let out_path = dir.path().join(out);
        let mut args = vec![
            "encode",
            "--input",
            path(&corpus),
            "--output",
            path(&out_path),
            "--vocab",
            "512",
        ];
        args.extend_from_slice(&SMALL);
        args.extend_from_slice(extra);
        let o = lait(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out_path).unwrap()
    };
    let plain = encode("plain.jsonl", &[]);
    let first = encode("first.jsonl", &["--cache-dir", path(&cache_dir)]);
    let second = encode("second.jsonl", &["--cache-dir", path(&cache_dir)]);
    assert!(std::fs::read_dir(&cache_dir).unwrap().count() > 0);

    let parse = |s: &str| -> Vec<serde_json::Value> { s.lines().map(|l| serde_json::from_str(l).unwrap()).collect() };
    let (plain, first, second) = (parse(&plain), parse(&first), parse(&second));
    assert_eq!(plain.len(), 4);
    for ((p, f), s) in plain.iter().zip(&first).zip(&second) {
        assert_eq!(p["logits"], f["logits"]);
        assert_eq!(p["logits"], s["logits"]);
        assert_eq!(s["cache_misses"], 0);
    }
    // the repeated premise hits within the first run
    assert_eq!(first[1]["cache_hits"], 1);
    assert!(plain[0]["predicted_label"].as_str().is_some());
}

#[test]
fn stats_emits_digest_records() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("in.jsonl");
    std::fs::write(&corpus, CORPUS).unwrap();
    let out_path = dir.path().join("lengths.jsonl");
    let out = lait(&[
        "stats",
        "--input",
        path(&corpus),
        "--output",
        path(&out_path),
        "--vocab",
        "512",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[2]["lengths"].as_array().unwrap().len(), 3);
    // both mnli lines share the premise segment
    assert_eq!(recs[0]["digests"][1], recs[1]["digests"][1]);
    assert_ne!(recs[0]["digests"][0], recs[1]["digests"][0]);

    let cost = lait(&["cost", "--lengths", path(&out_path), "--layers", "4", "--sweep-p"]);
    let csv = String::from_utf8(cost.stdout).unwrap();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let (full, cached): (f64, f64) = (last[3].parse().unwrap(), last[4].parse().unwrap());
    assert!(cached < full);
}

#[test]
fn malformed_jsonl_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    std::fs::write(&corpus, "{\"task\": \"raw\", \"fields\": [\"a b\"]}\n{not json}\n").unwrap();
    let out = lait(&["stats", "--input", path(&corpus)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(lait(&["cost", "--bogus"]).status.code(), Some(2));
    assert_eq!(lait(&["verify", "--layers", "2", "--p", "3"]).status.code(), Some(2));
    assert_eq!(lait(&["bench", "cartesian", "--left", "17by16"]).status.code(), Some(2));
    assert_eq!(lait(&["encode"]).status.code(), Some(2));
}

#[test]
fn config_file_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let lengths = dir.path().join("l.jsonl");
    std::fs::write(&cfg, r#"{"layers": 6, "p": 3}"#).unwrap();
    std::fs::write(&lengths, "{\"lengths\": [2, 2]}\n").unwrap();
    let out = lait(&["cost", "--lengths", path(&lengths), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    // 3 * 8 + 3 * 16
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("3,72,"));
    let out = lait(&["cost", "--lengths", path(&lengths), "--config", path(&cfg), "--p", "6"]);
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("6,48,"));
}
