use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/utterance_2s.wav")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachestream"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// A tiny N=2, d=32 model written to a fresh directory.
fn tiny_model(dir: &TempDir, seed: &str) -> PathBuf {
    let cfg = dir.path().join("encoder.json");
    std::fs::write(
        &cfg,
        r#"{"n_layers": 2, "d_model": 32, "n_heads": 4, "ffn_expansion": 4, "conv_kernel": 5,
            "downsampling": 4, "n_mels": 80,
            "attention": {"regime": "chunk", "size": 2, "left_chunks": 1}}"#,
    )
    .unwrap();
    let out = dir.path().join(format!("model-{seed}.json"));
    ok(&[
        "init-model",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
    out
}

#[test]
fn init_model_is_byte_stable() {
    let dir = TempDir::new().unwrap();
    let a = tiny_model(&dir, "42");
    let a_sums = (sha(&a), sha(&a.with_extension("bin")));
    let b = dir.path().join("again.json");
    ok(&[
        "init-model",
        "--config",
        dir.path().join("encoder.json").to_str().unwrap(),
        "--seed",
        "42",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(sha(&b.with_extension("bin")), a_sums.1);
    // the manifest names its blob, so compare it with that field aligned
    let text = std::fs::read_to_string(&b)
        .unwrap()
        .replace("again.bin", "model-42.bin");
    assert_eq!(Sha256::digest(text.as_bytes()).to_vec(), a_sums.0);

    let c = tiny_model(&dir, "43");
    assert_ne!(sha(&c.with_extension("bin")), a_sums.1);
}

#[test]
fn non_power_of_two_downsampling_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.json");
    let line = error_line(&[
        "init-model",
        "--downsampling",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(line.starts_with("error[E_CONFIG]:"), "{line}");
    assert!(line.contains("downsampling"));
    assert!(!out.exists());
}

#[test]
fn blob_size_matches_shape_arithmetic() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "1");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let mut next = 0;
    for t in manifest["tensors"].as_array().unwrap() {
        assert_eq!(t["offset"].as_u64().unwrap(), next);
        next += t["shape"][0].as_u64().unwrap() * t["shape"][1].as_u64().unwrap();
    }
    let bytes = std::fs::metadata(model.with_extension("bin"))
        .unwrap()
        .len();
    assert_eq!(bytes, 4 * next);

    // closed form for d=32, F=128, K=5, H=4, two stride-2 stages over 80 mels,
    // a 29-token vocabulary and 16-wide prediction and joint networks
    let (d, f, k, h, v, p) = (32u64, 128, 5, 4, 29, 16);
    // chunk C=2 with one left chunk reaches 3 tokens back and 1 ahead
    let bias = h * (3 + 1 + 1);
    let ffn = 2 * d + d * f + f + f * d + d;
    let attn = 2 * d + 4 * d * d + 3 * d + bias;
    let conv = 2 * d + d * 2 * d + 2 * d + d * k + d + 2 * d + d * d + d;
    let layer = 2 * ffn + attn + conv + 2 * d;
    let down = 3 * 80 * d + d + 3 * d * d + d + d * d + d;
    let ctc = d * v + v;
    let rnnt = v * p + 2 * p * p + p + d * p + p * p + p + p * v + v;
    assert_eq!(bytes, 4 * (down + 2 * layer + ctc + rnnt));
}

#[test]
fn missing_wav_is_a_file_error() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "1");
    let line = error_line(&[
        "transcribe",
        "nowhere.wav",
        "--model",
        model.to_str().unwrap(),
    ]);
    assert!(line.starts_with("error[E_FILE]:"), "{line}");
}

#[test]
fn infeasible_regular_latency_names_feasible_values() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "1");
    let wav = fixture();
    let args = [
        "transcribe",
        wav.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--regime",
        "regular",
    ];
    let line = error_line(&[&args[..], &["--chunk-ms", "100"]].concat());
    // N=2 layers of 40 ms tokens, and the bias table reaches one token ahead
    assert!(line.starts_with("error[E_FEASIBILITY]:"), "{line}");
    assert!(line.ends_with("feasible values are 0, 80 ms"), "{line}");
    let json = ok(&[&args[..], &["--chunk-ms", "80"]].concat());
    assert!(
        json.contains("\"regime\": \"regular(M=1,L=inf)\""),
        "{json}"
    );
    let line = error_line(&[&args[..], &["--chunk-ms", "160"]].concat());
    assert!(line.starts_with("error[E_CONFIG]:"), "{line}");
}

#[test]
fn offline_and_streaming_agree_on_tokens() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "7");
    let wav = fixture();
    let base = [
        "transcribe",
        wav.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--decoder",
        "both",
    ];
    let parse = |mode: &str| -> Vec<Vec<(String, u64)>> {
        let v: serde_json::Value =
            serde_json::from_str(&ok(&[&base[..], &["--mode", mode]].concat())).unwrap();
        v.as_array()
            .unwrap()
            .iter()
            .map(|t| {
                t["tokens"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|r| {
                        (
                            r["text"].as_str().unwrap().to_string(),
                            r["first_frame"].as_u64().unwrap(),
                        )
                    })
                    .collect()
            })
            .collect()
    };
    let offline = parse("offline");
    assert_eq!(offline.len(), 2);
    assert!(!offline[0].is_empty());
    assert_eq!(parse("streaming"), offline);
}

#[test]
fn buffered_rnnt_uses_two_second_chunks() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "3");
    let wav = fixture();
    let out = dir.path().join("t.json");
    ok(&[
        "transcribe",
        wav.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--mode",
        "buffered",
        "--decoder",
        "rnnt",
        "--out",
        out.to_str().unwrap(),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["mode"], "buffered");
    assert_eq!(v["decoder"], "rnnt");
    assert_eq!(v["regime"], "buffered(chunk=2s,buffer=4s)");
}

#[test]
fn compare_prints_fixed_columns() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(&dir, "5");
    let wav = fixture();
    let args = [
        "compare",
        wav.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--regimes",
        "chunk:2:1,zero,regular:1,buffered:0.16:0.64,offline",
        "--reference",
        "a b c",
    ];
    let report = ok(&args);
    assert_eq!(report, ok(&args));
    let rows: Vec<Vec<&str>> = report.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(
        rows[0],
        [
            "regime",
            "mode",
            "decoder",
            "wer_percent",
            "eil_ms",
            "macs_total",
            "macs_duplicate",
            "text"
        ]
    );
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 8));
    let col = |regime: &str, c: usize| -> String {
        rows.iter().find(|r| r[0].starts_with(regime)).unwrap()[c].to_string()
    };
    assert_eq!(col("chunk", 6), "0");
    assert_eq!(col("zero", 6), "0");
    assert_eq!(col("zero", 4), "0.0");
    assert!(col("regular", 6).parse::<u64>().unwrap() > 0);
    assert!(col("buffered", 6).parse::<u64>().unwrap() > 0);
    for r in &rows[1..] {
        let w: f64 = r[3].parse().unwrap();
        assert!(w >= 0.0);
    }
}

#[test]
fn usage_errors_are_single_lines() {
    let line = error_line(&["transcribe"]);
    assert!(line.starts_with("error[E_USAGE]:"), "{line}");
    let line = error_line(&[
        "compare",
        "x.wav",
        "--model",
        "m.json",
        "--regimes",
        "chunk",
    ]);
    assert!(line.starts_with("error["), "{line}");
}
