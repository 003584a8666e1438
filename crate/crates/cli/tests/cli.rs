//! End-to-end tests of the command-line binary: train/encode/decode round
//! trips, trace handling, config precedence, and exit-code discipline.

use std::path::{Path, PathBuf};
use std::process::Output;
use tfnc::dsp::{Waveform, SAMPLE_RATE};
use tfnc::train::synthetic_clip;
use tfnc::wav::{read_wav, write_wav};

fn tfnc_bin(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_tfnc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(o),
        stderr(o)
    );
}

const TINY_CONFIG: &str = r#"
steps = 5
seed = 3
segment_len = 240

[codec]
power_exponent = 0.3
enc_channels = [4, 8]
strides = [4, 4]
conv_kt = 2
frames_per_packet = 4
encode_stack = [{ Tcm = { dilations = [1, 2], bottleneck = 4, kernel = 3 } }]
decode_stack = [{ Tcm = { dilations = [1, 2], bottleneck = 4, kernel = 3 } }, { GGru = { groups = 2 } }]

[codec.stft]
window_len = 32
hop_len = 8

[codec.vq]
n_groups = 2
codewords = 8
dim = 3
"#;

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
    wav: PathBuf,
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains a tiny checkpoint and writes a short test WAV.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let checkpoint = root.join("model.ck");
    let out = tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--output",
        path_str(&checkpoint),
    ]);
    assert_ok(&out);
    let wav = root.join("clip.wav");
    write_wav(&wav, &Waveform::new(synthetic_clip(2000, 50), SAMPLE_RATE)).unwrap();
    Fixture {
        dir,
        root,
        checkpoint,
        wav,
    }
}

#[test]
fn help_exits_zero() {
    let out = tfnc_bin(&["--help"]);
    assert_ok(&out);
    for cmd in ["encode", "decode", "train", "ablate", "simulate", "gradcheck", "eval"] {
        assert!(stdout(&out).contains(cmd), "help missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = tfnc_bin(&["encode", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tfnc_bin(&["gradcheck", "--scope", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for scope in ["tcm", "ggru", "stack", "conv", "deconv", "spectral"] {
        assert!(err.contains(scope), "scope list missing {scope}: {err}");
    }
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ck");
    std::fs::write(&bogus, b"junk").unwrap();
    let out = tfnc_bin(&[
        "eval",
        "--checkpoint",
        path_str(&bogus),
        "--input",
        path_str(&bogus),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_encode_decode_round_trip() {
    let fx = fixture();
    let tfn = fx.root.join("clip.tfn");
    let out = tfnc_bin(&[
        "encode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&fx.wav),
        "--output",
        path_str(&tfn),
    ]);
    assert_ok(&out);
    let report = stdout(&out);
    // 2000 samples, 32/8 stft -> 247 frames; 2 groups x 3 bits per frame
    assert!(report.contains("frames: 247"), "{report}");
    assert!(report.contains("payload_bits: 1482"), "{report}");
    // 6 bits per 0.5 ms frame = 12 kbps at this toy config
    assert!(report.contains("bitrate_kbps: 12.000"), "{report}");

    let wav_out = fx.root.join("decoded.wav");
    let out = tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&wav_out),
        "--reference",
        path_str(&fx.wav),
    ]);
    assert_ok(&out);
    let report = stdout(&out);
    assert!(report.contains("snr_db:"), "{report}");
    assert!(report.contains("spectral_distance:"), "{report}");
    let decoded = read_wav(&wav_out).unwrap();
    assert!(decoded.samples.iter().all(|v| v.is_finite()));

    // eval reports on the same clip
    let out = tfnc_bin(&[
        "eval",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&fx.wav),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("snr_db:"));
}

#[test]
fn decode_trace_handling() {
    let fx = fixture();
    let tfn = fx.root.join("clip.tfn");
    assert_ok(&tfnc_bin(&[
        "encode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&fx.wav),
        "--output",
        path_str(&tfn),
    ]));
    let n_packets = 247usize.div_ceil(4);

    let plain = fx.root.join("plain.wav");
    assert_ok(&tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&plain),
    ]));

    // all-received trace decodes bit-identically to no trace
    let ones = fx.root.join("ones.trace");
    std::fs::write(&ones, format!("{}\n", "1".repeat(n_packets))).unwrap();
    let traced = fx.root.join("traced.wav");
    assert_ok(&tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&traced),
        "--trace",
        path_str(&ones),
    ]));
    assert_eq!(
        std::fs::read(&plain).unwrap(),
        std::fs::read(&traced).unwrap()
    );

    // all-lost trace still produces finite audio
    let zeros = fx.root.join("zeros.trace");
    std::fs::write(&zeros, format!("{}\n", "0".repeat(n_packets))).unwrap();
    let silent = fx.root.join("silent.wav");
    assert_ok(&tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&silent),
        "--trace",
        path_str(&zeros),
    ]));
    let audio = read_wav(&silent).unwrap();
    assert!(audio.samples.iter().all(|v| v.is_finite()));

    // wrong-length trace is a data error
    let short = fx.root.join("short.trace");
    std::fs::write(&short, "11\n").unwrap();
    let out = tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&silent),
        "--trace",
        path_str(&short),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decode_rejects_mismatched_checkpoint() {
    let fx = fixture();
    let tfn = fx.root.join("clip.tfn");
    assert_ok(&tfnc_bin(&[
        "encode",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--input",
        path_str(&fx.wav),
        "--output",
        path_str(&tfn),
    ]));

    // second model with a different codeword count
    let other_cfg = fx.root.join("other.toml");
    std::fs::write(
        &other_cfg,
        TINY_CONFIG.replace("codewords = 8", "codewords = 16"),
    )
    .unwrap();
    let other_ck = fx.root.join("other.ck");
    assert_ok(&tfnc_bin(&[
        "train",
        "--config",
        path_str(&other_cfg),
        "--steps",
        "1",
        "--output",
        path_str(&other_ck),
    ]));
    let out = tfnc_bin(&[
        "decode",
        "--checkpoint",
        path_str(&other_ck),
        "--input",
        path_str(&tfn),
        "--output",
        path_str(&fx.root.join("x.wav")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("stream:"), "{err}");
    assert!(err.contains("checkpoint:"), "{err}");
}

#[test]
fn train_writes_ndjson_metrics_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let ck = dir.path().join("m.ck");
    let metrics = dir.path().join("m.ndjson");
    // --steps 7 overrides the file's steps = 5
    let out = tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--steps",
        "7",
        "--output",
        path_str(&ck),
        "--metrics",
        path_str(&metrics),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("steps: 7"));
    let text = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"].as_u64().unwrap(), i as u64 + 1);
        assert!(v["total"].as_f64().unwrap().is_finite());
        assert!(v["codebook_entropy"].is_number());
    }
}

#[test]
fn resumed_training_reproduces_uninterrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();

    let straight = dir.path().join("straight.ck");
    assert_ok(&tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--steps",
        "6",
        "--output",
        path_str(&straight),
    ]));

    let half = dir.path().join("half.ck");
    assert_ok(&tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--steps",
        "3",
        "--output",
        path_str(&half),
    ]));
    let resumed = dir.path().join("resumed.ck");
    assert_ok(&tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--steps",
        "3",
        "--resume",
        path_str(&half),
        "--output",
        path_str(&resumed),
    ]));
    assert_eq!(
        std::fs::read(&straight).unwrap(),
        std::fs::read(&resumed).unwrap(),
        "resumed run diverged from uninterrupted run"
    );
}

#[test]
fn train_reads_dataset_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.wav");
    let noise = dir.path().join("noise.wav");
    write_wav(&clean, &Waveform::new(synthetic_clip(1500, 60), SAMPLE_RATE)).unwrap();
    write_wav(&noise, &Waveform::new(synthetic_clip(1500, 61), SAMPLE_RATE)).unwrap();
    let manifest = dir.path().join("data.json");
    std::fs::write(
        &manifest,
        r#"[{"path": "clean.wav", "role": "clean"}, {"path": "noise.wav", "role": "noise"}]"#,
    )
    .unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let ck = dir.path().join("m.ck");
    let out = tfnc_bin(&[
        "train",
        "--config",
        path_str(&config),
        "--manifest",
        path_str(&manifest),
        "--steps",
        "3",
        "--all-in-one",
        "--output",
        path_str(&ck),
    ]);
    assert_ok(&out);
    assert!(ck.exists());
}

#[test]
fn simulate_is_deterministic_and_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.trace");
    let b = dir.path().join("b.trace");
    let out1 = tfnc_bin(&[
        "simulate", "--packets", "2000", "--seed", "9", "--output", path_str(&a),
    ]);
    assert_ok(&out1);
    let out2 = tfnc_bin(&[
        "simulate", "--packets", "2000", "--seed", "9", "--output", path_str(&b),
    ]);
    assert_ok(&out2);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report = stdout(&out1);
    assert!(report.contains("empirical_loss_rate:"), "{report}");
    assert!(report.contains("analytic_loss_rate:"), "{report}");
    // different seed, different trace
    let c = dir.path().join("c.trace");
    assert_ok(&tfnc_bin(&[
        "simulate", "--packets", "2000", "--seed", "10", "--output", path_str(&c),
    ]));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn gradcheck_scope_passes() {
    let out = tfnc_bin(&["gradcheck", "--scope", "tcm"]);
    assert_ok(&out);
    let report = stdout(&out);
    assert!(report.contains("scope tcm"), "{report}");
    // printed error is below the gate (exit 0 already implies <= 1e-5)
}

#[test]
fn ablate_reports_three_matched_arms() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let out = tfnc_bin(&[
        "ablate",
        "--steps",
        "3",
        "--output",
        path_str(&report_path),
    ]);
    assert_ok(&out);
    let report = stdout(&out);
    for arm in ["tcm-only", "gru-only", "interleaved"] {
        assert!(report.contains(arm), "{report}");
    }
    assert!(report.contains("directional only"), "{report}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let arms = json.as_array().unwrap();
    assert_eq!(arms.len(), 3);
    let reference = arms[0]["param_count"].as_f64().unwrap();
    for arm in arms {
        let c = arm["param_count"].as_f64().unwrap();
        assert!((c - reference).abs() / reference <= 0.05);
        assert!(arm["spectral_distance"].as_f64().unwrap().is_finite());
    }
}
