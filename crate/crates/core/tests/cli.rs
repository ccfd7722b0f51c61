use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn cli(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cae-lstm"))
        .env("CAE_LSTM_DATA_DIR", data)
        .current_dir(data)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(data: &Path, args: &[&str]) -> Output {
    let out = cli(data, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"{
  "regions": 12, "raw_dim": 16, "embed_dim": 16, "topic_dim": 6,
  "filter_width": 6, "stride": 2, "attn_dim": 8, "hidden": 16, "word_dim": 8,
  "batch_size": 4, "epochs_phase1": 2, "epochs_phase2": 1, "seed": 17
}"#;

#[test]
fn unknown_flag_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["train", "--phase", "3"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["build-vocab"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("config.json"), CONFIG).unwrap();
    let cfg = d.join("config.json");
    let cfg = cfg.to_str().unwrap();

    let synth = ok(
        d,
        &[
            "synth-data",
            "--images",
            "24",
            "--regions",
            "12",
            "--raw-dim",
            "16",
            "--seed",
            "3",
        ],
    );
    assert!(String::from_utf8_lossy(&synth.stderr).contains("seed: 3"));
    for f in ["dataset.jsonl", "features.bin", "split.json", "objects.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let split: Value = serde_json::from_str(&std::fs::read_to_string(d.join("split.json")).unwrap()).unwrap();
    for key in ["train", "val", "test"] {
        assert!(split[key].is_array());
    }

    ok(d, &["build-vocab", "--config", cfg, "--min-count", "1"]);
    let lexicon = std::fs::read_to_string(d.join("lexicon.txt")).unwrap();
    assert!(lexicon.lines().all(|l| l.split('\t').count() == 2));

    // Two runs with the same seed give byte-identical checkpoints.
    for out in ["a.ckpt", "b.ckpt"] {
        let run = ok(
            d,
            &[
                "train",
                "--config",
                cfg,
                "--phase",
                "both",
                "--max-steps2",
                "2",
                "--out",
                out,
            ],
        );
        assert!(String::from_utf8_lossy(&run.stderr).contains("seed: 17"));
    }
    let a = std::fs::read(d.join("a.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.ckpt")).unwrap());
    assert!(d.join("a.phase1.ckpt").exists());

    // Flags override the config file.
    ok(
        d,
        &[
            "train",
            "--config",
            cfg,
            "--phase",
            "1",
            "--seed",
            "18",
            "--out",
            "c.ckpt",
            "--sequential",
        ],
    );
    assert_ne!(a, std::fs::read(d.join("c.ckpt")).unwrap());

    let ckpt = d.join("a.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let greedy = ok(d, &["generate", "--checkpoint", ckpt, "--limit", "3"]);
    let lines: Vec<Value> = String::from_utf8(greedy.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let n = l["sentences"].as_array().unwrap().len();
        assert!((1..=6).contains(&n));
        assert_eq!(l["token_ids"].as_array().unwrap().len(), n);
        assert_eq!(l["stop_probs"].as_array().unwrap().len(), n);
        assert!(l["image_id"].is_string());
    }
    let s1 = ok(
        d,
        &[
            "generate",
            "--checkpoint",
            ckpt,
            "--sample",
            "--seed",
            "4",
            "--limit",
            "3",
        ],
    );
    let s2 = ok(
        d,
        &[
            "generate",
            "--checkpoint",
            ckpt,
            "--sample",
            "--seed",
            "4",
            "--limit",
            "3",
            "--sequential",
        ],
    );
    assert_eq!(s1.stdout, s2.stdout);
    assert!(String::from_utf8_lossy(&s1.stderr).contains("seed: 4"));

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            ckpt,
            "--on",
            "val",
            "--dump",
            "dump.jsonl",
            "--out",
            "report.json",
        ],
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["CIDEr", "BLEU4", "coverage_mean", "sentence_histogram"] {
        assert!(!report[key].is_null(), "{key}");
    }
    let images = report["images"].as_u64().unwrap() as usize;
    assert_eq!(
        std::fs::read_to_string(d.join("dump.jsonl")).unwrap().lines().count(),
        images
    );

    let id = lines[0]["image_id"].as_str().unwrap();
    let topics = ok(d, &["inspect-topics", "--checkpoint", ckpt, "--image", id]);
    let topics: Value = serde_json::from_slice(&topics.stdout).unwrap();
    assert_eq!(topics["topics"].as_array().unwrap().len(), 6);
    assert_eq!(topics["topics"][0].as_array().unwrap().len(), 6);
    assert_eq!(topics["attention"][0][0]["weights"].as_array().unwrap().len(), 12);
}
