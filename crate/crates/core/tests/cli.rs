use std::path::Path;
use std::process::{Command, Output};

use dge_core::encoder::EncoderConfig;
use dge_core::harness::{read_metrics, train, RunConfig};
use dge_core::DgeError;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.image_size = 16;
    cfg.model.patch_size = 2;
    cfg.model.encoder = EncoderConfig {
        channels: 8,
        heads: 2,
        ffn_ratio: 2,
        layers: 2,
        ..EncoderConfig::default()
    };
    cfg.dataset.window = 6;
    cfg.dataset.train = 64;
    cfg.dataset.val = 16;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.log_wall_clock = false;
    cfg.out = out.to_path_buf();
    cfg
}

fn dge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("dge binary runs")
}

#[test]
fn invalid_configs_fail_before_anything_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cases = [
        ("channels = 8", "channels = 9"),
        ("window = 6", "window = 17"),
        ("granularities = 1,2,4", "granularities = 4,2"),
        ("gamma = 0.5", "gamma = 1.5"),
        ("[train]", "[train]\nepochz = 3"),
    ];
    for (from, to) in cases {
        let text = tiny(&out).to_text().replace(from, to);
        assert_ne!(text, tiny(&out).to_text(), "pattern `{from}` not found");
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, text).unwrap();
        for cmd in ["train", "dataset", "eval"] {
            let res = dge(&["--config", path.to_str().unwrap(), cmd]);
            assert!(!res.status.success(), "{cmd} accepted `{to}`");
            let err = String::from_utf8_lossy(&res.stderr);
            assert!(err.contains("error"), "{cmd}: {err}");
            assert!(!out.exists(), "{cmd} created the output directory for `{to}`");
        }
    }
}

#[test]
fn commands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let path = dir.path().join("tiny.txt");
    std::fs::write(&path, tiny(&out).to_text()).unwrap();
    let config = path.to_str().unwrap();
    for cmd in [
        vec!["dataset", "--previews", "2"],
        vec!["train"],
        vec!["eval"],
        vec!["analyze", "--samples", "4", "--thresholds", "1.01,0.9,-1"],
        vec!["heatmap", "--count", "2"],
        vec!["bench", "--samples", "2", "--repetitions", "1"],
    ] {
        let mut args = vec!["--config", config];
        args.extend(&cmd);
        let res = dge(&args);
        assert!(res.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    for file in ["final.json", "best.json", "metrics.jsonl", "config.txt", "eval_report.json", "train_report.json", "bench.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let metrics = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().filter(|m| m.split == "train").count(), 4);
    assert!(metrics.iter().any(|m| m.split == "val"));
    assert!(metrics.iter().all(|m| m.wall_clock.is_none()));
    let saved = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(saved.to_text(), tiny(&out).to_text());
}

#[test]
fn aborted_runs_leave_parseable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optim.lr = 1e300;
    cfg.epochs = 4;
    cfg.cosine = false;
    let err = train::<f64>(&cfg).unwrap_err();
    assert!(matches!(err, DgeError::Numeric { .. }), "{err}");
    let metrics = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(m.step, i as u64 + 1);
    }
    assert!(dir.path().join("last_good.json").exists());
    assert!(!dir.path().join("final.json").exists());
}
