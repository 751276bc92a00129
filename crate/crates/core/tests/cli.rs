mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptseg::checkpoint;
use promptseg::eval::EvalReport;
use promptseg::plot::EmbeddingPlot;

use common::TINY_TOML;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptseg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, format!("{TINY_TOML}\n{extra}")).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = dir.join("run");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_writes_run_directory() {
    let d = tempfile::tempdir().unwrap();
    let out = train_tiny(d.path());
    for f in ["checkpoint.bin", "metrics.jsonl", "config.toml", "eval_val.json", "eval_log.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn negative_gamma_is_a_config_error_naming_the_key() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "gamma=-0.5",
        "--out",
        d.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.gamma"), "{}", stderr(&o));

    let d2 = tempfile::tempdir().unwrap();
    let cfg = d2.path().join("bad.toml");
    std::fs::write(&cfg, "[loss]\ngamma = -1.0\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"));

    let o = run(&["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn overrides_are_echoed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let out = d.path().join("run");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "gamma=0.5",
        "--set",
        "train.steps=2",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = promptseg::config::RunConfig::from_file(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.loss.gamma, 0.5);
    assert_eq!(echoed.train.steps, 2);
    assert_eq!(echoed.train.seed, 7);
    assert!(std::fs::read_to_string(out.join("config.toml"))
        .unwrap()
        .contains("gamma = 0.5"));
}

#[test]
fn eval_reproduces_logged_miou_and_rejects_bad_input() {
    let d = tempfile::tempdir().unwrap();
    let out = train_tiny(d.path());
    let o = run(&["eval", "--out", out.to_str().unwrap(), "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let logged: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_val.json")).unwrap()).unwrap();
    let again: EvalReport = serde_json::from_str(
        &std::fs::read_to_string(out.join("eval_val_decoder.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(logged, again);

    let o = run(&["eval", "--out", out.to_str().unwrap(), "--split", "test"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--checkpoint", d.path().join("nope.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--out", out.to_str().unwrap(), "--source", "logits"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn raw_alignment_ignores_decoder_weights() {
    let d = tempfile::tempdir().unwrap();
    let out = train_tiny(d.path());
    let mut ck = checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    let names: Vec<String> = ck
        .store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("dec."))
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        for v in ck.store.get_mut(n).unwrap().data_mut() {
            *v = -*v * 3.0 + 1.0;
        }
    }
    let other = d.path().join("scrambled");
    checkpoint::save(&other.join("checkpoint.bin"), &ck.config, &ck.store, ck.step).unwrap();

    let read = |dir: &Path, source: &str| -> EvalReport {
        let o = run(&["eval", "--out", dir.to_str().unwrap(), "--source", source]);
        assert!(o.status.success(), "{}", stderr(&o));
        let f = dir.join(format!("eval_val_{source}.json"));
        serde_json::from_str(&std::fs::read_to_string(f).unwrap()).unwrap()
    };
    let a = read(&out, "raw-alignment");
    let b = read(&other, "raw-alignment");
    assert_eq!(a, b);
    assert!(a.miou.is_finite());
}

#[test]
fn divergence_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.lr=1e200",
        "--out",
        d.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn ablate_two_modes_gives_two_rows() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "[ablate]\nprompt_mode = [\"icpc\", \"learnable\"]\nsampling_strategy = [\"easy-to-hard\"]\nseeds = [0, 1]\n",
    );
    let out = d.path().join("sweep");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.steps=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].contains("mean_miou") && lines[0].contains("std_miou"));
    assert!(lines[1].starts_with("prompt_mode=icpc,sampling_strategy=easy-to-hard"));
    let children = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(children, 2);

    // Children of one variant differ only in the seed.
    let v = out.join("prompt_mode_icpc_sampling_strategy_easy-to-hard");
    let a = std::fs::read_to_string(v.join("seed-0/config.toml")).unwrap();
    let b = std::fs::read_to_string(v.join("seed-1/config.toml")).unwrap();
    let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, vec![("seed = 0", "seed = 1")]);
}

#[test]
fn ablate_five_seeds_and_preset() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[ablate]\nseeds = [0, 1, 2, 3, 4]\n");
    let out = d.path().join("sweep");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.steps=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "5");
    let mean: f64 = row[4].parse().unwrap();
    let std: f64 = row[5].parse().unwrap();
    assert!(mean.is_finite() && std.is_finite() && std >= 0.0);

    let out = d.path().join("factors");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--preset",
        "factor-table",
        "--seeds",
        "0",
        "--set",
        "train.steps=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(),
        9
    );
    assert!(std::fs::read_to_string(out.join("summary.md")).unwrap().contains("ic+cl+ms"));
}

#[test]
fn ablate_records_failures_and_continues() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[ablate]\ngamma = [0.0, 0.5]\n");
    let out = d.path().join("sweep");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.lr=1e200",
        "--set",
        "train.steps=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",1,1,")), "{csv}");
}

#[test]
fn plots() {
    let d = tempfile::tempdir().unwrap();
    let out = train_tiny(d.path());
    let o = run(&["plot", "--run", out.to_str().unwrap(), "--kind", "convergence"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::metadata(out.join("convergence.svg")).unwrap().len() > 0);

    for projection in ["pca", "tsne"] {
        let o = run(&[
            "plot",
            "--run",
            out.to_str().unwrap(),
            "--kind",
            "embeddings",
            "--projection",
            projection,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let plot: EmbeddingPlot =
            serde_json::from_str(&std::fs::read_to_string(out.join("embeddings.json")).unwrap())
                .unwrap();
        assert_eq!(plot.text.len(), 3);
        let classes: Vec<usize> = plot.text.iter().map(|p| p.class).collect();
        assert_eq!(classes, vec![0, 1, 2]);
        assert!(std::fs::metadata(out.join("embeddings.svg")).unwrap().len() > 0);
    }

    let empty = tempfile::tempdir().unwrap();
    let o = run(&["plot", "--run", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["plot", "--run", empty.path().to_str().unwrap(), "--kind", "embeddings"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}
