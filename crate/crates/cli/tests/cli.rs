//! End-to-end runs of the `phn` binary.
//!
//! Set `PHN_BLESS=1` to rewrite `tests/golden/diagnose_layout.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phn_cli::commands::{EvalRecord, TrainSummary};
use phn_cli::error::ErrorRecord;
use phn_cli::run::{read_error, read_manifest};
use phn_core::checkpoint::file_hash;
use phn_core::diagnostics::parse_report;
use tempfile::TempDir;

fn phn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = phn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A small synthetic dataset shared by the tests of one function.
    fn new(samples: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let n = samples.to_string();
        ok(&[
            "gen-data",
            "--out",
            s(&data),
            "--samples",
            &n,
            "--fields",
            "4",
            "--vocab",
            "12",
        ]);
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> PathBuf {
        self.path("data/data.tsv")
    }

    fn common(&self, out: &str) -> Vec<String> {
        [
            "--data",
            s(&self.data()),
            "--out",
            s(&self.path(out)),
            "--epochs",
            "2",
            "--set",
            "model.embed_dim=4",
            "--set",
            "train.batch_size=64",
            "--set",
            "train.optimizer.learning_rate=0.01",
        ]
        .iter()
        .map(|x| x.to_string())
        .collect()
    }

    fn run(&self, command: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![command.to_string()];
        args.extend(self.common(out));
        args.extend(extra.iter().map(|x| x.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        phn(&refs)
    }
}

fn stdout(out: &Output) -> &str {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::str::from_utf8(&out.stdout).unwrap()
}

fn hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(hashes(&p));
        } else {
            out.insert(p.clone(), file_hash(&p).unwrap());
        }
    }
    out
}

#[test]
fn gen_data_writes_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--samples", "500", "--seed", "3"]);
    }
    let text = fs::read_to_string(a.join("data.tsv")).unwrap();
    assert_eq!(text.lines().count(), 500);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 11);
    assert_eq!(
        fs::read_to_string(a.join("probabilities.txt")).unwrap().lines().count(),
        500
    );
    assert!(a.join("spec.toml").exists());
    for f in ["data.tsv", "probabilities.txt", "spec.toml", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = read_manifest(&a).unwrap();
    let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["data.tsv", "probabilities.txt", "spec.toml"]);
}

#[test]
fn zero_weight_spec_gives_coin_flip_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        "pairwise_weight_scale = 0.0\nbias_scale = 0.0\nsample_count = 200\n",
    )
    .unwrap();
    let out = dir.path().join("zero");
    ok(&["gen-data", "--out", s(&out), "--spec", s(&spec)]);
    let probs = fs::read_to_string(out.join("probabilities.txt")).unwrap();
    assert!(probs.lines().all(|l| l == "0.5"));
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let fx = Fixture::new(2000);
    let probs = format!("data.probabilities=\"{}\"", s(&fx.path("data/probabilities.txt")));
    let out = fx.run("train", "run", &["--set", &probs]);
    let summary: TrainSummary = serde_json::from_str(stdout(&out)).unwrap();
    let run = fx.path("run");
    for f in [
        "config.toml",
        "model.ckpt",
        "metrics.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let on_disk: TrainSummary = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    assert!(summary.oracle_test_auc.unwrap() > 0.5);

    for split in ["train", "val", "test"] {
        let text = ok(&["eval", "--run", s(&run), "--split", split]);
        let record: EvalRecord = serde_json::from_str(&text).unwrap();
        let expected = summary.evaluation(split).unwrap();
        assert_eq!(record.samples, expected.samples);
        assert!((record.logloss - expected.logloss).abs() <= 1e-12);
        assert!((record.auc.unwrap() - expected.auc.unwrap()).abs() <= 1e-12);
    }
    let explicit = fx.path("eval");
    let ckpt = run.join("model.ckpt");
    let cfg = run.join("config.toml");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&explicit),
    ]);
    let record: EvalRecord = serde_json::from_str(&fs::read_to_string(explicit.join("eval.json")).unwrap()).unwrap();
    assert_eq!(record, *summary.evaluation("test").unwrap());
    assert!(explicit.join("config.toml").exists());
    assert_eq!(read_manifest(&explicit).unwrap().inputs.len(), 4);
}

#[test]
fn echoed_config_alone_reproduces_the_run() {
    let fx = Fixture::new(1000);
    stdout(&fx.run("train", "first", &["--deterministic"]));
    let echo = fx.path("first/config.toml");
    let again = fx.path("again");
    ok(&["train", "--config", s(&echo), "--out", s(&again)]);
    for f in ["metrics.csv", "model.ckpt", "summary.json"] {
        assert_eq!(
            fs::read(fx.path("first").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let fx = Fixture::new(1000);
    for run in ["a", "b"] {
        stdout(&fx.run("train", run, &["--deterministic", "--set", "model.bn=\"private\""]));
    }
    for f in ["metrics.csv", "model.ckpt", "summary.json"] {
        assert_eq!(
            fs::read(fx.path("a").join(f)).unwrap(),
            fs::read(fx.path("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(fx.path("a/metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn grid_emits_one_row_per_depth() {
    let fx = Fixture::new(800);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(stdout(&fx.run("grid", "grid", &["--depths", "1,2,3"]))).unwrap();
    assert_eq!(rows.len(), 3);
    let text = fs::read_to_string(fx.path("grid/grid.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "depth,seed,best_epoch,val_logloss,val_auc");
    let depths: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(depths, ["1", "2", "3"]);
}

fn layout(root: &Path) -> String {
    let manifest = read_manifest(root).unwrap();
    let mut text = String::new();
    for f in &manifest.files {
        text += &f.path;
        text.push('\n');
        if f.path.ends_with(".csv") {
            let (header, body) = parse_report(&fs::read_to_string(root.join(&f.path)).unwrap()).unwrap();
            let keys: Vec<&str> = header.iter().map(|(k, _)| k.as_str()).collect();
            let report = header
                .iter()
                .find(|(k, _)| k == "report")
                .map_or("", |(_, v)| v.as_str());
            text += &format!(
                "  header: {} ({report})\n  columns: {}\n  rows: {}\n",
                keys.join(","),
                body[0].join(","),
                body.len() - 1
            );
        }
    }
    text
}

#[test]
fn diagnose_emits_schema_stable_matrices() {
    let fx = Fixture::new(2500);
    let out = fx.run("diagnose", "diag", &["--deterministic"]);
    let summary: serde_json::Value = serde_json::from_str(stdout(&out)).unwrap();
    assert_eq!(
        summary["matrices"],
        serde_json::json!(["residual-bn", "selection", "towers", "scaling"])
    );
    let root = fx.path("diag");
    let count = |dir: &str| {
        fs::read_dir(root.join(dir))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "summary.csv")
            .count()
    };
    assert_eq!(count("residual-bn"), 9);
    assert_eq!(count("selection"), 7);
    for name in ["ffn", "cross", "field", "phn", "phn+rl", "phn+prl"] {
        let (header, body) =
            parse_report(&fs::read_to_string(root.join(format!("towers/{name}.csv"))).unwrap()).unwrap();
        assert_eq!(body.len() - 1, 200, "{name}");
        assert!(header.iter().any(|(k, v)| k == "checkpoint_sha256" && v.len() == 64));
    }
    let text = layout(&root);
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/diagnose_layout.txt");
    if std::env::var_os("PHN_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, fs::read_to_string(&golden).unwrap());
}

#[test]
fn diagnose_accepts_a_matrix_file() {
    let fx = Fixture::new(600);
    let m = fx.path("matrix.toml");
    fs::write(&m, "[[cell]]\nname = \"deep\"\nffn_layers = 3\n\n[[cell]]\nname = \"prl+pbn\"\nresidual = \"prl\"\nbn = \"private\"\n").unwrap();
    stdout(&fx.run("diagnose", "custom", &["--matrix-file", s(&m)]));
    for f in ["custom/deep.csv", "custom/prl+pbn.csv", "custom/summary.csv"] {
        assert!(fx.path("custom").join(f).exists(), "{f}");
    }
    fs::write(&m, "[[cell]]\nname = \"x\"\nnot_a_field = 1\n").unwrap();
    let out = fx.run("diagnose", "bad", &["--matrix-file", s(&m)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn no_command_mutates_its_inputs() {
    let fx = Fixture::new(700);
    let before = hashes(&fx.path("data"));
    stdout(&fx.run("train", "run", &[]));
    stdout(&fx.run("grid", "grid", &["--depths", "1"]));
    stdout(&fx.run("diagnose", "diag", &["--matrix", "scaling"]));
    let run = fx.path("run");
    let run_before = hashes(&run);
    ok(&["eval", "--run", s(&run)]);
    assert_eq!(hashes(&fx.path("data")), before);
    assert_eq!(hashes(&run), run_before);
    let echo = run.join("config.toml");
    let clash = phn(&["train", "--config", s(&echo), "--out", s(&run)]);
    assert_eq!(clash.status.code(), Some(1));
    assert_eq!(hashes(&run).get(&echo), run_before.get(&echo));
    let clash = phn(&["eval", "--run", s(&run), "--out", s(&run)]);
    assert_eq!(clash.status.code(), Some(1));
    assert_eq!(hashes(&run).get(&echo), run_before.get(&echo));
}

fn error_of(out: &Output) -> ErrorRecord {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn failures_map_to_exit_codes_with_error_records() {
    let fx = Fixture::new(300);
    let missing = fx.path("nope.tsv");
    let bad = fx.path("bad");
    let out = phn(&["train", "--data", s(&missing), "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out).kind, "data_not_found");
    assert_eq!(read_error(&bad).unwrap().kind, "data_not_found");
    assert!(bad.join("config.toml").exists());
    assert_eq!(read_manifest(&bad).unwrap().status, "failed");

    let out = phn(&["eval", "--run", s(&fx.path("no-run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out).kind, "checkpoint_not_found");

    let out = phn(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out).kind, "usage");
    let out = phn(&["train", "--set", "model.depth=2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out).kind, "config");

    let garbage = fx.path("garbage.tsv");
    fs::write(&garbage, "1\ta\tb\tc\td\n7\ta\tb\tc\td\n").unwrap();
    let out = phn(&["train", "--data", s(&garbage), "--out", s(&fx.path("garbage"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out).kind, "parse");
    assert!(error_of(&out).message.contains("line 2"));

    let out = fx.run(
        "train",
        "diverge",
        &[
            "--set",
            "train.optimizer.kind=\"sgd\"",
            "--set",
            "train.optimizer.learning_rate=1e300",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out).kind, "divergence");

    assert_eq!(phn(&["--help"]).status.code(), Some(0));
}
