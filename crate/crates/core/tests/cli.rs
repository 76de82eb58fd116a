//! End-to-end run of the `qlip` binary on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

use qlip::imageio::{read_image, write_image};
use qlip::syndata::{gen_pair_corpus_split, Split};
use qlip::tokcodec::load_qltk;
use qlip::trainer::MetricsLog;

fn qlip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlip")).args(args).output().expect("spawn qlip")
}

fn ok(args: &[&str]) -> String {
    let out = qlip(args);
    assert!(
        out.status.success(),
        "qlip {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (train, val) = (d.join("train"), d.join("val"));
    ok(&["gen-data", "--n", "48", "--out", s(&train), "--text-tokens", "4000"]);
    ok(&["gen-data", "--n", "24", "--split", "val", "--seed", "1", "--out", s(&val)]);
    assert!(train.join("text.u32").exists() && train.join("manifest.json").exists());

    let s1 = d.join("s1");
    let fast = ["--preset", "toy", "--set", "total_steps=6", "--set", "warmup=1", "--set", "batch_size=16"];
    ok(&[&["train-qlip", "--data", s(&train), "--out", s(&s1)][..], &fast].concat());
    for f in ["config.txt", "model.ckpt", "metrics.tsv", "manifest.json"] {
        assert!(s1.join(f).exists(), "missing {f}");
    }
    let log = MetricsLog::load(&s1.join("metrics.tsv")).unwrap();
    assert_eq!(log.series("mse").len(), 6);

    let s2 = d.join("s2");
    let ckpt1 = s1.join("model.ckpt");
    ok(&[&["finetune-stage2", "--ckpt", s(&ckpt1), "--data", s(&train), "--out", s(&s2)][..], &fast].concat());
    let ckpt = s2.join("model.ckpt");

    let img = gen_pair_corpus_split(1, 16, 9, Split::Val).unwrap().pairs.remove(0).image;
    let (src, tok, back) = (d.join("in.ppm"), d.join("in.qltk"), d.join("back.ppm"));
    write_image(&src, &img).unwrap();
    ok(&["tokenize", "--ckpt", s(&ckpt), "--in", s(&src), "--out", s(&tok)]);
    let grid = load_qltk(&tok).unwrap();
    assert_eq!((grid.height, grid.width, grid.bits), (4, 4, 12));
    ok(&["detokenize", "--ckpt", s(&ckpt), "--in", s(&tok), "--out", s(&back)]);
    let decoded = read_image(&back).unwrap();
    assert_eq!((decoded.height, decoded.width), (16, 16));

    let results = d.join("results.tsv");
    let report = ok(&["eval", "--ckpt", s(&ckpt), "--train", s(&train), "--heldout", s(&val), "--results", s(&results), "--run", "tiny"]);
    assert!(report.contains("zero_shot_acc"));
    assert_eq!(std::fs::read_to_string(&results).unwrap().lines().count(), 2);

    let um3 = d.join("um3");
    let text = train.join("text.u32");
    ok(&[
        "train-um3", "--ckpt", s(&ckpt), "--data", s(&train), "--text", s(&text), "--out", s(&um3),
        "--set", "pretrain.total_steps=4", "--set", "pretrain.warmup=1", "--set", "pretrain.eval_every=2",
        "--set", "total_steps=4", "--set", "warmup=1", "--set", "eval_every=2", "--set", "mix.calm_steps=2",
        "--set", "batch_size=4", "--set", "pretrain.batch_size=4",
    ]);
    for f in ["base.ckpt", "pretrain_metrics.tsv", "um3.ckpt", "metrics.tsv"] {
        assert!(um3.join(f).exists(), "missing {f}");
    }

    let gen = d.join("gen.ppm");
    ok(&["generate", "--model", s(&um3.join("um3.ckpt")), "--ckpt", s(&ckpt), "--prompt", "a red square", "--out", s(&gen)]);
    assert!(gen.exists() && d.join("gen.qltk").exists());

    let probe_log = d.join("probe.tsv");
    ok(&[&["probe-grads", "--ckpt", s(&ckpt1), "--data", s(&train), "--log", s(&probe_log)][..], &fast].concat());
    assert_eq!(MetricsLog::load(&probe_log).unwrap().records.len(), 4);

    let plots = d.join("plots");
    ok(&["plot", "--metrics", s(&s1.join("metrics.tsv")), "--out", s(&plots), "--names", "mse,align", "--log-y"]);
    assert!(std::fs::read_dir(&plots).unwrap().count() >= 1);
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_errors() {
    assert_eq!(qlip(&["train-qlip"]).status.code(), Some(1));
    assert_eq!(qlip(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = qlip(&["detokenize", "--ckpt", s(&missing), "--in", "x.qltk", "--out", "y.ppm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    ok(&["gen-data", "--n", "4", "--out", s(&train)]);
    let out = qlip(&["train-qlip", "--data", s(&train), "--out", s(&dir.path().join("o")), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
}
