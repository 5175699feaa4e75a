//! End-to-end runs of the `mfg` binary on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mfg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MFG_RUN_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mfg")
}

fn ok(args: &[&str], out: &Path) {
    let o = mfg(args, out);
    assert!(o.status.success(), "mfg {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn set(kv: &str) -> [&str; 2] {
    ["--set", kv]
}

/// Small but complete pipeline settings shared by every run.
const TINY: &[&str] = &[
    "--set",
    "corpus.count=7",
    "--set",
    "train.steps=3",
    "--set",
    "train.batch_size=2",
    "--set",
    "schedule.steps=20",
    "--set",
    "codesign.t_max=10",
    "--set",
    "codesign.delta_t=5",
    "--set",
    "sample.count=2",
    "--set",
    "sample.n_points=64",
];

fn with<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

fn train_checkpoint(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(&with("gen-corpus", &[]), &corpus);
    let train = dir.join("train");
    let c = format!("corpus_dir={}", corpus.join("corpus").display());
    ok(&with("train", &set(&c)), &train);
    train.join("denoiser.ckpt")
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path());
    let again = dir.path().join("again");
    let c = format!("corpus_dir={}", dir.path().join("corpus/corpus").display());
    ok(&with("train", &set(&c)), &again);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("denoiser.ckpt")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("train/manifest.json")).unwrap(),
        fs::read(again.join("manifest.json")).unwrap()
    );

    let k = format!("checkpoint={}", ckpt.display());
    let (a, b) = (dir.path().join("s1"), dir.path().join("s2"));
    ok(&with("sample", &set(&k)), &a);
    ok(&with("sample", &set(&k)), &b);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert!(a.join("samples/sample_0001.json").exists());
    assert!(a.join("config.json").exists() && a.join("run.log").exists());
}

#[test]
fn codesign_without_inner_steps_equals_sampling_and_evaluate_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path());
    let k = format!("checkpoint={}", ckpt.display());
    let plain = dir.path().join("plain");
    ok(&with("sample", &set(&k)), &plain);
    let cd = dir.path().join("cd");
    ok(&with("codesign", &[set(&k), set("codesign.k=0")].concat()), &cd);
    for i in 0..2 {
        let name = format!("samples/sample_{i:04}.json");
        assert_eq!(fs::read(plain.join(&name)).unwrap(), fs::read(cd.join(&name)).unwrap());
    }
    assert_eq!(
        fs::read_to_string(plain.join("metrics.csv")).unwrap(),
        fs::read_to_string(cd.join("metrics.csv")).unwrap()
    );

    let ev = dir.path().join("eval");
    let inputs = format!("evaluate.inputs=[\"{}\"]", plain.join("samples").display());
    ok(&with("evaluate", &set(&inputs)), &ev);
    let perf = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(perf(&plain.join("metrics.csv")), perf(&ev.join("metrics.csv")));
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(mfg(&["show-config", "--set", "task=flying"], &out).status.code(), Some(1));
    assert_eq!(mfg(&["sample", "--set", "nope=1"], &out).status.code(), Some(1));
    assert_eq!(mfg(&["sample"], &out).status.code(), Some(1), "checkpoint unset");
    let missing = format!("checkpoint={}", dir.path().join("absent.ckpt").display());
    assert_eq!(mfg(&["sample", "--set", &missing], &out).status.code(), Some(2));
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let bad = format!("checkpoint={}", garbage.display());
    assert_eq!(mfg(&["sample", "--set", &bad], &out).status.code(), Some(2));
    let shown = mfg(&["show-config", "--set", "task=landing"], &out);
    assert!(shown.status.success());
    let v: serde_json::Value = serde_json::from_slice(&shown.stdout).unwrap();
    assert_eq!(v["codesign"]["t_max"], 150);
}

#[test]
fn baseline_and_render_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    ok(
        &[
            "baseline",
            "--set",
            "baseline.iters=1",
            "--set",
            "baseline.restarts=2",
            "--set",
            "baseline.kinds=[\"voxel\"]",
        ],
        &base,
    );
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(base.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["kind"], "voxel");
    assert_eq!(fs::read_to_string(base.join("history.csv")).unwrap().lines().count(), 1 + 2 * 2);

    let corpus = dir.path().join("corpus");
    ok(&with("gen-corpus", &[]), &corpus);
    let shape = corpus.join("corpus/shape_00004.json");
    let render = dir.path().join("render");
    let input = format!("render.input={}", shape.display());
    let plot = format!("render.plot_csv={}", base.join("history.csv").display());
    ok(
        &[
            "render",
            "--set",
            &input,
            "--set",
            &plot,
            "--set",
            "render.plot_x=iter",
            "--set",
            "render.plot_y=performance",
        ],
        &render,
    );
    assert!(render.join("frames/frame_0000.svg").exists());
    assert!(fs::read_to_string(render.join("plot.svg")).unwrap().contains("<polyline"));
    let manifest = fs::read_to_string(render.join("manifest.json")).unwrap();
    assert!(manifest.contains("trajectory.csv") && !manifest.contains("run.log"));
}
