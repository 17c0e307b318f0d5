//! End-to-end runs of the `pcc` binary on tiny configurations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcc_core::datagen::{render_depth, sample_surface, Camera, NoiseSpec, ShapeFamily, ShapeSpec};
use pcc_core::geometry::io::{write_intrinsics, write_pgm16, write_xyz};
use pcc_core::geometry::RigidTransform;

const TINY: &str = r#"
input_points = 32

[dataset.synth]
poses_per_family = 4
points = 32
width = 64
height = 48

[decoder]
surfaces = 4
points_per_surface = 8

[train]
epochs = 2
batch_size = 4
lr = 0.001

[ablation]
encoders = ["mlp"]
seed_distributions = [{ kind = "zero" }]
surfaces = [4, 8]
seeds = [1]
"#;

fn pcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pcc(args);
    assert!(
        out.status.success(),
        "pcc {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["--config", s(&config), "dataset", "synth", "--out", s(&data), "--seed", "3"]);
    Workspace {
        _dir: dir,
        root,
        config,
        data,
    }
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["dataset", "synth", "--profile", "toy", "--seed", "7", "--out", s(&a)]);
    ok(&["dataset", "synth", "--profile", "toy", "--seed", "7", "--out", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 200 * 3 + 3);
    assert!(ta == tb, "directories differ");
    assert!(ok(&["dataset", "validate", s(&a)]).contains("ok"));
    // refuses to overwrite
    assert_eq!(pcc(&["dataset", "synth", "--out", s(&a)]).status.code(), Some(2));
}

fn write_frames(dir: &Path, frames: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let camera = Camera::with_resolution(80, 60);
    let spec = ShapeSpec::reference(
        ShapeFamily::Mug,
        RigidTransform::from_axis_angle([1.0, 0.2, 0.0], 0.9).with_translation([0.0, 0.0, 0.6]),
    );
    let depth = dir.join("depth");
    let labels = dir.join("labels");
    fs::create_dir_all(&depth).unwrap();
    fs::create_dir_all(&labels).unwrap();
    for f in 0..frames {
        let r = render_depth(&spec, &camera, &NoiseSpec::default(), 7, f as u64).unwrap();
        let name = format!("frame{f:04}.pgm");
        write_pgm16(&depth.join(&name), &r.depth.quantize(camera.intrinsics.depth_scale)).unwrap();
        write_pgm16(&labels.join(&name), &r.labels).unwrap();
    }
    let intr = dir.join("intrinsics.txt");
    write_intrinsics(&intr, &camera.intrinsics).unwrap();
    let model = dir.join("mug.xyz");
    write_xyz(&model, &sample_surface(&spec.geometry, 1024, 1).unwrap()).unwrap();
    (depth, labels, intr, model)
}

#[test]
fn ingest_keeps_every_fifth_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (depth, labels, intr, model) = write_frames(dir.path(), 10);
    let out = dir.path().join("ingested");
    let model_arg = format!("7:mug:{}", s(&model));
    let stdout = ok(&[
        "dataset", "ingest", "--depth", s(&depth), "--labels", s(&labels), "--intrinsics", s(&intr),
        "--model", &model_arg, "--stride", "5", "--points", "64", "--out", s(&out),
    ]);
    assert!(stdout.contains("retained 2 frames"), "{stdout}");
    ok(&["dataset", "validate", s(&out)]);

    let missing = dir.path().join("no_such_intrinsics.txt");
    let res = pcc(&[
        "dataset", "ingest", "--depth", s(&depth), "--labels", s(&labels), "--intrinsics", s(&missing),
        "--model", &model_arg, "--out", s(&dir.path().join("other")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_such_intrinsics.txt"));
}

#[test]
fn train_eval_complete_pipeline() {
    let w = workspace();
    let cfg = s(&w.config);
    let run = w.root.join("run");
    ok(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&run), "--seed", "5"]);
    for f in ["config.toml", "checkpoint.ckpt", "history.csv", "curve_emd.svg", "curve_cd.svg"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,cd,emd\n0,val,"));
    assert_eq!(history.lines().count(), 1 + 1 + 2 * 2);

    // second run without --resume refuses to touch the checkpoint
    let again = pcc(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&run)]);
    assert_eq!(again.status.code(), Some(2));

    let ckpt = run.join("checkpoint.ckpt");
    let eval_dir = w.root.join("eval");
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&w.data), "--split", "train", "--out", s(&eval_dir)]);
    assert!(table.contains("oracle"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    for (_, m) in report["per_object"].as_object().unwrap() {
        assert!(m["cd"].as_f64().unwrap().is_finite() && m["emd"].as_f64().unwrap().is_finite());
    }
    assert!(report["oracle"]["emd"].as_f64().unwrap() > 0.0);
    assert!(fs::read_dir(eval_dir.join("snapshots")).unwrap().count() > 0);

    let input = fs::read_dir(w.data.join("pairs/box")).unwrap().map(|e| e.unwrap().path()).find(|p| s(p).ends_with(".partial.xyz")).unwrap();
    let truth = PathBuf::from(s(&input).replace(".partial.xyz", ".complete.xyz"));
    let out1 = w.root.join("c1.xyz");
    let out2 = w.root.join("c2.xyz");
    let printed = ok(&["complete", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out1), "--ground-truth", s(&truth)]);
    assert!(printed.contains("cd ") && printed.contains("emd "));
    ok(&["complete", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out2)]);
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    assert_eq!(fs::read_to_string(&out1).unwrap().lines().count(), 32);

    let big = w.root.join("big.ply");
    ok(&["complete", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&big), "--resolution", "128", "--surface-ids"]);
    let ids = fs::read_to_string(w.root.join("big.ply.surface")).unwrap();
    assert_eq!(ids.lines().count(), 128);
    assert_eq!(ids.lines().last(), Some("3"));
    let bad = pcc(&["complete", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&big), "--resolution", "30"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn resume_matches_uninterrupted_run_and_loss_is_echoed() {
    let w = workspace();
    let cfg = s(&w.config);
    let full = w.root.join("full");
    let split = w.root.join("split");
    ok(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&full), "--loss", "chamfer"]);
    ok(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&split), "--loss", "chamfer", "--epochs", "1"]);
    ok(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&split), "--loss", "chamfer", "--resume"]);
    let a = fs::read(full.join("history.csv")).unwrap();
    let b = fs::read(split.join("history.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(full.join("checkpoint.ckpt")).unwrap(), fs::read(split.join("checkpoint.ckpt")).unwrap());
    let resolved = fs::read_to_string(full.join("config.toml")).unwrap();
    assert!(resolved.contains("loss = \"chamfer\""), "{resolved}");

    // identical runs give identical CSVs
    let again = w.root.join("again");
    ok(&["--config", cfg, "train", "--data", s(&w.data), "--run-dir", s(&again), "--loss", "chamfer"]);
    assert_eq!(a, fs::read(again.join("history.csv")).unwrap());
}

#[test]
fn ablation_writes_documented_csv() {
    let w = workspace();
    let out = w.root.join("abl");
    ok(&["--config", s(&w.config), "ablate", "--data", s(&w.data), "--out", s(&out), "--epochs", "1"]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("encoder,seed_distribution,surfaces,seed,cd,emd,status"));
    assert_eq!(lines.filter(|l| l.ends_with(",ok")).count(), 2);
    assert!(out.join("summary.csv").exists() && out.join("ablation_emd.svg").exists());
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = pcc(&["--config", s(&bad), "dataset", "synth", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert_eq!(pcc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pcc(&["train", "--loss", "l1"]).status.code(), Some(2));

    let locked = dir.path().join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".lock"), "1").unwrap();
    let out = pcc(&["train", "--run-dir", s(&locked), "--data", s(&dir.path().join("none"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}
