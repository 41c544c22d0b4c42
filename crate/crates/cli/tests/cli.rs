use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scene_insert::imaging::BBox;
use scene_insert::render::{body_library, place_in_bbox, CameraSpec};

const BIN: &str = env!("CARGO_BIN_EXE_scene-insert");

const SMOKE_CONFIG: &str = r#"
[run]
resolution = 64
batch_size = 4
epochs = 100
max_steps = 50
validate_every = 25

[run.optimizer]
lr = 1e-2
warmup_steps = 10

[run.guidance]
steps = 10

[data]
resolution = 64
frames_per_video = 12
pairs_per_video = 2
val_fraction = 0.2
test_fraction = 0.2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SCENE_INSERT_BACKENDS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    ok(&run(&["--help"]));
    for sub in ["prepare-data", "train", "infer", "evaluate", "synth-videos"] {
        let out = run(&[sub, "--help"]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_two_and_name_the_flag() {
    let out = run(&[
        "infer", "--method", "direct", "--scene", "s.png", "--ref", "r.png", "--out", "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pose-depth"));

    let out = run(&["train", "--data", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stage"));

    assert_eq!(
        run(&["train", "--stage", "stage3", "--data", "d"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[run]\nlearning_rate = 3\n").unwrap();
    let out = run(&["prepare-data", "--videos", "v", "--out", "o", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "[run]\nresolution = 64\n").unwrap();
    let out = run(&["prepare-data", "--videos", "v", "--out", "o", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "resolution mismatch between tables");
}

#[test]
fn runtime_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let out = run(&[
        "train",
        "--stage",
        "direct",
        "--data",
        s(&dir.path().join("nowhere")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

struct Smoke {
    data: PathBuf,
    checkpoint: PathBuf,
    pred: PathBuf,
    report: PathBuf,
}

fn smoke(root: &Path, cfg: &Path, seed: &str) -> Smoke {
    let videos = root.join("videos");
    let data = root.join("data");
    let checkpoint = root.join("ck/direct.json");
    let pred = root.join("pred");
    let report = root.join("report.txt");
    ok(&run(&[
        "synth-videos",
        "--out",
        s(&videos),
        "--count",
        "5",
        "--seed",
        seed,
    ]));
    ok(&run(&[
        "prepare-data",
        "--videos",
        s(&videos),
        "--out",
        s(&data),
        "--config",
        s(cfg),
        "--seed",
        seed,
    ]));
    ok(&run(&[
        "train",
        "--stage",
        "direct",
        "--data",
        s(&data),
        "--out",
        s(&checkpoint),
        "--config",
        s(cfg),
        "--seed",
        seed,
    ]));
    ok(&run(&[
        "infer",
        "--method",
        "direct",
        "--data",
        s(&data),
        "--out",
        s(&pred),
        "--checkpoint",
        s(&checkpoint),
        "--config",
        s(cfg),
        "--seed",
        seed,
    ]));
    ok(&run(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--data",
        s(&data),
        "--out",
        s(&report),
        "--config",
        s(cfg),
    ]));
    Smoke {
        data,
        checkpoint,
        pred,
        report,
    }
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_smoke_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let a = smoke(&tmp.path().join("a"), &cfg, "7");
    let b = smoke(&tmp.path().join("b"), &cfg, "7");

    let csv = std::fs::read_to_string(a.report.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,SSIM,MSE,sim,depth_SSIM,depth_MSE"));
    assert!(lines.next().unwrap().starts_with("direct,"));
    assert!(csv.contains("published:direct,0.723,0.0177,0.893,0.896,0.0141"));

    assert_eq!(files_under(&a.data), files_under(&b.data));
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap()
    );
    assert_eq!(files_under(&a.pred), files_under(&b.pred));
    assert_eq!(
        std::fs::read(a.report.with_extension("csv")).unwrap(),
        std::fs::read(b.report.with_extension("csv")).unwrap()
    );
    for dir in [&a.data, &a.pred] {
        assert!(files_under(dir)
            .iter()
            .all(|(p, _)| !p.to_string_lossy().contains(".tmp")));
    }

    // single-scene inference from a record's files, with and without an explicit mask
    let record = std::fs::read_dir(&a.data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let single = tmp.path().join("single");
    let (scene, reference, pose, mask) = (
        record.join("scene.png"),
        record.join("ref.png"),
        record.join("depth_pose.png"),
        record.join("mask.png"),
    );
    let base = [
        "infer",
        "--method",
        "direct",
        "--scene",
        s(&scene),
        "--ref",
        s(&reference),
        "--pose-depth",
        s(&pose),
        "--checkpoint",
        s(&a.checkpoint),
        "--config",
        s(&cfg),
    ];
    let mut with_mask = base.to_vec();
    with_mask.extend(["--mask", s(&mask), "--out", s(&single)]);
    ok(&run(&with_mask));
    assert!(single.join("composite.png").is_file());
    let derived = tmp.path().join("derived");
    let mut without = base.to_vec();
    without.extend(["--out", s(&derived)]);
    ok(&run(&without));
    assert!(derived.join("composite.png").is_file());

    // pose from a posed mesh file instead of a depth map
    let cam = CameraSpec::centered(64, 64);
    let mesh = place_in_bbox(&body_library()[1], &cam, BBox::new(22, 12, 42, 52));
    let mesh_path = tmp.path().join("pose.mesh");
    std::fs::write(&mesh_path, mesh.to_text()).unwrap();
    let from_mesh = tmp.path().join("from-mesh");
    ok(&run(&[
        "infer",
        "--method",
        "direct",
        "--scene",
        s(&scene),
        "--ref",
        s(&reference),
        "--mesh",
        s(&mesh_path),
        "--checkpoint",
        s(&a.checkpoint),
        "--config",
        s(&cfg),
        "--out",
        s(&from_mesh),
    ]));
    assert!(from_mesh.join("composite.png").is_file());

    // a checkpoint for the wrong stage is refused as a usage error
    let out = run(&[
        "infer",
        "--method",
        "two-stage",
        "--data",
        s(&a.data),
        "--out",
        s(&tmp.path().join("x")),
        "--stage1-checkpoint",
        s(&a.checkpoint),
        "--stage2-checkpoint",
        s(&a.checkpoint),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
