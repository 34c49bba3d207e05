use std::path::Path;
use std::process::{Command, Output};

use ffasim_core::testkit::{wild_conditions, write_dataset, FakeBackbone, FakeSegmenter};
use ffasim_core::Matrix;

fn ffasim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffasim"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup(root: &Path) {
    write_dataset(root.join("data"), &["cups", "shoes"], 2, &wild_conditions(), 64).unwrap();
    FakeBackbone::default().write(root.join("backbone.onnx")).unwrap();
    FakeSegmenter::default().write(root.join("segmenter.onnx")).unwrap();
    std::fs::write(
        root.join("run.toml"),
        "dataset = \"data\"\nbackbone = \"backbone.onnx\"\nsegmenter = \"segmenter.onnx\"\n\
         cache_dir = \"cache\"\nprotocols = [\"wild\"]\nseed = 3\n",
    )
    .unwrap();
}

#[test]
fn extract_then_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    setup(root);
    let out = ffasim(&["extract", "--config", "run.toml", "--out", "x"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("x/report.json").exists());

    let out = ffasim(
        &[
            "benchmark",
            "--config",
            "run.toml",
            "--variant",
            "global",
            "--jobs",
            "2",
            "--out",
            "b",
        ],
        root,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(root.join("b/table.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);
    assert!(table.starts_with("variant,protocol,metric,value\nglobal,wild,map,"));
    assert_eq!(table.lines().count(), 4);
    let manifest = std::fs::read_to_string(root.join("b/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
    assert!(manifest.contains("\"toolkit_version\""));
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    setup(root);
    let out = ffasim(&["benchmark", "--config", "missing.toml"], root);
    assert!(!out.status.success());
    let out = ffasim(&["benchmark", "--config", "run.toml", "--backbone", "nope.onnx"], root);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.onnx"));
    let out = ffasim(&["benchmark", "--config", "run.toml", "--variant", "bogus"], root);
    assert!(!out.status.success());
    let out = ffasim(&["benchmark", "--config", "run.toml", "--protocol", "side"], root);
    assert!(!out.status.success());
}

#[test]
fn fuse_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(
        root.join("q.csv"),
        "path,vehicle_id,camera_id\nq0.jpg,1,0\nq1.jpg,2,0\n",
    )
    .unwrap();
    std::fs::write(
        root.join("g.csv"),
        "path,vehicle_id,camera_id\ng0.jpg,1,1\ng1.jpg,2,1\ng2.jpg,3,1\n",
    )
    .unwrap();
    Matrix::new(2, 3, vec![0.1, 0.6, 0.9, 0.2, 0.7, 0.9])
        .unwrap()
        .write(root.join("m.ismx"))
        .unwrap();
    Matrix::new(2, 3, vec![0.5, 0.3, 0.9, 0.6, 0.2, 0.9])
        .unwrap()
        .write(root.join("e.ismx"))
        .unwrap();
    std::fs::write(
        root.join("fuse.toml"),
        "[fusion]\nqueries = \"q.csv\"\ngallery = \"g.csv\"\nexternal_distances = \"e.ismx\"\n\
         model_distances = \"m.ismx\"\nalpha = 0.3\n",
    )
    .unwrap();
    let out = ffasim(&["fuse", "--config", "fuse.toml", "--out", "f"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(root.join("f/table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "alpha,top1,top5,selected");
    assert_eq!(lines[1], "0.00,50.0000,100.0000,0");
    assert!(lines.contains(&"0.30,100.0000,100.0000,1"));

    let out = ffasim(&["sweep", "--config", "fuse.toml", "--out", "s"], root);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(root.join("s/table.csv"))
            .unwrap()
            .lines()
            .count(),
        10
    );

    Matrix::new(3, 3, vec![0.0; 9])
        .unwrap()
        .write(root.join("e.ismx"))
        .unwrap();
    let out = ffasim(&["fuse", "--config", "fuse.toml", "--out", "f2"], root);
    assert!(!out.status.success());
}
