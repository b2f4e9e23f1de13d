//! End-to-end checks of the `bseg` binary: exit codes, artifact layout,
//! and byte-level determinism across reruns and thread counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bseg"))
}

fn run(args: &[&str]) -> Output {
    bseg().args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

const SMOKE_CONFIG: &str = "\
task = crack
width = 48
height = 32
count = 8
max_epochs = 2
patience = 4
val_samples = 2
samples = 4
";

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

/// Every regular file under `dir`, keyed by relative path. The
/// `resolved_config.txt` echoes are skipped: they embed the caller's
/// absolute paths by design.
fn dir_digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "resolved_config.txt") {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_command_and_flag_exit_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--wat"])), 2);
}

#[test]
fn bad_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "definitely_not_a_key = 3\n");
    let out = run(&["generate-data", "--config", &config, "--out", "x"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("definitely_not_a_key"), "{stderr}");
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE_CONFIG);
    let out = run(&[
        "train",
        "--config",
        &config,
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("model").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn incompatible_image_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE_CONFIG);
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    assert_eq!(
        code(&run(&[
            "generate-data",
            "--config",
            &config,
            "--out",
            data.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            &config,
            "--data",
            data.to_str().unwrap(),
            "--out",
            model.to_str().unwrap()
        ])),
        0
    );
    // A grayscale image against a 3-channel crack model.
    let gray = dir.path().join("gray.pgm");
    fs::write(
        &gray,
        b"P5\n8 8\n255\n"
            .iter()
            .chain(&[128u8; 64])
            .copied()
            .collect::<Vec<u8>>(),
    )
    .unwrap();
    let out = run(&[
        "infer",
        "--model",
        model.join("checkpoint.ckpt").to_str().unwrap(),
        "--image",
        gray.to_str().unwrap(),
        "--out",
        dir.path().join("inf").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_data_is_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE_CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(
            code(&run(&[
                "generate-data",
                "--config",
                &config,
                "--out",
                out.to_str().unwrap()
            ])),
            0
        );
    }
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn benchmark_flag_strips_dropout_and_zeroes_mcsv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE_CONFIG);
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    run(&[
        "generate-data",
        "--config",
        &config,
        "--out",
        data.to_str().unwrap(),
    ]);
    let out = run(&[
        "train",
        "--config",
        &config,
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--benchmark",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let infer_dir = dir.path().join("inf");
    let out = run(&[
        "infer",
        "--model",
        model.join("checkpoint.ckpt").to_str().unwrap(),
        "--image",
        data.join("images/0000.ppm").to_str().unwrap(),
        "--out",
        infer_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Benchmark checkpoints make exactly one deterministic pass: the MCSV
    // heatmap renders uniformly black and its recorded range is zero.
    let heatmap = fs::read(infer_dir.join("mcsv.pgm")).unwrap();
    let payload = &heatmap[heatmap.len() - 48 * 32..];
    assert!(payload.iter().all(|&b| b == 0));
    let sidecar = fs::read_to_string(infer_dir.join("mcsv.minmax.txt")).unwrap();
    assert!(sidecar.contains("min=0e0"), "{sidecar}");
    // Default sample count is echoed into the run config.
    let resolved = fs::read_to_string(infer_dir.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("samples = 50"), "{resolved}");
}

#[test]
fn pipeline_is_byte_deterministic_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE_CONFIG);

    let run_pipeline = |root: &Path, threads: &str| {
        let data = root.join("data");
        let model = root.join("model");
        let eval = root.join("eval");
        let inf = root.join("inf");
        for args in [
            vec![
                "generate-data",
                "--config",
                config.as_str(),
                "--out",
                data.to_str().unwrap(),
            ],
            vec![
                "train",
                "--config",
                config.as_str(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                model.to_str().unwrap(),
            ],
            vec![
                "evaluate",
                "--model",
                model.join("checkpoint.ckpt").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--split",
                "test",
                "--out",
                eval.to_str().unwrap(),
                "--samples",
                "4",
            ],
            vec![
                "infer",
                "--model",
                model.join("checkpoint.ckpt").to_str().unwrap(),
                "--image",
                data.join("images/0001.ppm").to_str().unwrap(),
                "--out",
                inf.to_str().unwrap(),
                "--samples",
                "4",
            ],
        ] {
            let out = bseg()
                .args(&args)
                .env("BSEG_THREADS", threads)
                .output()
                .expect("binary runs");
            assert_eq!(
                out.status.code(),
                Some(0),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    };

    let (a, b, c) = (
        dir.path().join("runA"),
        dir.path().join("runB"),
        dir.path().join("runC"),
    );
    run_pipeline(&a, "2");
    run_pipeline(&b, "2");
    // A different thread cap must not change a single byte.
    run_pipeline(&c, "1");
    let da = dir_digest(&a);
    assert_eq!(da, dir_digest(&b), "rerun must be byte-identical");
    assert_eq!(da, dir_digest(&c), "thread count must not affect results");
}
