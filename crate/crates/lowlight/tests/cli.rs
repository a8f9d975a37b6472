//! End-to-end CLI behavior through the compiled binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use lowlight::image::{load_image, save_image, RgbImage};

fn lowlight_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowlight"))
        .args(args)
        .output()
        .expect("spawn lowlight")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn load_gray(path: &Path) -> Vec<u8> {
    match image::open(path).unwrap() {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => panic!("expected grayscale PNG, got {:?}", other.color()),
    }
}

/// Tiny but complete training setup: 3 images, micro network, 2 steps.
fn train_args<'a>(root: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--data-dir",
        root,
        "--dataset",
        "lol-v1",
        "--out-dir",
        out,
        "--iters",
        "2",
        "--batch-size",
        "2",
        "--crop",
        "16",
        "--seed",
        "3",
        "--channels",
        "4",
        "--res-blocks",
        "1",
        "--blocks",
        "1",
        "--layers",
        "1",
        "--window",
        "4",
        "--heads",
        "2",
    ]
}

#[test]
fn help_lists_flags_and_defaults() {
    for sub in ["train", "enhance", "snrmap", "eval"] {
        let out = lowlight_cmd(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout_of(&out);
        assert!(text.contains("--help"));
        match sub {
            "train" => {
                for flag in [
                    "--data-dir",
                    "--dataset",
                    "--out-dir",
                    "--iters",
                    "--batch-size",
                    "--lr",
                    "--crop",
                    "--seed",
                    "--lambda1",
                    "--lambda4",
                    "--no-snr",
                    "--config",
                    "--resume",
                    "--ckpt-every",
                ] {
                    assert!(text.contains(flag), "train help lacks {flag}:\n{text}");
                }
                assert!(text.contains("default: 2000"), "iters default missing");
                assert!(text.contains("default: 4"), "batch default missing");
            }
            "enhance" => {
                for flag in ["--ckpt", "--input", "--out-dir", "--emit-illumination"] {
                    assert!(text.contains(flag), "enhance help lacks {flag}");
                }
            }
            "snrmap" => {
                for flag in ["--input", "--kernel", "--eps", "--threshold"] {
                    assert!(text.contains(flag), "snrmap help lacks {flag}");
                }
                assert!(text.contains("0.5"), "threshold default missing");
            }
            "eval" => {
                for flag in ["--pred-dir", "--gt-dir", "--out"] {
                    assert!(text.contains(flag), "eval help lacks {flag}");
                }
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = lowlight_cmd(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lowlight_cmd(&["eval", "--bogus", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_batch_size_is_a_usage_error() {
    let out = lowlight_cmd(&["train", "--batch-size", "0"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn snrmap_writes_continuous_and_mask_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.png");
    save_image(&RgbImage::filled(8, 10, [0.4, 0.4, 0.4]), &flat).unwrap();
    let out = lowlight_cmd(&[
        "snrmap",
        "--input",
        flat.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let snr = load_gray(&dir.path().join("flat.snr.png"));
    let mask = load_gray(&dir.path().join("flat.mask.png"));
    assert!(snr.iter().all(|&v| v == 255));
    assert!(mask.iter().all(|&v| v == 255));

    let dark = dir.path().join("dark.png");
    save_image(&RgbImage::filled(8, 10, [0.0, 0.0, 0.0]), &dark).unwrap();
    let out = lowlight_cmd(&[
        "snrmap",
        "--input",
        dark.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(load_gray(&dir.path().join("dark.mask.png")).iter().all(|&v| v == 0));
}

#[test]
fn train_enhance_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_lol_v1_fixture(dir.path(), 3, 2, (24, 20), (16, 16), 61);
    let root = dir.path().to_str().unwrap();
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_str().unwrap().to_string();

    let out = lowlight_cmd(&train_args(root, &out_str));
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(out_dir.join("loss.csv").exists());
    let ckpt = out_dir.join("checkpoint_final.ckpt");
    assert!(ckpt.exists());

    // enhance a single file
    let single_out = dir.path().join("single");
    let input = dir.path().join("eval15/low/000.png");
    let out = lowlight_cmd(&[
        "enhance",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out-dir",
        single_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let enhanced = load_image(&single_out.join("000.png")).unwrap();
    let original = load_image(&input).unwrap();
    assert_eq!(enhanced.height(), original.height());
    assert_eq!(enhanced.width(), original.width());

    // enhance a directory, with illumination maps
    let batch_out = dir.path().join("batch");
    let out = lowlight_cmd(&[
        "enhance",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        dir.path().join("eval15/low").to_str().unwrap(),
        "--out-dir",
        batch_out.to_str().unwrap(),
        "--emit-illumination",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    for i in 0..2 {
        assert!(batch_out.join(format!("{i:03}.png")).exists());
        assert!(batch_out.join(format!("{i:03}.illum.png")).exists());
    }

    // eval of a directory against itself is perfect
    let csv_path = dir.path().join("scores.csv");
    let out = lowlight_cmd(&[
        "eval",
        "--pred-dir",
        batch_out.to_str().unwrap(),
        "--gt-dir",
        batch_out.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    // illumination maps are grayscale and fail to load as RGB
    assert_eq!(out.status.code(), Some(1));

    let gt_dir = dir.path().join("eval15/low");
    let pred_only_rgb = dir.path().join("pred_rgb");
    std::fs::create_dir_all(&pred_only_rgb).unwrap();
    for i in 0..2 {
        std::fs::copy(
            batch_out.join(format!("{i:03}.png")),
            pred_only_rgb.join(format!("{i:03}.png")),
        )
        .unwrap();
    }
    let out = lowlight_cmd(&[
        "eval",
        "--pred-dir",
        gt_dir.to_str().unwrap(),
        "--gt-dir",
        gt_dir.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("mean,100.000000,1.000000"), "stdout: {text}");
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), text);
    // 2 images + header + mean
    assert_eq!(text.trim().lines().count(), 4);

    // mismatched filename sets list the difference and fail
    let out = lowlight_cmd(&[
        "eval",
        "--pred-dir",
        pred_only_rgb.to_str().unwrap(),
        "--gt-dir",
        dir.path().join("our485/low").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("002.png"), "stderr: {}", stderr_of(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    write_lol_v1_fixture(dir.path(), 2, 1, (24, 20), (16, 16), 62);
    let out_dir = dir.path().join("cfg_run");
    let config = dir.path().join("train.conf");
    std::fs::write(
        &config,
        format!(
            "# smoke settings\ndata_dir={}\ndataset=lol-v1\nout_dir={}\niters=3\nbatch_size=2\ncrop=16\nchannels=4\nres_blocks=1\nblocks=1\nlayers=1\nwindow=4\nheads=2\nseed=5\n",
            dir.path().display(),
            out_dir.display()
        ),
    )
    .unwrap();

    // --iters overrides the config file's 3
    let out = lowlight_cmd(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--iters",
        "2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.trim().lines().count(), 3, "header + 2 rows:\n{csv}");

    // a bad config key is a configuration error (exit 1, named key)
    std::fs::write(&config, "data_dir=/x\ndataset=lol-v1\nout_dir=/y\nbogus=1\n").unwrap();
    let out = lowlight_cmd(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("bogus"));
}

#[test]
fn enhance_rejects_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"LLCKPT1\n[config]\ngarbage").unwrap();
    let img = dir.path().join("x.png");
    save_image(&RgbImage::filled(8, 8, [0.2, 0.2, 0.2]), &img).unwrap();
    let out = lowlight_cmd(&[
        "enhance",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        img.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("integrity"), "stderr: {}", stderr_of(&out));
}
