//! End-to-end runs of the `fpdeblur` binary on a micro configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = [
    "dataset",
    "pretrain-ridge",
    "pretrain-verifier",
    "train",
    "eval",
    "ablate",
    "deblur",
    "report",
];

/// 16² crops and networks small enough to train in seconds.
const MICRO: &str = r#"
[dataset]
subjects = 10
impressions = 2
sigmas = [3.0, 5.0]
crop_size = 16
splits = { train = 0.5, val = 0.2, test = 0.3 }

[ridge]
epochs = 1
batch_size = 4

[ridge.net]
base_resolution = 16
base_channels = 2
unet_depth = 2
max_channels = 4
verifier_blocks = 2
verifier_blocks_per_stage = 1
verifier_channels = 2
embedding_dim = 4
patchgan_layers = 1
disc_channels = 2
disc_kernel = 3

[verifier]
epochs = 1
pairs_per_epoch = 8
batch_size = 4

[verifier.net]
base_resolution = 16
base_channels = 2
unet_depth = 2
max_channels = 4
patchgan_layers = 1
disc_channels = 2
disc_kernel = 3
verifier_blocks = 2
verifier_blocks_per_stage = 1
verifier_channels = 2
embedding_dim = 4

[train]
epochs = 1
batch_size = 4

[train.net]
base_resolution = 16
base_channels = 2
unet_depth = 2
max_channels = 4
verifier_blocks = 2
verifier_blocks_per_stage = 1
verifier_channels = 2
embedding_dim = 4
patchgan_layers = 1
disc_channels = 2
disc_kernel = 3

[ablation]
sigma = 5.0

[eval]
quality = false
"#;

fn fpdeblur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpdeblur"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "status {:?}: {}", o.status, stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let o = fpdeblur(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--config"), "{sub}");
    }
}

#[test]
fn bad_flags_exit_with_usage_status() {
    let o = fpdeblur(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = fpdeblur(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = fpdeblur(&["train", "--set", "train.nope=1", "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "));
}

#[test]
fn missing_inputs_fail_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = fpdeblur(&[
        "pretrain-ridge",
        "--manifest",
        p(&dir.path().join("absent")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error["));
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        // Parsing and validation pass; only the missing corpus is reported.
        let out = dir.path().join(path.file_stem().unwrap());
        let o = fpdeblur(&["train", "--config", p(&path), "--manifest", p(&dir.path().join("absent")), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(1), "{}: {}", path.display(), stderr(&o));
        assert!(out.join("resolved_config.toml").exists());
    }
}

#[test]
fn dataset_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[dataset]\nsubjects = 9\nimpressions = 2\ncrop_size = 32\n").unwrap();
    let out = dir.path().join("d");
    ok(fpdeblur(&[
        "dataset",
        "--config",
        p(&cfg),
        "--synthetic",
        "3",
        "--sigmas",
        "3,5,7",
        "--set",
        "dataset.crop_size=32",
        "--out",
        p(&out),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 3 * 2 * 3);

    let snapshot = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    let table: toml::Table = snapshot.parse().unwrap();
    assert_eq!(table["dataset"]["subjects"].as_integer(), Some(3));
    assert_eq!(table["dataset"]["crop_size"].as_integer(), Some(32));
    // The snapshot is itself a valid configuration.
    let again = dir.path().join("again");
    ok(fpdeblur(&["dataset", "--config", p(&out.join("resolved_config.toml")), "--out", p(&again)]));
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), fs::read(again.join("manifest.json")).unwrap());
}

#[test]
fn full_pipeline_on_micro_networks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("micro.toml");
    fs::write(&cfg, MICRO).unwrap();
    let c = p(&cfg);
    let data = d.join("data");

    ok(fpdeblur(&["dataset", "-c", c, "--out", p(&data)]));
    ok(fpdeblur(&["pretrain-ridge", "-c", c, "--manifest", p(&data), "--out", p(&d.join("ridge"))]));
    ok(fpdeblur(&["pretrain-verifier", "-c", c, "--manifest", p(&data), "--out", p(&d.join("verifier"))]));
    let ridge = d.join("ridge/ridge_extractor.ckpt");
    let verifier = d.join("verifier/verifier.ckpt");
    assert!(ridge.exists() && verifier.exists());

    let frozen = ["--ridge", p(&ridge), "--verifier", p(&verifier)];
    let gan = d.join("gan");
    let mut train = vec!["train", "-c", c, "--manifest", p(&data), "--out", p(&gan)];
    train.extend(frozen);
    ok(fpdeblur(&train));
    let generator = d.join("gan/final/generator.ckpt");
    assert!(generator.exists());

    ok(fpdeblur(&[
        "eval",
        "-c",
        c,
        "--manifest",
        p(&data),
        "--generator",
        p(&generator),
        "--verifier",
        p(&verifier),
        "--out",
        p(&d.join("eval")),
    ]));

    let ablation = d.join("ablation");
    let mut ablate = vec!["ablate", "-c", c, "--manifest", p(&data), "--out", p(&ablation)];
    ablate.extend(frozen);
    ok(fpdeblur(&ablate));

    let report = d.join("report");
    ok(fpdeblur(&[
        "report",
        "--eval",
        p(&d.join("eval")),
        "--ablation",
        p(&d.join("ablation")),
        "--out",
        p(&report),
    ]));
    let md = fs::read_to_string(report.join("report.md")).unwrap();
    for v in fpdeblur_core::objective::Variant::ALL {
        let name = v.display_name();
        assert!(md.contains(&format!("| {name} |")), "missing ablation row {name}:\n{md}");
    }
    assert!(md.contains("| 3 |") && md.contains("| 5 |"), "{md}");

    // Deblur a raw print, and an already cropped one without preprocessing.
    let raw = d.join("raw.png");
    let (print, _) = fpdeblur_core::dataops::synth_fingerprint(3, 128);
    print.write_png(&raw).unwrap();
    let out = d.join("out/raw_deblurred.png");
    ok(fpdeblur(&["deblur", "--checkpoint", p(&generator), "--in", p(&raw), "--out", p(&out)]));
    let img = fpdeblur_core::dataops::GrayImage::read_png(&out).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
    assert!(d.join("out/raw_deblurred.config.toml").exists());

    let o = fpdeblur(&[
        "deblur",
        "--checkpoint",
        p(&generator),
        "--in",
        p(&raw),
        "--no-preprocess",
        "--out",
        p(&d.join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[data]: "));
    ok(fpdeblur(&[
        "deblur",
        "--checkpoint",
        p(&generator),
        "--in",
        p(&out),
        "--no-preprocess",
        "--out",
        p(&d.join("again.png")),
    ]));
}
