//! End-to-end tests of the `uada` binary: every subcommand is exercised
//! through a real process, and CLI results are cross-checked against the
//! library API they wrap.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uada::metrics::{cross_validate, MethodSpec};
use uada::phantom::{build_dataset, DatasetConfig};
use uada::trainer::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uada"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn uada");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        cmd.get_args().collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn small_dataset(dir: &Path) {
    let cfg = DatasetConfig {
        n_source: 6,
        n_target: 10,
        labeled_fraction: 0.5,
        slices_per_patient: 2,
        grid_size: 32,
        source_channels: 2,
        target_channels: 3,
        seed: 11,
    };
    build_dataset(&cfg, dir).unwrap();
}

fn tiny_train_json(mode: &str, iterations: u64) -> String {
    format!(
        r#"{{"iterations": {iterations}, "batch_size": 2, "checkpoint_every": {iterations},
            "eval_fold": 0, "seed": 5, "baseline_mode": "{mode}", "pretrain_iterations": 2,
            "translation": {{"source_channels": 2, "target_channels": 3,
                             "content_channels": 8, "style_dim": 2, "disc_width": 2}},
            "segmentation": {{"source_channels": 2, "target_channels": 3,
                              "width": 4, "kernel": 3}}}}"#
    )
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "translate", "eval", "sweep-ratio", "plot", "config"] {
        assert!(text.contains(sub), "--help does not mention {sub}");
    }
}

#[test]
fn unknown_flag_exits_one_with_stderr() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_dump_is_valid_json() {
    let out = run_ok(bin().arg("config"));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.get("dataset").is_some());
    assert!(v.get("train").is_some());
    // the dumped defaults round-trip through the config types
    let _: DatasetConfig = serde_json::from_value(v["dataset"].clone()).unwrap();
    let _: TrainConfig = serde_json::from_value(v["train"].clone()).unwrap();
}

#[test]
fn gen_data_writes_manifest_and_respects_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("d.json");
    fs::write(
        &cfg,
        r#"{"n_source": 2, "n_target": 4, "slices_per_patient": 1, "grid_size": 32,
            "source_channels": 1, "target_channels": 1, "seed": 1}"#,
    )
    .unwrap();
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&data));
    assert!(data.join("manifest.json").is_file());

    // a second run into the same directory must fail without --force
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    run_ok(
        bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&data)
            .arg("--force"),
    );
}

#[test]
fn train_is_deterministic_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("t.json");
    fs::write(&cfg, tiny_train_json("TARGET_ONLY", 3)).unwrap();
    for run in ["run_a", "run_b"] {
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&cfg)
                .arg("--data")
                .arg(&data)
                .arg("--out")
                .arg(tmp.path().join(run)),
        );
    }
    let a = fs::read(tmp.path().join("run_a/last.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("run_b/last.ckpt")).unwrap();
    assert_eq!(a, b, "same config and seed must produce identical checkpoints");

    // training logs exist and carry the expected header
    let log = fs::read_to_string(tmp.path().join("run_a/train_log.csv")).unwrap();
    assert!(log.starts_with("step,gan_src,"));
    assert!(tmp.path().join("run_a/config.json").is_file());
}

#[test]
fn eval_cli_matches_library_cross_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg_path = tmp.path().join("t.json");
    fs::write(&cfg_path, tiny_train_json("TARGET_ONLY", 2)).unwrap();
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join("run")),
    );

    // CLI evaluation of the run directory's config on folds 0 and 1
    let out = run_ok(
        bin()
            .args(["eval", "--ckpt"])
            .arg(tmp.path().join("run"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join("eval_cli"))
            .args(["--folds", "0,1"]),
    );
    let printed = String::from_utf8_lossy(&out.stdout).to_string();

    // the same evaluation through the library API
    let cfg: TrainConfig = serde_json::from_str(&tiny_train_json("TARGET_ONLY", 2)).unwrap();
    let table = cross_validate(
        &data,
        &tmp.path().join("eval_lib"),
        &[MethodSpec {
            name: "TARGET_ONLY".to_string(),
            config: cfg,
        }],
        &[0, 1],
    )
    .unwrap();
    assert_eq!(printed, table.text(), "CLI table must match the library's");
    let csv_cli = fs::read(tmp.path().join("eval_cli/metrics.csv")).unwrap();
    let csv_lib = fs::read(tmp.path().join("eval_lib/metrics.csv")).unwrap();
    assert_eq!(csv_cli, csv_lib);
}

#[test]
fn translate_writes_images_and_diversity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("t.json");
    fs::write(&cfg, tiny_train_json("STOCH_TRANSLATION_SEG", 2)).unwrap();
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join("run")),
    );
    let out_dir = tmp.path().join("trans");
    run_ok(
        bin()
            .args(["translate", "--ckpt"])
            .arg(tmp.path().join("run"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out_dir)
            .args(["-n", "3", "--slices", "0"]),
    );
    let names: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.contains("style")).count(), 3);
    assert!(names.iter().any(|n| n.ends_with("_source.png")));
    assert!(names.iter().any(|n| n.ends_with("_mask.png")));
    let div: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("diversity.json")).unwrap()).unwrap();
    assert_eq!(div["n_styles"], 3);

    // a segmentation-only checkpoint cannot translate: runtime error
    fs::write(&cfg, tiny_train_json("TARGET_ONLY", 1)).unwrap();
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join("run_seg")),
    );
    let fail = bin()
        .args(["translate", "--ckpt"])
        .arg(tmp.path().join("run_seg"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("trans2"))
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(2));
}

#[test]
fn plot_renders_svgs_from_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("t.json");
    fs::write(&cfg, tiny_train_json("TARGET_ONLY", 2)).unwrap();
    let run = tmp.path().join("run");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&run),
    );
    run_ok(bin().args(["plot", "--run"]).arg(&run));
    for f in ["loss_total.svg", "loss_terms.svg", "val.svg"] {
        let text = fs::read_to_string(run.join(f)).unwrap();
        assert!(text.starts_with("<svg"), "{f} is not an SVG");
    }
    // a directory without logs is a runtime error
    let fail = bin()
        .args(["plot", "--run"])
        .arg(tmp.path().join("nothing"))
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(2));
}

#[test]
fn data_dir_env_var_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("t.json");
    fs::write(&cfg, tiny_train_json("TARGET_ONLY", 1)).unwrap();
    run_ok(
        bin()
            .env("UADA_DATA_DIR", &data)
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join("run")),
    );
    // without the variable and without --data, a usage error
    let fail = bin()
        .env_remove("UADA_DATA_DIR")
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("run2"))
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
}
