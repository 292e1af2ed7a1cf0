use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn xvol(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvol"))
        .current_dir(dir)
        .env_remove("XVOL_PRECISION")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xvol(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: [&str; 8] = [
    "--set",
    "phantom.dims=[8,8,8]",
    "--set",
    "phantom.n_volumes=24",
    "--set",
    "phantom.band_thickness=2",
    "--set",
    "phantom.band_center=2",
];

fn dataset(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["phantom", "--out", name, "--seed", seed];
    args.extend(TINY);
    ok(dir, &args);
}

fn train_args<'a>(out: &'a str, manifest: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--out",
        out,
        "--trials",
        "1",
        "--set",
        manifest,
        "--set",
        "model.input_dims=[8,8,8]",
        "--set",
        "train.epochs=2",
        "--set",
        "train.learning_rate=0.001",
    ]
}

const MANIFEST: &str = "data.manifest=data/manifest.csv";

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), "data", "3");
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn files_with(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), "a", "9");
    dataset(dir.path(), "b", "9");
    let a = files_with(&dir.path().join("a"), ".octv");
    assert_eq!(a.len(), 24);
    for p in &a {
        assert_eq!(read(p), read(dir.path().join("b").join(p.file_name().unwrap())));
    }
    let manifest = String::from_utf8(read(dir.path().join("a/manifest.csv"))).unwrap();
    assert_eq!(manifest, String::from_utf8(read(dir.path().join("b/manifest.csv"))).unwrap());
    let positives = manifest.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).count();
    assert_eq!(positives, 12);
    assert!(dir.path().join("a/config.phantom.json").exists());
}

#[test]
fn training_is_reproducible_and_writes_artifacts() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("r1", MANIFEST));
    ok(d, &train_args("r2", MANIFEST));
    for f in ["metrics/trial_0.json", "metrics/aggregate.json", "trial_0/history.csv"] {
        assert_eq!(read(d.join("r1").join(f)), read(d.join("r2").join(f)), "{f}");
    }
    assert!(d.join("r1/trial_0/model.xvm").exists());
    let json: serde_json::Value = serde_json::from_slice(&read(d.join("r1/metrics/trial_0.json"))).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 7);
}

#[test]
fn rerun_from_echoed_config_reproduces_metrics() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("first", MANIFEST));
    ok(d, &["train", "--config", "first/config.train.json", "--out", "second"]);
    assert_eq!(read(d.join("first/metrics/trial_0.json")), read(d.join("second/metrics/trial_0.json")));
    assert_eq!(read(d.join("first/trial_0/model.xvm")), read(d.join("second/trial_0/model.xvm")));
}

#[test]
fn lambda_flag_reaches_echoed_config() {
    let dir = setup();
    let d = dir.path();
    let mut args = train_args("run", MANIFEST);
    args.extend(["--set", "train.lambda=0.3"]);
    ok(d, &args);
    let cfg: serde_json::Value = serde_json::from_slice(&read(d.join("run/config.train.json"))).unwrap();
    assert_eq!(cfg["train"]["lambda"], 0.3);
}

#[test]
fn finetune_refuses_fresh_model_without_force() {
    let dir = setup();
    let d = dir.path();
    let base = ["finetune", "--out", "ft", "--trials", "1", "--set", MANIFEST, "--set", "model.input_dims=[8,8,8]", "--set", "train.epochs=1"];
    let out = xvol(d, &base);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1"));
    let mut forced = base.to_vec();
    forced.push("--force");
    ok(d, &forced);
    assert!(d.join("ft/trial_0/model_stage2.xvm").exists());
    assert!(d.join("ft/metrics_stage2/trial_0.json").exists());
}

#[test]
fn finetune_continues_from_stage_one() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("run", MANIFEST));
    ok(d, &["finetune", "--config", "run/config.train.json", "--set", "train.epochs=1"]);
    assert!(d.join("run/metrics_stage2/aggregate.json").exists());
}

#[test]
fn eval_of_saved_model_matches_training_metrics() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("run", MANIFEST));
    ok(d, &["eval", "--out", "ev", "--set", MANIFEST, "--set", "eval.model=run/trial_0/model.xvm"]);
    assert_eq!(read(d.join("run/metrics/trial_0.json")), read(d.join("ev/eval/trial_0.json")));
}

#[test]
fn eval_threshold_zero_calls_everything_positive() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("run", MANIFEST));
    ok(d, &["eval", "--out", "ev", "--set", MANIFEST, "--set", "eval.model=run/trial_0/model.xvm", "--set", "train.threshold=0"]);
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("ev/eval/trial_0.json"))).unwrap();
    assert_eq!(m["sensitivity"], 1.0);
    assert_eq!(m["specificity"], 0.0);
}

#[test]
fn eval_with_empty_test_split_is_a_data_error() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("run", MANIFEST));
    let out = xvol(d, &["eval", "--out", "ev", "--set", MANIFEST, "--set", "eval.model=run/trial_0/model.xvm", "--set", "data.split=[0.5,0.5,0.0]"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

fn saliency_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "saliency",
        "--out",
        out,
        "--set",
        "saliency.model=run/trial_0/model.xvm",
        "--set",
        "saliency.volume=data/phantom-00000.octv",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn saliency_writes_both_methods() {
    // 16^3 keeps the deepest taps wider than one voxel
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "data", "--set", "phantom.dims=[16,16,16]", "--set", "phantom.n_volumes=12"]);
    let mut args = train_args("run", MANIFEST);
    args[8] = "model.input_dims=[16,16,16]";
    ok(d, &args);
    ok(d, &saliency_args("s", &[]));
    let sal = d.join("s/saliency");
    assert_eq!(files_with(&sal, ".pgm").len(), 4);
    assert_eq!(files_with(&sal, ".octv").len(), 2);

    ok(d, &saliency_args("m", &["--set", "saliency.morphology=true"]));
    let msal = d.join("m/saliency");
    for name in ["phantom-00000.care.octv", "phantom-00000.gradcam.octv"] {
        assert_eq!(read(sal.join(name)), read(msal.join(name)));
    }
    let changed = files_with(&sal, ".pgm")
        .iter()
        .filter(|p| read(p) != read(msal.join(p.file_name().unwrap())))
        .count();
    assert!(changed > 0);
}

#[test]
fn saliency_rejects_unknown_layer_listing_taps() {
    let dir = setup();
    let d = dir.path();
    ok(d, &train_args("run", MANIFEST));
    let out = xvol(d, &saliency_args("s", &["--set", "saliency.layer=conv9", "--set", "saliency.method=gradcam"]));
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("conv5") && err.contains("attn4"), "{err}");
}

#[test]
fn profile_reports_base_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = ok(d, &["profile", "--out", "p", "--set", "model.variant=Base"]);
    assert!(table.contains("conv params: 222080"), "{table}");
    let csv = String::from_utf8(read(d.join("p/profile.csv"))).unwrap();
    assert!(csv.starts_with("layer,params,flops\n"));
    assert!(csv.lines().any(|l| l.starts_with("total,222466,")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&xvol(d, &["profile", "--set", "model.variant=Unet"])), 1);
    assert_eq!(code(&xvol(d, &["profile", "--set", "train.no_such_field=1"])), 1);
    assert_eq!(code(&xvol(d, &["profile", "--set", "novalue"])), 1);
    assert_eq!(code(&xvol(d, &["frobnicate"])), 1);
    std::fs::write(d.join("bad.json"), r#"{"train": {"epochs": 3, "colour": "red"}}"#).unwrap();
    assert_eq!(code(&xvol(d, &["profile", "--config", "bad.json"])), 1);
    assert_eq!(code(&xvol(d, &["train", "--set", "data.manifest=missing.csv"])), 2);
}

#[test]
fn config_file_variant_takes_its_default_placement() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("base.json"), r#"{"model": {"variant": "Base"}}"#).unwrap();
    let table = ok(d, &["profile", "--config", "base.json", "--out", "p"]);
    assert!(table.contains("conv params: 222080"));
}

#[test]
fn f64_precision_from_environment_is_recorded_and_detected() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_xvol"))
        .current_dir(d)
        .env("XVOL_PRECISION", "f64")
        .args(train_args("run", MANIFEST))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&read(d.join("run/config.train.json"))).unwrap();
    assert_eq!(cfg["precision"], "f64");
    ok(d, &["eval", "--out", "ev", "--set", MANIFEST, "--set", "eval.model=run/trial_0/model.xvm"]);
    assert_eq!(read(d.join("run/metrics/trial_0.json")), read(d.join("ev/eval/trial_0.json")));
}

#[test]
fn parallel_trials_match_sequential_ones() {
    let dir = setup();
    let d = dir.path();
    let mut seq = train_args("seq", MANIFEST);
    seq[4] = "2";
    let mut par = train_args("par", MANIFEST);
    par[4] = "2";
    par.push("--parallel");
    ok(d, &seq);
    ok(d, &par);
    for f in ["metrics/trial_0.json", "metrics/trial_1.json", "metrics/aggregate.json"] {
        assert_eq!(read(d.join("seq").join(f)), read(d.join("par").join(f)), "{f}");
    }
}

#[test]
fn lambda_sweep_tabulates_the_grid() {
    let dir = setup();
    let d = dir.path();
    let mut args = train_args("ab", MANIFEST);
    args[0] = "ablate";
    args.insert(1, "lambda");
    args.extend(["--set", "train.epochs=1"]);
    ok(d, &args);
    let csv = String::from_utf8(read(d.join("ab/ablate_lambda.csv"))).unwrap();
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["0.25", "0.5", "0.75", "0.9", "1"]);
    assert!(d.join("ab/ablate_lambda/0.5/aggregate.json").exists());
}

#[test]
fn placement_sweep_enumerates_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "data", "--set", "phantom.dims=[16,16,16]", "--set", "phantom.n_volumes=12"]);
    ok(
        d,
        &[
            "ablate",
            "placement",
            "--out",
            "ab",
            "--trials",
            "1",
            "--set",
            MANIFEST,
            "--set",
            "model.input_dims=[16,16,16]",
            "--set",
            "train.epochs=1",
        ],
    );
    let csv = String::from_utf8(read(d.join("ab/ablate_placement.csv"))).unwrap();
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["1-2", "1-3", "2-3", "2-4", "2-5", "3-4", "3-5"]);
}

#[test]
fn fedavg_harmonizes_mixed_clients_and_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["phantom", "--out", "wide", "--seed", "4", "--set", "phantom.dims=[8,8,16]", "--set", "phantom.n_volumes=24", "--set", "phantom.band_thickness=2", "--set", "phantom.band_center=2"]);
    let run = |out: &str| {
        ok(
            d,
            &[
                "fedavg",
                "--out",
                out,
                "--set",
                "fed.clients=[\"data/manifest.csv\",\"wide/manifest.csv\"]",
                "--set",
                "fed.harmonize=[8,8,8]",
                "--set",
                "fed.rounds=2",
                "--set",
                "fed.local_epochs=1",
                "--set",
                "train.learning_rate=0.001",
            ],
        );
    };
    run("f1");
    run("f2");
    let log = String::from_utf8(read(d.join("f1/fed_rounds.csv"))).unwrap();
    assert_eq!(log.lines().next(), Some("round,client,local_loss,global_val_auroc"));
    assert_eq!(log.lines().count(), 5);
    assert_eq!(read(d.join("f1/fed_rounds.csv")), read(d.join("f2/fed_rounds.csv")));
    assert!(d.join("f1/model.xvm").exists());
}
