//! Binary-level tests: the full simulate -> train -> fuse -> analyze ->
//! validate flow, determinism of outputs, and exit-code contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_statfuse"))
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("statfuse-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn synth_config() -> &'static str {
    r#"
population = 2600
donor_rows = 700
recipient_rows = 1500
seed = 42
weight_scheme = "gamma"
replicate_count = 4
replicate_scale = 0.3

[[predictor]]
kind = "continuous"
name = "x1"
mean = 0.0
sd = 1.0

[[predictor]]
kind = "categorical"
name = "grp"
levels = ["a", "b", "c"]
probs = [0.5, 0.3, 0.2]

[[response]]
name = "elec"
link = "linear"
noise_sd = 4.0

[response.form]
intercept = 50.0

[response.form.coefficients]
x1 = 8.0

[response.form.level_effects]
grp = [0.0, 5.0, -4.0]

[[response]]
name = "fuel"
link = "logistic_multiclass"
levels = ["none", "gas", "oil"]

[[response.class_forms]]
intercept = 0.0

[response.class_forms.coefficients]
x1 = -1.0

[[response.class_forms]]
intercept = 0.2

[[response.class_forms]]
intercept = -0.4

[response.class_forms.coefficients]
x1 = 1.0
"#
}

fn fusion_spec() -> &'static str {
    r#"
percentiles = [0.166, 0.5, 0.833]
k = 120
block_k = 10
implicates = 3
seed = 7
chunk_rows = 50000

[[step]]
variables = ["elec"]

[[step]]
variables = ["fuel"]
"#
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup_training(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = dir.join("synth.toml");
    fs::write(&cfg, synth_config()).unwrap();
    let data = dir.join("data");
    run_ok(bin().args([
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]));
    let spec = dir.join("fusion.toml");
    fs::write(&spec, fusion_spec()).unwrap();
    let bundle = dir.join("bundle");
    run_ok(bin().args([
        "train",
        "--donor",
        data.join("donor.csv").to_str().unwrap(),
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        bundle.to_str().unwrap(),
        "--max-iterations",
        "60",
        "--early-stop",
        "15",
    ]));
    (data, spec, bundle)
}

fn read_sorted_files(dir: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().to_string();
            if name.ends_with(ext) {
                Some((name, fs::read(e.path()).unwrap()))
            } else {
                None
            }
        })
        .collect();
    files.sort();
    files
}

#[test]
fn full_flow_and_byte_determinism() {
    let dir = work_dir("flow");
    let (data, _spec, bundle) = setup_training(&dir);

    // Fuse twice with the same seed: byte-identical implicates. The second
    // run pins a different thread count via the env override, so equality
    // also proves thread-count invariance.
    let fused_a = dir.join("fused_a");
    let fused_b = dir.join("fused_b");
    for (out, threads) in [(&fused_a, "1"), (&fused_b, "3")] {
        run_ok(bin().env("STATFUSE_THREADS", threads).args([
            "fuse",
            "--bundle",
            bundle.to_str().unwrap(),
            "--recipient",
            data.join("recipient.csv").to_str().unwrap(),
            "--implicates",
            "3",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let a = read_sorted_files(&fused_a, ".csv");
    let b = read_sorted_files(&fused_b, ".csv");
    assert_eq!(a.len(), 3);
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "implicate file {na} differs between runs");
    }

    // A different seed changes the draws.
    let fused_c = dir.join("fused_c");
    run_ok(bin().args([
        "fuse",
        "--bundle",
        bundle.to_str().unwrap(),
        "--recipient",
        data.join("recipient.csv").to_str().unwrap(),
        "--implicates",
        "3",
        "--seed",
        "12",
        "--out",
        fused_c.to_str().unwrap(),
    ]));
    let c = read_sorted_files(&fused_c, ".csv");
    assert!(a.iter().zip(&c).any(|((_, ba), (_, bc))| ba != bc));

    // Analyze: pooled mean by subgroup, with replicate weights.
    let est = dir.join("estimates.csv");
    run_ok(bin().args([
        "analyze",
        "--implicates",
        fused_a.to_str().unwrap(),
        "--recipient",
        data.join("recipient.csv").to_str().unwrap(),
        "--stat",
        "mean",
        "--var",
        "elec",
        "--by",
        "grp",
        "--replicate-weights",
        "--out",
        est.to_str().unwrap(),
    ]));
    let table = fs::read_to_string(&est).unwrap();
    assert!(table.lines().count() >= 4, "one row per grp level:\n{table}");
    assert!(table.starts_with("statistic,variable,subgroup,level,point,moe"));

    // Validate: report directory with three metric CSVs and three SVGs.
    let report = dir.join("report");
    run_ok(bin().args([
        "validate",
        "--bundle",
        bundle.to_str().unwrap(),
        "--donor",
        data.join("donor.csv").to_str().unwrap(),
        "--subset-vars",
        "grp",
        "--implicates",
        "3",
        "--seed",
        "3",
        "--out",
        report.to_str().unwrap(),
    ]));
    for stem in ["abs_pct_error", "value_added", "moe_ratio"] {
        assert!(report.join(format!("validation_{stem}.csv")).exists());
        let svg = fs::read_to_string(report.join(format!("validation_{stem}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
    assert!(report.join("run_manifest.json").exists());

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn chunk_rows_do_not_change_output() {
    let dir = work_dir("chunks");
    let (data, _spec, bundle) = setup_training(&dir);
    let out_whole = dir.join("whole");
    let out_chunked = dir.join("chunked");
    for (out, chunk) in [(&out_whole, "50000"), (&out_chunked, "97")] {
        run_ok(bin().args([
            "fuse",
            "--bundle",
            bundle.to_str().unwrap(),
            "--recipient",
            data.join("recipient.csv").to_str().unwrap(),
            "--implicates",
            "2",
            "--seed",
            "5",
            "--chunk-rows",
            chunk,
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let a = read_sorted_files(&out_whole, ".csv");
    let b = read_sorted_files(&out_chunked, ".csv");
    for ((na, ba), (_, bb)) in a.iter().zip(&b) {
        assert_eq!(ba, bb, "chunking changed {na}");
    }
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn long_format_carries_implicate_column() {
    let dir = work_dir("long");
    let (data, _spec, bundle) = setup_training(&dir);
    let out = dir.join("fused_long");
    run_ok(bin().args([
        "fuse",
        "--bundle",
        bundle.to_str().unwrap(),
        "--recipient",
        data.join("recipient.csv").to_str().unwrap(),
        "--implicates",
        "2",
        "--seed",
        "1",
        "--long",
        "--out",
        out.to_str().unwrap(),
    ]));
    let body = fs::read_to_string(out.join("implicates_long.csv")).unwrap();
    assert!(body.starts_with("implicate,id,elec,fuel"));
    // 2 implicates x 1500 recipients + header.
    assert_eq!(body.lines().count(), 1 + 2 * 1500);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_input_exits_two_with_path() {
    let out = bin()
        .args([
            "train",
            "--donor",
            "/nonexistent/donor.csv",
            "--spec",
            "/nonexistent/spec.toml",
            "--out",
            "/tmp/statfuse-nowhere",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent"), "{stderr}");
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let out = bin().args(["train", "--bogus-flag", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn incompatible_recipient_is_a_contract_error() {
    let dir = work_dir("compat");
    let (data, _spec, bundle) = setup_training(&dir);
    // Feed the donor as the recipient: fusion variables already present.
    let out = bin()
        .args([
            "fuse",
            "--bundle",
            bundle.to_str().unwrap(),
            "--recipient",
            data.join("donor.csv").to_str().unwrap(),
            "--implicates",
            "1",
            "--seed",
            "0",
            "--out",
            dir.join("bad").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("already present"), "{stderr}");
    fs::remove_dir_all(&dir).unwrap();
}
