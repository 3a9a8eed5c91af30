//! End-to-end runs of the `odm` binary on a small synthetic set.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model_dim=16",
    "heads=2",
    "spatial_dim=16",
    "ffn_dim=32",
    "encoder_layers=1",
    "decoder_layers=1",
    "intention.layers=1",
    "intention.heads=2",
    "intention.model_dim=16",
    "intention.ffn_dim=32",
    "batch=16",
];

fn odm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odm"))
        .args(args)
        .output()
        .expect("run odm")
}

fn ok(args: &[&str]) -> String {
    let out = odm(args);
    assert!(
        out.status.success(),
        "odm {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_overrides() -> Vec<String> {
    TINY.iter()
        .flat_map(|kv| ["--override".to_string(), kv.to_string()])
        .collect()
}

fn synth(dir: &Path, n: usize) -> String {
    let data = dir.join("data.jsonl").to_string_lossy().into_owned();
    ok(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        "5",
        "--out",
        &data,
    ]);
    data
}

fn train(data: &str, out: &Path, epochs: usize) -> String {
    let out = out.to_string_lossy().into_owned();
    let epochs = epochs.to_string();
    let mut args = vec![
        "train", "--data", data, "--epochs", &epochs, "--seed", "3", "--out", &out,
    ];
    let extra = tiny_overrides();
    args.extend(extra.iter().map(String::as_str));
    ok(&args)
}

fn first_id(data: &str) -> String {
    let text = fs::read_to_string(data).unwrap();
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    line["id"].as_str().unwrap().to_string()
}

#[test]
fn synth_train_eval_reconstruct_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40);
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 40);

    let run = dir.path().join("run");
    let log = train(&data, &run, 1);
    assert!(log.contains("lr=1e-4") && log.contains("K=100"), "{log}");
    for f in [
        "checkpoint.json",
        "metrics.csv",
        "splits.json",
        "config.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let ckpt = run.join("checkpoint.json").to_string_lossy().into_owned();
    let eval_dir = dir.path().join("eval");
    let eval = eval_dir.to_string_lossy().into_owned();
    ok(&[
        "eval",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--patterns",
        "EO",
        "--lengths",
        "1-3",
        "--out",
        &eval,
    ]);
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 3);

    let zero_dir = dir.path().join("zero");
    let zero = zero_dir.to_string_lossy().into_owned();
    ok(&[
        "eval",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--lengths",
        "0",
        "--out",
        &zero,
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(zero_dir.join("report.json")).unwrap()).unwrap();
    let cells = json["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert!(cells[0]["ade_center"].as_f64().unwrap() < 1e-2);

    let id = first_id(&data);
    let rec = dir.path().join("rec.json");
    let rec_s = rec.to_string_lossy().into_owned();
    ok(&[
        "reconstruct",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--id",
        &id,
        "--out",
        &rec_s,
    ]);
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rec).unwrap()).unwrap();
    assert_eq!(dump["id"], id.as_str());
    assert_eq!(dump["occluded_frames"].as_array().unwrap().len(), 3);
    assert_eq!(dump["reconstruction"].as_array().unwrap().len(), 15);

    let plots = dir.path().join("plots");
    let plots_s = plots.to_string_lossy().into_owned();
    ok(&[
        "plot-denoise",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--id",
        &id,
        "--out",
        &plots_s,
    ]);
    let mut pngs: Vec<String> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    assert_eq!(
        pngs,
        [
            "denoise_k000.png",
            "denoise_k025.png",
            "denoise_k050.png",
            "denoise_k075.png",
            "denoise_k100.png"
        ]
    );
    assert_eq!(
        fs::read_to_string(plots.join("denoise.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 24);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&data, &a, 1);
    train(&data, &b, 1);
    for f in ["checkpoint.json", "metrics.csv", "splits.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let again = dir
        .path()
        .join("again.jsonl")
        .to_string_lossy()
        .into_owned();
    ok(&["synth", "--n", "24", "--seed", "5", "--out", &again]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl").to_string_lossy().into_owned();
    // Argument errors.
    assert_eq!(
        odm(&["synth", "--n", "0", "--out", &out]).status.code(),
        Some(2)
    );
    assert_eq!(
        odm(&["synth", "--n", "4", "--profile", "runner", "--out", &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(odm(&["no-such-command"]).status.code(), Some(2));
    // Configuration errors.
    let data = synth(dir.path(), 24);
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let bad = odm(&[
        "train",
        "--data",
        &data,
        "--override",
        "nope=1",
        "--out",
        &run,
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = odm(&[
        "train",
        "--data",
        &data,
        "--override",
        "batch=0",
        "--out",
        &run,
    ]);
    assert_eq!(bad.status.code(), Some(2));
    // Missing input file.
    let missing = dir
        .path()
        .join("absent.jsonl")
        .to_string_lossy()
        .into_owned();
    assert_eq!(
        odm(&["train", "--data", &missing, "--out", &run])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn plot_rejects_empty_step_list() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 24);
    let run = dir.path().join("run");
    train(&data, &run, 0);
    let ckpt = run.join("checkpoint.json").to_string_lossy().into_owned();
    let id = first_id(&data);
    let plots = dir.path().join("p").to_string_lossy().into_owned();
    let out = odm(&[
        "plot-denoise",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--id",
        &id,
        "--steps",
        "",
        "--out",
        &plots,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = odm(&[
        "reconstruct",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--id",
        "missing",
        "--out",
        &plots,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_emits_one_cell_per_flag_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40);
    let out_dir = dir.path().join("abl");
    let out = out_dir.to_string_lossy().into_owned();
    let mut args = vec![
        "ablate",
        "--data",
        &data,
        "--epochs",
        "1",
        "--occlusion",
        "PO2",
        "--out",
        &out,
    ];
    let extra = tiny_overrides();
    args.extend(extra.iter().map(String::as_str));
    ok(&args);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let cells = json["cells"].as_array().unwrap();
    let mut labels: Vec<&str> = cells.iter().map(|c| c["flags"].as_str().unwrap()).collect();
    let n = labels.len();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels.len(), n);
    assert_eq!(n, odm_core::evaluation::standard_ablations().len());
}
