use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const TINY: &[&str] = &[
    "--set", "data.n_train=12",
    "--set", "data.n_val_id=4",
    "--set", "data.n_val_ood=4",
    "--set", "data.n_test=4",
    "--set", "data.max_atoms=8",
];

const SMALL_MODEL: &[&str] = &["--set", "model.depth=2", "--set", "model.width=8", "--set", "train.epochs=1", "--set", "train.batch_size=4"];

fn molkd(root: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_molkd"))
        .args(args)
        .env("MOLKD_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).trim().to_string(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(root: &Path, args: &[&str]) -> PathBuf {
    let (code, out, err) = molkd(root, args);
    assert_eq!(code, 0, "molkd {args:?} failed: {err}");
    PathBuf::from(out)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let mut args = vec!["gen-data"];
    args.extend(TINY);
    let data_dir = ok(root, &args);
    let data = data_dir.join("dataset.jsonl");
    assert!(data.exists());
    let m = manifest(&data_dir);
    assert!(m["outputs"]["dataset_hash"].is_string());

    // Same config and inputs give the same run directory and bytes.
    let again = ok(root, &args);
    assert_eq!(again, data_dir);
    assert_eq!(manifest(&again), m);

    let data_s = data.to_str().unwrap();
    let mut train = vec!["train", "--data", data_s];
    train.extend(SMALL_MODEL);
    train.extend(["--set", "model.family=\"G\""]);
    let teacher_dir = ok(root, &train);
    for f in ["metrics.csv", "validation.csv", "model.json", "train_state.json", "config.json"] {
        assert!(teacher_dir.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(teacher_dir.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,L0_E,L0_F,L_KD,lr,wall_ms_student,wall_ms_teacher"), "{header}");
    let teacher = teacher_dir.join("model.json");
    let teacher_s = teacher.to_str().unwrap();

    let mut base = vec!["train", "--data", data_s];
    base.extend(SMALL_MODEL);
    let base_dir = ok(root, &base);
    let baseline = base_dir.join("model.json");

    let mut distill = vec!["distill", "--data", data_s, "--teacher", teacher_s, "--set", "kd.strategy=n2n", "--set", "kd.lambda=1"];
    distill.extend(SMALL_MODEL);
    let student_dir = ok(root, &distill);
    let student = student_dir.join("model.json");
    let student_s = student.to_str().unwrap();

    let eval_dir = ok(
        root,
        &["eval", "--data", data_s, "--checkpoint", student_s, "--baseline", baseline.to_str().unwrap(), "--teacher", teacher_s],
    );
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.as_array().unwrap().len(), 4);
    assert!(eval_dir.join("gap_closure.json").exists());

    let cka_dir = ok(
        root,
        &["cka", "--data", data_s, "--teacher", teacher_s, "--student", student_s, "--baseline", baseline.to_str().unwrap(), "--set", "analysis.probe_size=4"],
    );
    assert!(cka_dir.join("cka.json").exists());
    assert!(cka_dir.join("cka_gain.json").exists());

    let aug_dir = ok(root, &["augment", "--data", data_s, "--teacher", teacher_s, "--set", "augment.max_systems=3", "--set", "augment.copies=2"]);
    let synth = aug_dir.join("synthetic.jsonl");
    let lines = std::fs::read_to_string(&synth).unwrap().lines().count();
    assert_eq!(lines, 1 + 6);

    let mut mixed = vec!["train", "--data", data_s, "--synthetic", synth.to_str().unwrap(), "--set", "train.alpha_target=0.5"];
    mixed.extend(SMALL_MODEL);
    ok(root, &mixed);

    let prof = ok(root, &["profile", "--data", data_s, "--checkpoint", teacher_s, student_s, "--set", "analysis.repetitions=3"]);
    let t: Value = serde_json::from_str(&std::fs::read_to_string(prof.join("throughput.json")).unwrap()).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (code, _, err) = molkd(root, &["gen-data", "--set", "data.n_trian=3"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("data"), "{err}");

    let mut args = vec!["gen-data"];
    args.extend(TINY);
    let data = ok(root, &args).join("dataset.jsonl");
    let data_s = data.to_str().unwrap();

    let (code, _, err) = molkd(root, &["distill", "--data", data_s, "--set", "kd.strategy=n2n"]);
    assert_eq!(code, 2, "{err}");

    let (code, _, err) = molkd(root, &["eval", "--data", data_s, "--checkpoint", "/nonexistent/model.json"]);
    assert_eq!(code, 3, "{err}");

    // Strategy none trains without a teacher.
    let mut none = vec!["distill", "--data", data_s];
    none.extend(SMALL_MODEL);
    ok(root, &none);
}
