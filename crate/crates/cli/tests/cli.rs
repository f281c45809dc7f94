use std::path::Path;
use std::process::{Command, Output};

fn scvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scvm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn short_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let json = r#"{"train": {"total_steps": 4, "warmup_steps": 1, "batch_size": 2,
        "pretrain_steps": 3, "eval_every": 0, "eval_samples": 8, "checkpoint_every": 0}}"#;
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&scvm(&[])), 1);
    assert_eq!(code(&scvm(&["train"])), 1);
    assert_eq!(code(&scvm(&["eval", "--ckpt", "x", "--n", "many"])), 1);
    assert_eq!(code(&scvm(&["--help"])), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = scvm(&["train", "--config", path.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let out = scvm(&["eval", "--ckpt", "/nonexistent/model.scvm"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_passes_and_reports_corruption() {
    let ok = scvm(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    assert!(text(&ok).contains("end_to_end_total_loss"));
    let bad = scvm(&["gradcheck", "--corrupt", "sigmoid"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sigmoid"));
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("run");
    let run = scvm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3 + 4);

    let ckpt = out.join("final.scvm");
    let ckpt = ckpt.to_str().unwrap();
    let e1 = scvm(&["eval", "--ckpt", ckpt, "--n", "20", "--seed", "3"]);
    let e2 = scvm(&["eval", "--ckpt", ckpt, "--n", "20", "--seed", "3"]);
    assert_eq!(code(&e1), 0);
    assert_eq!(text(&e1), text(&e2));
    assert!(text(&e1).contains("color_of_shape"));

    let csv = dir.path().join("gates.csv");
    let ins = scvm(&["inspect", "--ckpt", ckpt, "--seed", "1", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&ins), 0);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("layer,mean_f,mean_i,mean_alpha,mem_l2,delta_linf"));
    assert_eq!(rows.lines().count(), 7);

    // Gate ablation: identity gate reports zero modulation.
    let csv2 = dir.path().join("gates_off.csv");
    let off = scvm(&[
        "--disable-tag",
        "inspect",
        "--ckpt",
        ckpt,
        "--out",
        csv2.to_str().unwrap(),
    ]);
    assert_eq!(code(&off), 0);
    let rows = std::fs::read_to_string(&csv2).unwrap();
    for line in rows.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[3], cols[5]), ("0", "0"), "{rows}");
    }
}

#[test]
fn dataset_dump_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for p in [&a, &b] {
        assert_eq!(
            code(&scvm(&[
                "dataset",
                "--seed",
                "5",
                "--n",
                "50",
                "--out",
                p.to_str().unwrap()
            ])),
            0
        );
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}
