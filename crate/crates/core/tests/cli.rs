use std::path::Path;
use std::process::{Command, Output};

use istft::data::{read_csv, unreshape, WindowSpec};
use istft::model::load_model;

fn istft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_istft"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = istft(dir, args);
    assert!(out.status.success(), "istft {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

const TRAIN: &[&str] = &[
    "train", "--data", "data.csv", "--seed", "3", "--n-k", "2", "--n-tau", "5", "--n-omega", "4", "--d-model", "8",
    "--heads", "2", "--epochs", "4", "--batch", "8",
];

fn trained(dir: &Path, extra: &[&str]) {
    ok(dir, &["generate", "lorenz63", "--n-p", "10", "--n-T", "30", "--seed", "2", "--out", "data.csv"]);
    let mut args = TRAIN.to_vec();
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn generate_writes_one_row_per_step_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "lorenz63", "--n-p", "4", "--n-T", "64", "--seed", "7", "--out", "a.csv"]);
    ok(d, &["generate", "lorenz63", "--n-p", "4", "--n-T", "64", "--seed", "7", "--out", "b.csv"]);
    let a = lines(&d.join("a.csv"));
    assert_eq!(a.len(), 4 * 64 * 3 + 1);
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    ok(d, &["generate", "lorenz63", "--n-p", "4", "--n-T", "64", "--seed", "8", "--out", "c.csv"]);
    assert_ne!(a, lines(&d.join("c.csv")));
}

#[test]
fn raw_generation_reshapes_to_the_same_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--n-p", "3", "--n-T", "20", "--seed", "4"];
    let mut args = vec!["generate", "fhn", "--raw", "--out", "raw.csv"];
    args.extend_from_slice(&common);
    ok(d, &args);
    let mut args = vec!["generate", "fhn", "--out", "direct.csv"];
    args.extend_from_slice(&common);
    ok(d, &args);
    ok(d, &["reshape", "--input", "raw.csv", "--out", "reshaped.csv"]);
    assert_eq!(lines(&d.join("raw.csv")).len(), 3 * 20 + 1);
    assert_eq!(std::fs::read(d.join("direct.csv")).unwrap(), std::fs::read(d.join("reshaped.csv")).unwrap());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = istft(d, &["generate", "fhn", "--set", "system.eps_max=0.5", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("x.csv").exists());
    let out = istft(d, &["generate", "lorenz63", "--set", "system.no_such_key=1", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("bad.toml"), "[system]\nn_p = many\n").unwrap();
    let out = istft(d, &["generate", "lorenz63", "--config", "bad.toml", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = istft(d, &["train", "--data", "missing.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(d.join("junk.csv"), "a,b\n1,2\n").unwrap();
    let out = istft(d, &["train", "--data", "junk.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(d.join("m.json"), "{not json").unwrap();
    ok(d, &["generate", "lorenz63", "--n-p", "2", "--n-T", "10", "--out", "data.csv"]);
    let out = istft(d, &["predict", "--model", "m.json", "--data", "data.csv", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_writes_model_and_log_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    trained(a.path(), &["--out", "model.json"]);
    trained(b.path(), &["--out", "model.json"]);
    let log = lines(&a.path().join("model.json.log.csv"));
    assert_eq!(log[0], "epoch,train_loss,val_loss,seconds");
    assert_eq!(log.len(), 5);
    let losses = |l: &[String]| -> Vec<String> {
        l.iter().skip(1).map(|r| r.split(',').take(3).collect::<Vec<_>>().join(",")).collect()
    };
    assert_eq!(losses(&log), losses(&lines(&b.path().join("model.json.log.csv"))));
    assert_eq!(std::fs::read(a.path().join("model.json")).unwrap(), std::fs::read(b.path().join("model.json")).unwrap());
}

#[test]
fn loss_choice_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &["--out", "mae.json", "--loss", "mae"]);
    let mut args = TRAIN.to_vec();
    args.extend_from_slice(&["--out", "mse.json", "--loss", "mse"]);
    ok(d, &args);
    let first = |p: &str| lines(&d.join(p))[1].split(',').nth(1).unwrap().to_string();
    assert_ne!(first("mae.json.log.csv"), first("mse.json.log.csv"));
}

#[test]
fn predict_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &["--out", "model.json"]);
    ok(d, &["predict", "--model", "model.json", "--data", "data.csv", "--out", "pred.csv"]);

    let (model, file) = load_model(d.join("model.json")).unwrap();
    let raw = unreshape(&read_csv(d.join("data.csv")).unwrap()).unwrap();
    let test_ids = file.split.as_ref().unwrap().test.clone();
    let spec = WindowSpec { n_k: 2, n_tau: 5, n_omega: 4 };
    let windows = spec.windows(&file.norm.normalize(&raw.select(&test_ids).unwrap()).unwrap()).unwrap();
    assert!(!windows.is_empty());

    let rows = lines(&d.join("pred.csv"));
    assert_eq!(rows[0], "window,group_id,time,output_id,y_pred,y_true");
    assert_eq!(rows.len() - 1, windows.len() * 5 * 3);
    let mut r = 1;
    for w in &windows {
        let b = model.predict(w).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                let fields: Vec<&str> = rows[r].split(',').collect();
                let got: f64 = fields[4].parse().unwrap();
                assert_eq!(fields[1].parse::<u64>().unwrap(), w.group_id);
                assert_eq!(got, file.norm.denormalize_y(k, b.at(i, k)));
                r += 1;
            }
        }
    }
}

#[test]
fn evaluate_and_exports_run_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &["--out", "model.json"]);
    let m = ["--model", "model.json", "--data", "data.csv"];
    let run = |cmd: &str, out: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&m);
        args.extend_from_slice(&["--out", out]);
        args.extend_from_slice(extra);
        ok(d, &args)
    };
    let stdout = run("evaluate", "err.csv", &[]);
    assert!(stdout.contains("output 3: mean epsilon"));
    assert_eq!(lines(&d.join("err.csv"))[0], "group_id,output_id,mode,epsilon");
    run("evaluate", "base.csv", &["--persistence"]);
    assert_eq!(lines(&d.join("err.csv")).len(), lines(&d.join("base.csv")).len());

    run("export-attention", "att.csv", &[]);
    let att = lines(&d.join("att.csv"));
    assert_eq!(att.len(), 7 * 3 + 1);
    assert!(att[0].starts_with("position,t1_o1,t1_o2,t1_o3,t2_o1"));

    run("export-importance", "imp.csv", &[]);
    let imp = lines(&d.join("imp.csv"));
    assert_eq!(imp[0], "group,variable,weight");
    assert!(imp.iter().any(|l| l.starts_with("past_o3,")));
}

#[test]
fn gradcheck_passes_on_the_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = istft(dir.path(), &["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradcheck_failure_exits_with_code_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = istft(dir.path(), &["gradcheck", "--op-tol", "0", "--model-tol", "0"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "lorenz63", "--n-p", "10", "--n-T", "30", "--seed", "2", "--out", "data.csv"]);
    let mut models = Vec::new();
    for threads in ["1", "3"] {
        let out_name = format!("m{threads}.json");
        let mut args = TRAIN.to_vec();
        args.extend_from_slice(&["--out", &out_name]);
        let out = Command::new(env!("CARGO_BIN_EXE_istft"))
            .args(&args)
            .current_dir(d)
            .env("ISTFT_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        models.push(std::fs::read(d.join(&out_name)).unwrap());
    }
    assert_eq!(models[0], models[1]);
    let out = Command::new(env!("CARGO_BIN_EXE_istft")).arg("gradcheck").env("ISTFT_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
