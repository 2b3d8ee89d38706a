use std::path::Path;
use std::process::{Command, Output};

fn shrink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shrink")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MODEL: &str = r#"{"depth":3,"hidden":16,"mlp_hidden":32,"query_heads":4,"attention_groups":2,"head_dim":4,"vocab":258,"context":64,"norm_eps":1e-5,"tie_embeddings":false}"#;

fn train_config(lr: f64, steps: u64) -> String {
    format!(
        r#"{{"peak_lr":{lr},"min_lr":{},"warmup_steps":2,"schedule":"cosine","batch_size":4,"seq_len":16,"total_tokens":{},"seed":0,"loss_mode":"ce","eval_interval":5}}"#,
        lr / 10.0,
        64 * steps
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let tc = write(dir.path(), "tc.json", &train_config(3e-3, 10));
    let small = write(dir.path(), "small.json", &MODEL.replace("\"mlp_hidden\":32", "\"mlp_hidden\":16").replace("\"hidden\":16", "\"hidden\":12"));

    let o = shrink(&["pretrain", "--model-config", &model, "--data", "a", "--corpus-tokens", "20000", "--val-batches", "2", "--train-config", &tc, "--seed", "1", "--workspace", ws_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let teacher = ws.join("teacher.mshr");
    assert!(teacher.exists() && ws.join("teacher.metrics.jsonl").exists());
    let t = teacher.to_str().unwrap();

    let o = shrink(&["correct-teacher", "--teacher", t, "--data", "b", "--corpus-tokens", "20000", "--train-config", &tc, "--seed", "1", "--workspace", ws_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let imp = ws.join("imp.json");
    let o = shrink(&["importance", "--model", t, "--data", "b", "--corpus-tokens", "20000", "--samples", "8", "--seq-len", "16", "--seed", "2", "--out", imp.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = shrink(&["prune", "--model", t, "--target-config", &small, "--importance", imp.to_str().unwrap(), "--workspace", ws_s, "--name", "student"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.join("student.trim_report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "importance");
    assert_eq!(report["axes"]["channels"]["all"].as_array().unwrap().len(), 12);

    let o = shrink(&["prune", "--model", t, "--drop-layers", "1", "--workspace", ws_s, "--name", "shallow"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let student = ws.join("student.mshr");
    let o = shrink(&["distill", "--student", student.to_str().unwrap(), "--teacher", t, "--data", "b", "--corpus-tokens", "20000", "--train-config", &tc, "--seed", "3", "--workspace", ws_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(ws.join("distilled.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 11);

    let o = shrink(&["eval", "--model", ws.join("distilled.mshr").to_str().unwrap(), "--data", "b", "--batches", "2", "--batch-size", "2", "--seq-len", "16", "--cloze-items", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["val_loss"].as_f64().unwrap() > 0.0);
    assert!((0.0..=1.0).contains(&v["cloze_accuracy"].as_f64().unwrap()));

    let scan = ws.join("scan");
    let o = shrink(&["depth-scan", "--model", t, "--metric", "bi", "--block-size", "2", "--data", "b", "--corpus-tokens", "20000", "--samples", "4", "--seq-len", "16", "--seed", "0", "--out", scan.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(ws.join("scan.csv")).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();
    let model = write(dir.path(), "model.json", MODEL);
    let tc = write(dir.path(), "tc.json", &train_config(3e-3, 2));

    let o = shrink(&["pretrain", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error kind=usage code=2:"));
    assert_eq!(code(&shrink(&["--help"])), 0);

    let o = shrink(&["eval", "--model", "/no/such/file.mshr", "--cloze-items", "4"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).starts_with("error kind=missing_file code=3:"));
    assert_eq!(stderr(&o).lines().count(), 1);

    let bad = write(dir.path(), "bad.json", r#"{"depth":0}"#);
    let o = shrink(&["pretrain", "--model-config", &bad, "--data", "a", "--train-config", &tc, "--seed", "0", "--workspace", ws_s]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let unknown = write(dir.path(), "unknown.json", &train_config(1e-3, 2).replace("\"seed\":0", "\"seed\":0,\"nesterov\":true"));
    let o = shrink(&["pretrain", "--model-config", &model, "--data", "a", "--train-config", &unknown, "--seed", "0", "--workspace", ws_s]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = shrink(&["pretrain", "--model-config", &model, "--data", "a", "--corpus-tokens", "20000", "--val-batches", "1", "--train-config", &tc, "--seed", "0", "--workspace", ws_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = ws.join("teacher.mshr");
    let t = t.to_str().unwrap();

    let o = shrink(&["prune", "--model", t, "--drop-layers", "0,1,2", "--workspace", ws_s]);
    assert_eq!(code(&o), 8, "{}", stderr(&o));
    let grow = write(dir.path(), "grow.json", &MODEL.replace("\"mlp_hidden\":32", "\"mlp_hidden\":64"));
    let o = shrink(&["prune", "--model", t, "--target-config", &grow, "--random", "--seed", "1", "--workspace", ws_s]);
    assert_eq!(code(&o), 8, "{}", stderr(&o));
    let o = shrink(&["prune", "--model", t, "--target-config", &model, "--workspace", ws_s]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let junk = write(dir.path(), "junk.mshr", "MSHRjunk");
    let o = shrink(&["eval", "--model", &junk, "--cloze-items", "4"]);
    assert_eq!(code(&o), 7, "{}", stderr(&o));

    let long = write(dir.path(), "long.json", &train_config(1e-3, 16).replace("\"seq_len\":16", "\"seq_len\":128"));
    let o = shrink(&["train-ce", "--init", t, "--data", "b", "--corpus-tokens", "20000", "--train-config", &long, "--seed", "0", "--workspace", ws_s]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let hot = write(dir.path(), "hot.json", &train_config(1e30, 6));
    let o = shrink(&["train-ce", "--init", t, "--data", "b", "--corpus-tokens", "20000", "--train-config", &hot, "--seed", "0", "--workspace", ws_s]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}
