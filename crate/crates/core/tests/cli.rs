use std::path::Path;
use std::process::{Command, Output};

fn listcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_listcon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str, queries: &str) -> String {
    let path = dir.join(name);
    let o = listcon(&[
        "synth",
        "--seed",
        seed,
        "--queries",
        queries,
        "--passages",
        "6",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path.to_str().unwrap().to_string()
}

fn train_model(dir: &Path) -> String {
    synth(dir, "train.jsonl", "4", "12");
    let config = serde_json::json!({
        "model": { "dim": 16, "ffn_dim": 32, "layers": 1, "seed": 1 },
        "train": {
            "seed": 2,
            "group_size": 4,
            "stages": [
                { "margin": -0.2, "max_steps": 3, "batch_size": 4 },
                { "margin": 0.1, "max_steps": 2, "batch_size": 4 }
            ]
        },
        "data": "train.jsonl",
        "output": "model.json"
    });
    let cfg_path = dir.join("train.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    let o = listcon(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["steps"], 5);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    dir.join("model.json").to_str().unwrap().to_string()
}

#[test]
fn synth_is_reproducible() {
    let a = listcon(&["synth", "--seed", "9", "--queries", "5"]);
    let b = listcon(&["synth", "--seed", "9", "--queries", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 5);
    let c = listcon(&["synth", "--seed", "10", "--queries", "5"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn train_rerank_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_model(dir.path());

    let request = dir.path().join("req.json");
    std::fs::write(
        &request,
        r#"{"query":"warm wool","passages":["wool socks","a kettle",{"id":"z","text":"soft wool"}],"top_k":3}"#,
    )
    .unwrap();
    let o = listcon(&["rerank", "--model", &model, "--input", request.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let response: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let results = response["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let ranks: Vec<u64> = results.iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, vec![1, 2, 3]);
    assert!(results.iter().any(|r| r["id"] == "z"));
    assert!(response["model_id"].as_str().unwrap().starts_with("listcon-"));

    let data = synth(dir.path(), "eval.jsonl", "5", "6");
    let o = listcon(&["eval", "--model", &model, "--data", &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mAP"));

    let o = listcon(&["eval", "--model", &model, "--data", &data, "--mode", "direct", "--json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn exit_codes() {
    let o = listcon(&["synth", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = listcon(&["eval", "--model", "/nonexistent/model.json", "--data", "/nonexistent/d.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = listcon(&["synth", "--topics", "1"]);
    assert_eq!(o.status.code(), Some(1));
}
