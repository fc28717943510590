//! Exit-code and output contract of the `rd` binary.

use std::process::Command;

fn rd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rd"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = rd().args(["gen-data", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_schema_violation_exits_3_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"data":{"dir":"x","n_images":10,"n_classes":2},
            "stages":[{"name":"s1","domain":1,"epochs":"three","batch_size":4}],
            "seeds":[1]}"#,
    )
    .unwrap();
    let out = rd()
        .args(["pretrain", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/stages/0/epochs"), "stderr: {stderr}");
}

#[test]
fn missing_prerequisite_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"data":{{"dir":"{}","n_images":10,"n_classes":2}},
                "stages":[{{"name":"s1","domain":1,"epochs":5,"batch_size":4,
                            "buffer_out":"buf.rdlb"}}],
                "seeds":[1]}}"#,
            dir.path().join("data").display()
        ),
    )
    .unwrap();
    let out = rd()
        .args([
            "sample-buffer",
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_emits_json_summary_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"model":{{"image_h":8,"image_w":8,"channels":1,"patch":4,
                           "embed_dim":8,"depth":1,"decoder_depth":1,"hidden_mult":2}},
                "data":{{"dir":"{}","n_images":6,"n_classes":2}},
                "stages":[{{"name":"s1","domain":1,"epochs":5,"batch_size":4}}],
                "seeds":[1]}}"#,
            dir.path().join("data").display()
        ),
    )
    .unwrap();
    let out = rd()
        .args(["gen-data", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["images"], 12);
}
