use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn memaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = memaudit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// corpus -> records -> decontam -> plan -> insert
fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["build-corpus", "--synthetic-tokens", "120000", "--seed", "7", "--out", "corpus.bin"]);
    ok(d, &["make-records", "--synthetic", "40", "--length", "40", "--source-seed", "7", "--seed", "9", "--out", "records.jsonl"]);
    ok(d, &["decontam", "--corpus", "corpus.bin", "--records", "records.jsonl", "--out", "clean.bin", "--out-records", "kept.jsonl", "--report", "decontam.json"]);
    ok(d, &["plan", "--records", "kept.jsonl", "--corpus", "clean.bin", "--sequence-length", "96", "--levels", "0,1,4,16", "--ratios", "4,2,2,1", "--seed", "3", "--out-assignment", "asg.json", "--out-schedule", "sched.json"]);
    ok(d, &["insert", "--corpus", "clean.bin", "--records", "kept.jsonl", "--schedule", "sched.json", "--sequence-length", "96", "--seed", "5", "--out", "delta.bin", "--splices", "splices.jsonl"]);
    tmp
}

const VERIFY: [&str; 11] = [
    "verify", "--corpus", "clean.bin", "--delta", "delta.bin", "--records", "kept.jsonl", "--assignment", "asg.json", "--report", "verify.json",
];

#[test]
fn chain_verifies_and_reproduces() {
    let tmp = prepared();
    let d = tmp.path();
    ok(d, &VERIFY);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["mismatches"], 0);

    ok(d, &["train-lm", "--corpus", "clean.bin", "--delta", "delta.bin", "--out", "pert.lm"]);
    ok(d, &["eval", "--model", "pert.lm", "--kind", "loglik", "--input", "kept.jsonl", "--assignment", "asg.json", "--out", "loglik.csv"]);
    ok(d, &["mia", "--model", "pert.lm", "--records", "kept.jsonl", "--assignment", "asg.json", "--attacks", "loss,zlib", "--out", "auc.csv"]);
    ok(d, &["plot", "--curve", "loglik.csv", "--out", "loglik.svg"]);
    let csv = fs::read_to_string(d.join("loglik.csv")).unwrap();
    assert!(csv.starts_with("level,metric,mean,ci_lo,ci_hi,n\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(fs::read_to_string(d.join("loglik.svg")).unwrap().starts_with("<svg"));

    let out = memaudit(d, &["repro", "--manifest", "auc.csv.manifest.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MATCH"));
}

#[test]
fn tampered_delta_exits_3() {
    let tmp = prepared();
    let d = tmp.path();
    let mut bytes = fs::read(d.join("delta.bin")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    fs::write(d.join("delta.bin"), &bytes).unwrap();
    assert_eq!(memaudit(d, &VERIFY).status.code(), Some(3));

    // without a manifest alongside, the delta's own checksum catches it
    fs::create_dir(d.join("loose")).unwrap();
    fs::write(d.join("loose/delta.bin"), &bytes).unwrap();
    let mut args = VERIFY;
    args[4] = "loose/delta.bin";
    assert_eq!(memaudit(d, &args).status.code(), Some(3));
}

#[test]
fn inverted_window_exits_2() {
    let tmp = prepared();
    let out = memaudit(
        tmp.path(),
        &["plan", "--records", "kept.jsonl", "--corpus", "clean.bin", "--sequence-length", "96", "--window", "80", "20", "--out-assignment", "a.json", "--out-schedule", "s.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("s.json").exists());
}

#[test]
fn biographies_and_chats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["biogen", "--n", "20", "--seed", "1", "--out", "bios.jsonl", "--prompts", "prompts.jsonl", "--target", "email", "--k", "3"]);
    let prompts = fs::read_to_string(d.join("prompts.jsonl")).unwrap();
    assert_eq!(prompts.lines().count(), 20);
    for line in prompts.lines() {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(p["candidates"].as_array().unwrap().len(), 4);
    }
    ok(d, &["make-records", "--biographies", "bios.jsonl", "--domain", "privacy", "--out", "bio_records.jsonl"]);

    let dialogue = r#"{"persona":["i like tea.","i have a cat."],"dialogue":[["alice","hi there"],["bob","hello! i like tea."],["alice","nice"]]}"#;
    fs::write(d.join("dialogues.jsonl"), format!("{dialogue}\n{dialogue}\n")).unwrap();
    ok(d, &["chatgen", "--input", "dialogues.jsonl", "--out", "chats.jsonl", "--attacks", "chat_attacks.jsonl", "--k", "1", "--direction", "username_given_persona"]);
    let chats = fs::read_to_string(d.join("chats.jsonl")).unwrap();
    assert!(!chats.contains("alice") && !chats.contains("bob"));
    assert!(chats.contains("\"chatbot\""));
}

#[test]
fn bad_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(memaudit(tmp.path(), &["plan"]).status.code(), Some(2));
    assert_eq!(
        memaudit(tmp.path(), &["build-corpus", "--input", "missing.jsonl", "--out", "x.bin"]).status.code(),
        Some(2)
    );
}
