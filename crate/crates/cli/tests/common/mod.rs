#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden() -> PathBuf {
    fixtures().join("golden")
}

pub fn folklore() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_folklore"));
    c.env_remove("FOLKLORE_CONFIG");
    c
}

/// The golden configuration with scripted LLM and verifier, writing to `workdir`.
pub fn golden_cmd(workdir: &Path, args: &[&str]) -> Command {
    let g = golden();
    let mut c = folklore();
    c.arg("--config")
        .arg(g.join("config.json"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--mock-llm")
        .arg(g.join("llm_script.json"))
        .arg("--mock-lean")
        .arg(g.join("verifier_script.json"))
        .args(args);
    c
}

pub fn run(mut c: Command) -> Output {
    c.output().expect("spawn folklore")
}

fn blank_timestamps(v: &mut Value) {
    match v {
        Value::String(s) if chrono::DateTime::parse_from_rfc3339(s).is_ok() => *s = "<ts>".into(),
        Value::Array(a) => a.iter_mut().for_each(blank_timestamps),
        Value::Object(o) => o.values_mut().for_each(blank_timestamps),
        _ => {}
    }
}

/// Every file under `root` except logs and the lock file, JSON documents
/// with timestamps blanked and re-serialized in their original layout.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == "logs" || rel == ".store.lock" {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let bytes = std::fs::read(&path).unwrap();
            let normalized = if rel.ends_with(".json") {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                blank_timestamps(&mut v);
                let mut s = serde_json::to_string_pretty(&v).unwrap();
                if bytes.ends_with(b"\n") {
                    s.push('\n');
                }
                s.into_bytes()
            } else {
                bytes
            };
            out.insert(rel, normalized);
        }
    }
    out
}

/// First differing path between two snapshots, for failure messages.
pub fn first_difference(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Option<String> {
    for (k, v) in a {
        match b.get(k) {
            None => return Some(format!("{k} missing from second tree")),
            Some(w) if w != v => return Some(format!("{k} differs")),
            _ => {}
        }
    }
    b.keys().find(|k| !a.contains_key(*k)).map(|k| format!("{k} missing from first tree"))
}
