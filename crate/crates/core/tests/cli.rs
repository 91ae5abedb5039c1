use std::net::TcpListener;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_keysweep");

fn keysweep(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args).env("RUST_LOG", "warn");
    c
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stdout; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(line).unwrap()
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn spawn(args: &[&str]) -> Child {
    keysweep(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap()
}

fn wait_listening(addr: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(addr).is_err() {
        assert!(Instant::now() < deadline, "arbiter never listened on {addr}");
        thread::sleep(Duration::from_millis(20));
    }
}

fn make_pairs(cipher: &str, key: &str) -> Vec<String> {
    let out = keysweep(&["make-pair", "--cipher", cipher, "--key", key, "--seed", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    last_json(&out)["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_str().unwrap().to_string())
        .collect()
}

fn with_pairs<'a>(mut args: Vec<&'a str>, pairs: &'a [String]) -> Vec<&'a str> {
    for p in pairs {
        args.extend(["--pair", p.as_str()]);
    }
    args
}

#[test]
fn serve_and_agent_find_the_key() {
    let pairs = make_pairs("speck32_64-r16", "beef");
    let addr = free_port();
    let serve = spawn(&with_pairs(
        vec!["serve", "--listen", &addr, "--cipher", "speck32_64-r16", "--chunk-keys", "5000", "--status-interval", "0"],
        &pairs,
    ));
    wait_listening(&addr);
    let agents: Vec<Child> = (0..2)
        // capped so both agents are connected long before the key turns up
        .map(|i| {
            spawn(&[
                "agent", "--connect", &addr, "--id", &format!("a{i}"), "--threads", "2", "--rate-limit", "20000",
                "--give-up-after", "5",
            ])
        })
        .collect();
    let out = serve.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = last_json(&out);
    assert_eq!(v["outcome"], "found");
    assert_eq!(v["key"], "beef");
    for a in agents {
        let out = a.wait_with_output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(last_json(&out)["exit"], "found");
    }
}

#[test]
fn serve_exits_one_when_key_is_absent() {
    let addr = free_port();
    // 0100 -> 0000 needs key 0x100, outside 8 bits
    let serve = spawn(&[
        "serve", "--listen", &addr, "--cipher", "xor16", "--key-bits", "8", "--pair", "0100:0000",
        "--strategy", "static", "--devices", "2", "--status-interval", "0",
    ]);
    wait_listening(&addr);
    let a = spawn(&["agent", "--connect", &addr, "--id", "x", "--threads", "1"]);
    let b = spawn(&["agent", "--connect", &addr, "--id", "y", "--threads", "1"]);
    let out = serve.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v = last_json(&out);
    assert_eq!(v["outcome"], "not_found");
    assert_eq!(v["keys_searched"], "256");
    for c in [a, b] {
        assert_eq!(c.wait_with_output().unwrap().status.code(), Some(1));
    }
}

#[test]
fn sigterm_then_resume_from_journal() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("run.journal");
    let journal = journal.to_str().unwrap();
    let pairs = make_pairs("speck32_64-r18", "3a0c1");
    let addr = free_port();
    let first = spawn(&with_pairs(
        vec![
            "serve", "--listen", &addr, "--cipher", "speck32_64-r18", "--chunk-keys", "4096",
            "--journal", journal, "--progress-interval", "0.2", "--status-interval", "0",
        ],
        &pairs,
    ));
    wait_listening(&addr);
    let agent = spawn(&["agent", "--connect", &addr, "--id", "slow", "--threads", "1", "--rate-limit", "40000", "--give-up-after", "1"]);
    thread::sleep(Duration::from_millis(1500));
    let status = Command::new("kill").args(["-TERM", &first.id().to_string()]).status().unwrap();
    assert!(status.success());
    let out = first.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let v = last_json(&out);
    assert_eq!(v["outcome"], "interrupted");
    let before: u64 = v["keys_searched"].as_str().unwrap().parse().unwrap();
    assert!(before > 0);
    let _ = agent.wait_with_output();

    // no job flags: everything comes from the journal
    let second = spawn(&["serve", "--listen", &addr, "--journal", journal, "--status-interval", "0"]);
    wait_listening(&addr);
    let agent = spawn(&["agent", "--connect", &addr, "--id", "fresh", "--threads", "1"]);
    let out = second.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = last_json(&out);
    assert_eq!(v["key"], "3a0c1");
    let a = last_json(&agent.wait_with_output().unwrap());
    // the fresh agent starts where the first run stopped
    let fresh: u64 = a["keys_tried"].as_u64().unwrap();
    assert!(fresh <= 0x3a0c1 + 1 - before + 4096, "re-searched too much: {fresh}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("est.json");
    std::fs::write(&cfg, r#"{"key-bits": "56", "devices": "1e6", "rate": "1000"}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = keysweep(&["estimate", "--config", cfg]).output().unwrap();
    assert_eq!(last_json(&out)["worst_case_days"], "834.0");
    let out = keysweep(&["estimate", "--config", cfg, "--devices", "1e8"]).output().unwrap();
    assert_eq!(last_json(&out)["worst_case_days"], "8.340");

    std::fs::write(dir.path().join("typo.json"), r#"{"devcies": "1"}"#).unwrap();
    let out = keysweep(&["estimate", "--config", dir.path().join("typo.json").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_csv_and_usage_errors() {
    let out = keysweep(&["estimate", "--key-bits", "56", "--devices", "1e6", "--rate", "1000", "--format", "csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("key_bits,"));
    assert!(lines[1].contains(",72057594038,"), "{}", lines[1]);

    for bad in [&["estimate", "56"][..], &["crack", "--cipher", "speck32_64"], &["serve", "--cipher", "xor16", "--pair", "zz:00"], &["frobnicate"]] {
        assert_eq!(keysweep(bad).output().unwrap().status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn crack_and_simulate_agree() {
    let pairs = make_pairs("speck32_64-r14", "1abc");
    let out = keysweep(&with_pairs(vec!["crack", "--cipher", "speck32_64-r14"], &pairs)).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(last_json(&out)["key"], "1abc");

    let out = keysweep(&[
        "simulate", "--cipher", "speck32_64", "--key-bits", "12", "--agents", "3", "--strategy", "static",
        "--planted", "absent", "--transport", "memory",
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v = last_json(&out);
    assert_eq!(v["per_agent"], serde_json::json!([1366, 1365, 1365]));
}
