//! End-to-end tests for the `fedblind` binary: determinism, exit codes,
//! and a live enrollment round against spawned services.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

const SEED: &str = "8f3a1c5b9e2d74f6a0b8c1d3e5f70924a6b8cad0e2f40618293a4b5c6d7e8f90";
const SEED2: &str = "00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedblind"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn fedblind");
    assert!(
        out.status.success(),
        "fedblind {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn keygen_is_deterministic() {
    let a = run_ok(&["keygen", "--key-bits", "64", "--seed", SEED]);
    let b = run_ok(&["keygen", "--key-bits", "64", "--seed", SEED]);
    assert_eq!(a, b);
    assert!(a.starts_with("p="));
    let c = run_ok(&["keygen", "--key-bits", "64", "--seed", SEED2]);
    assert_ne!(a, c);
}

#[test]
fn sim_reports_duplicate_detection() {
    let out = run_ok(&["sim", "--scenario", "duplicate-no-token", "--seed", SEED]);
    assert!(out.contains("duplicates_detected=1"), "report was: {out}");
    assert!(out.contains("false_alarms=0"));
    assert!(out.contains("leakage_violations=0"));
}

#[test]
fn sim_matches_library_run() {
    use fedblind_core::harness::{run_scenario, Scenario, SimConfig};
    use fedblind_core::numcore::Seed;
    let out = run_ok(&["sim", "--scenario", "honest", "--seed", SEED]);
    let config = SimConfig::new(Scenario::Honest, Seed::from_hex(SEED).unwrap());
    let lib = run_scenario(&config).unwrap();
    assert_eq!(out, lib.report.to_text());
}

#[test]
fn audit_mutant_shows_violations() {
    let clean = run_ok(&["audit", "--scenario", "honest", "--seed", SEED]);
    assert!(clean.contains("leakage_violations=0"));
    let leaky = run_ok(&["audit", "--scenario", "honest", "--seed", SEED, "--mutant"]);
    assert!(!leaky.contains("leakage_violations=0"), "mutant output: {leaky}");
}

#[test]
fn bad_invocations_exit_2() {
    let unknown_verb = bin().arg("frobnicate").output().unwrap();
    assert_eq!(unknown_verb.status.code(), Some(2));
    let unknown_scenario = bin()
        .args(["sim", "--scenario", "no-such", "--seed", SEED])
        .output()
        .unwrap();
    assert_eq!(unknown_scenario.status.code(), Some(2));
    let bad_seed = bin()
        .args(["keygen", "--key-bits", "64", "--seed", "zz"])
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(2));
    let unknown_flag = bin()
        .args(["keygen", "--key-bits", "64", "--seed", SEED, "--bogus"])
        .output()
        .unwrap();
    assert_eq!(unknown_flag.status.code(), Some(2));
}

struct Service(Child);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Spawns a service verb and waits for its `listening=` line.
fn spawn_service(args: &[&str]) -> (Service, String) {
    let mut child = bin()
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn service");
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).expect("read listening line");
    let addr = line
        .trim()
        .strip_prefix("listening=")
        .unwrap_or_else(|| panic!("unexpected service output: {line:?}"))
        .to_string();
    (Service(child), addr)
}

#[test]
fn enroll_twice_hits_already_registered() {
    let dir = tempfile::tempdir().unwrap();
    let key_path = dir.path().join("cts.key");
    let dir_path = dir.path().join("directory.txt");
    let cred_path = dir.path().join("idp1.cred");
    let registry_path = dir.path().join("registry.log");
    let config_path = dir.path().join("fed.cfg");

    run_ok(&[
        "keygen", "--key-bits", "64", "--seed", SEED,
        "--out", key_path.to_str().unwrap(),
    ]);
    run_ok(&[
        "onboard-idp",
        "--key", key_path.to_str().unwrap(),
        "--idp-id", "idp-1",
        "--seed", SEED,
        "--directory", dir_path.to_str().unwrap(),
        "--out", cred_path.to_str().unwrap(),
    ]);

    let (_cts, addr) = spawn_service(&[
        "serve-cts",
        "--key", key_path.to_str().unwrap(),
        "--registry", registry_path.to_str().unwrap(),
        "--listen", "127.0.0.1:0",
    ]);

    std::fs::write(
        &config_path,
        format!(
            "cts={addr}\ncredential={}\ndirectory={}\n",
            cred_path.display(),
            dir_path.display()
        ),
    )
    .unwrap();

    let first = bin()
        .args([
            "enroll",
            "--config", config_path.to_str().unwrap(),
            "--upi", "alice",
            "--seed", SEED2,
        ])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&first.stdout).to_string();
    assert_eq!(first.status.code(), Some(0), "first enroll: {stdout}");
    assert!(stdout.contains("status=ok"));
    assert!(stdout.contains("pid="));

    let second = bin()
        .args([
            "enroll",
            "--config", config_path.to_str().unwrap(),
            "--upi", "alice",
            "--seed", SEED2,
        ])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&second.stdout).to_string();
    assert_eq!(second.status.code(), Some(1), "second enroll: {stdout}");
    assert!(stdout.contains("error=already_registered"), "got: {stdout}");

    // the registry log persisted exactly one ok record
    let log = std::fs::read_to_string(&registry_path).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("status:ok"));
}

#[test]
fn check_detects_cross_domain_duplicate_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let key_path = dir.path().join("cts.key");
    let dir_path = dir.path().join("directory.txt");
    let cred1 = dir.path().join("idp1.cred");
    let cred2 = dir.path().join("idp2.cred");

    run_ok(&[
        "keygen", "--key-bits", "64", "--seed", SEED,
        "--out", key_path.to_str().unwrap(),
    ]);
    run_ok(&[
        "onboard-idp",
        "--key", key_path.to_str().unwrap(),
        "--idp-id", "idp-1",
        "--seed", SEED,
        "--directory", dir_path.to_str().unwrap(),
        "--out", cred1.to_str().unwrap(),
    ]);
    run_ok(&[
        "onboard-idp",
        "--key", key_path.to_str().unwrap(),
        "--idp-id", "idp-2",
        "--seed", SEED2,
        "--directory", dir_path.to_str().unwrap(),
        "--out", cred2.to_str().unwrap(),
    ]);

    let (_cts, cts_addr) = spawn_service(&[
        "serve-cts",
        "--key", key_path.to_str().unwrap(),
        "--listen", "127.0.0.1:0",
    ]);
    let (_idp1, idp1_addr) = spawn_service(&[
        "serve-idp",
        "--credential", cred1.to_str().unwrap(),
        "--directory", dir_path.to_str().unwrap(),
        "--listen", "127.0.0.1:0",
    ]);

    // enroll alice at idp-1
    let cfg1 = dir.path().join("idp1.cfg");
    std::fs::write(
        &cfg1,
        format!("cts={cts_addr}\ncredential={}\ndirectory={}\n", cred1.display(), dir_path.display()),
    )
    .unwrap();
    run_ok(&["enroll", "--config", cfg1.to_str().unwrap(), "--upi", "alice", "--seed", SEED2]);

    // token-less check for alice at idp-2, with idp-1 as peer
    let cfg2 = dir.path().join("idp2.cfg");
    std::fs::write(
        &cfg2,
        format!(
            "cts={cts_addr}\ncredential={}\ndirectory={}\npeer.idp-1={idp1_addr}\n",
            cred2.display(),
            dir_path.display()
        ),
    )
    .unwrap();
    let check = bin()
        .args(["check", "--config", cfg2.to_str().unwrap(), "--upi", "alice", "--seed", SEED])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&check.stdout).to_string();
    assert_eq!(check.status.code(), Some(1), "check: {stdout}");
    assert!(stdout.contains("outcome=matched"), "got: {stdout}");

    // a fresh upi comes back clear
    let clear = bin()
        .args(["check", "--config", cfg2.to_str().unwrap(), "--upi", "bob", "--seed", SEED])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&clear.stdout).to_string();
    assert_eq!(clear.status.code(), Some(0), "clear check: {stdout}");
    assert!(stdout.contains("outcome=clear"));
}
