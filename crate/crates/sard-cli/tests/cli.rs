//! End-to-end checks against the built binary: byte-identical reruns,
//! dump verification exit codes, and the compare flow.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sard<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_sard"))
        .args(args)
        .output()
        .expect("spawn sard")
}

/// Fresh per-test scratch directory under the cargo tmp dir.
fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear scratch");
    }
    fs::create_dir_all(&dir).expect("create scratch");
    dir
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("read dump dir")
        .map(|e| {
            let e = e.expect("dir entry");
            let name = e.file_name().to_string_lossy().into_owned();
            (name, fs::read(e.path()).expect("read dump"))
        })
        .collect()
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let root = scratch("sweep-determinism");
    let config = root.join("base.json");
    fs::write(&config, r#"{"n_nodes":8,"n_users":5,"steps":10}"#).unwrap();
    let sweep = |tag: &str| -> (Vec<u8>, BTreeMap<String, Vec<u8>>) {
        let out = root.join(format!("{tag}.csv"));
        let dumps = root.join(format!("dumps-{tag}"));
        fs::create_dir_all(&dumps).unwrap();
        let st = sard([
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--axis",
            "requests",
            "--values",
            "0.5,1",
            "--strategies",
            "proposed,random",
            "--seeds",
            "2",
            "--out",
            out.to_str().unwrap(),
            "--dump-ledgers",
            dumps.to_str().unwrap(),
        ]);
        assert!(
            st.status.success(),
            "sweep failed: {}",
            String::from_utf8_lossy(&st.stderr)
        );
        (fs::read(&out).unwrap(), dir_contents(&dumps))
    };
    let (csv_a, dumps_a) = sweep("a");
    let (csv_b, dumps_b) = sweep("b");
    assert_eq!(csv_a, csv_b, "aggregated tables differ between reruns");
    assert!(!dumps_a.is_empty(), "expected ledger dumps");
    assert_eq!(dumps_a, dumps_b, "ledger dumps differ between reruns");
}

#[test]
fn run_dumps_verify_and_tampering_is_flagged() {
    let root = scratch("run-verify");
    let config = root.join("cfg.json");
    fs::write(&config, r#"{"n_nodes":8,"n_users":4,"steps":8}"#).unwrap();
    let dumps = root.join("ledgers");
    fs::create_dir_all(&dumps).unwrap();
    let st = sard([
        "run",
        "--config",
        config.to_str().unwrap(),
        "--strategy",
        "proposed",
        "--dump-ledgers",
        dumps.to_str().unwrap(),
    ]);
    assert!(
        st.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&st.stderr)
    );
    let stdout = String::from_utf8(st.stdout).unwrap();
    assert!(stdout.contains("acceptance"), "summary missing acceptance: {stdout}");

    let files = dir_contents(&dumps);
    assert!(files.keys().any(|k| k.contains("main")), "no main chain dump");
    let paths: Vec<String> = files
        .keys()
        .map(|k| dumps.join(k).to_str().unwrap().to_owned())
        .collect();
    let st = sard(std::iter::once("verify".to_owned()).chain(paths.iter().cloned()));
    assert!(st.status.success(), "verify of intact dumps failed");
    let vout = String::from_utf8(st.stdout).unwrap();
    assert_eq!(
        vout.lines().filter(|l| l.ends_with(": ok")).count(),
        paths.len(),
        "expected one ok line per dump: {vout}"
    );

    // Rewriting a hash-covered field must flip the exit code to 1.
    let victim = files
        .iter()
        .find(|(_, bytes)| {
            std::str::from_utf8(bytes).is_ok_and(|t| t.contains("\"timestamp\":"))
        })
        .map(|(name, _)| dumps.join(name))
        .expect("a dump with at least one committed block");
    let text = fs::read_to_string(&victim).unwrap();
    fs::write(&victim, text.replacen("\"timestamp\":", "\"timestamp\":7", 1)).unwrap();
    let st = sard(["verify", victim.to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(1), "tampered dump should exit 1");

    // An unreadable path is a usage error, not a failed check.
    let st = sard(["verify", root.join("missing.ndjson").to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(2), "missing dump should exit 2");
}

#[test]
fn compare_confirms_strategy_orderings() {
    let root = scratch("compare-flow");
    let config = root.join("base.json");
    fs::write(&config, r#"{"n_nodes":10,"n_users":10,"steps":40}"#).unwrap();
    let table = root.join("table.csv");
    let st = sard([
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "requests",
        "--values",
        "1",
        "--strategies",
        "proposed,optimal,random",
        "--seeds",
        "10",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(
        st.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&st.stderr)
    );
    let st = sard(["compare", "--in", table.to_str().unwrap()]);
    let stdout = String::from_utf8(st.stdout).unwrap();
    assert!(st.status.success(), "compare reported a violation: {stdout}");
    assert!(stdout.contains("all pass"), "unexpected compare output: {stdout}");
}
