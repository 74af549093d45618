//! End-to-end checks of the command-line interface.

use std::path::PathBuf;
use std::process::Command;

fn pnpf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pnpf"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn bundled_configs_validate() {
    for name in ["accuracy.toml", "charging.toml", "cv.toml"] {
        let out = pnpf().arg("validate").arg(configs().join(name)).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("# pnpf "));
    }
}

#[test]
fn config_errors_exit_with_one() {
    let out = pnpf().args(["validate", "does-not-exist.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = pnpf()
        .arg("validate")
        .arg(configs().join("cv.toml"))
        .args(["--override", "boundary.cycles=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = pnpf().arg("validate").arg(configs().join("cv.toml")).args(["--dt", "-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = pnpf().args(["mms", "--scheme", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overrides_reach_the_manifest() {
    let out = pnpf()
        .arg("validate")
        .arg(configs().join("charging.toml"))
        .args(["--override", "boundary.voltage=1.5", "--dt", "0.05"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("voltage = 1.5"), "{text}");
    assert!(text.contains("dt = 0.05"), "{text}");
}

#[test]
fn mms_writes_convergence_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnpf()
        .args(["mms", "--scheme", "2", "--levels", "2", "--t-end", "0.01", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("h,dt,err_c1,err_c2,err_psi,err_T,ord_c1,ord_c2,ord_psi,ord_T"));
    assert_eq!(csv.lines().count(), 3);
}
