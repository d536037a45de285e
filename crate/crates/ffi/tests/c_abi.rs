use std::path::{Path, PathBuf};
use std::process::Command;

/// `target/<profile>/deps`, where `cargo test` builds the static library
/// alongside the test binary.
fn deps_dir() -> PathBuf {
    std::env::current_exe().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_drives_a_daemon() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = deps_dir().join("libb4ns_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("c_abi");
    let cc = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c_abi.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));

    let settings = serde_json::json!({ "runtime_dir": dir.path().join("run"), "probe": false });
    let spec = serde_json::json!({
        "container_id": "web",
        "container_addr": "10.4.0.2",
        "publish": ["18080:80"],
        "seccomp_handoff_path": dir.path().join("web.sock"),
    });
    let out = Command::new(&exe).arg(settings.to_string()).arg(spec.to_string()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(listed[0]["container_id"], "web");
}
