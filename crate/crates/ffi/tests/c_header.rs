//! Compiles and runs a C program against the generated header and the
//! static library when a C compiler is available.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fedarena.h"

int main(void) {
    double grads[6] = {1.0, 0.0, 0.9, 0.1, -1.0, 0.0};
    double agg[2];
    uintptr_t kept[3];
    uintptr_t kept_len = 0;
    if (fedarena_atm(grads, 3, 2, 0, agg, kept, 3, &kept_len) != FEDARENA_STATUS_OK) return 1;
    if (kept_len != 3) return 2;
    double bound = 0.0;
    if (fedarena_theorem1_bound(10, 1, 2, 1.0, &bound) != FEDARENA_STATUS_OK) return 3;
    if (bound < 1.1020 || bound > 1.1021) return 4;
    FedarenaConfig *config = NULL;
    if (fedarena_config_from_toml("clients = 1", &config) != FEDARENA_STATUS_CONFIG_ERROR) return 5;
    char msg[128];
    fedarena_last_error(msg, sizeof msg);
    if (strlen(msg) == 0) return 6;
    printf("%s\n", fedarena_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let lib = target_dir().join("libfedarena_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}
