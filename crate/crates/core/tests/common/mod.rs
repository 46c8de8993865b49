#![allow(dead_code)]

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use cfi_heal::config::{load_config, ProjectConfig};
use tempfile::TempDir;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn oracle_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/oracles/trial_entry.sh")
}

fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// A scratch copy of fixture `name`; heal runs patch sources in place.
pub fn scratch(name: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join(name);
    copy_tree(&fixtures().join(name), &root).expect("copy fixture");
    (dir, root)
}

pub fn config(root: &Path) -> ProjectConfig {
    load_config(&root.join("cfi.toml")).expect("fixture config")
}

pub fn have(tool: &str) -> bool {
    Command::new(tool)
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success())
}

pub fn toolchain_ready() -> Result<(), String> {
    for tool in ["clang", "ld.lld", "make"] {
        if !have(tool) {
            return Err(format!("{tool} not found on PATH"));
        }
    }
    Ok(())
}

/// Exit status printed by the oracle script for one ignorelist entry.
pub fn trial(fixture: &str, entry: &str, arg: &str) -> String {
    let out = Command::new("sh")
        .arg(oracle_script())
        .arg(fixtures().join(fixture))
        .arg(entry)
        .arg(arg)
        .output()
        .expect("run oracle script");
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

/// Runs `./app <arg>` inside `root`; the exit code, or 128+signal.
pub fn run_app(root: &Path, arg: &str) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    let status = Command::new(root.join("app"))
        .arg(arg)
        .current_dir(root)
        .output()
        .expect("run app")
        .status;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}
