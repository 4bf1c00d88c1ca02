use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Open `path` for writing, naming it in the error.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_string(path: &Path, s: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(s.as_bytes())?;
    if !s.ends_with('\n') {
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Provenance record written next to the main output. Holds no timestamps,
/// so identical invocations produce identical files.
#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    threads: Option<usize>,
    seed: Option<u64>,
    command: &'a C,
    outputs: Vec<String>,
}

pub fn write_manifest<C: Serialize>(out: &Path, command: &C, threads: Option<usize>, seed: Option<u64>, outputs: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        threads,
        seed,
        command,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_string(&sidecar(out, ".manifest.json"), &serde_json::to_string_pretty(&m)?)
}
