//! Experiment manifests: a flat key=value file written next to the primary
//! output of every run, recording the resolved parameters, seeds and
//! digests of all inputs and outputs. The recorded argv is sufficient to
//! reproduce serial-mode outputs byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// FNV-1a 64-bit over the file bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).with_context(|| format!("digesting {}", path.display()))?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("fnv1a:{hash:016x}"))
}

pub struct Manifest {
    entries: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest {
            entries: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        m.set("command", command);
        m.set("artifact_version", env!("CARGO_PKG_VERSION"));
        let argv: Vec<String> = std::env::args().skip(1).collect();
        m.set("argv", argv.join(" "));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<primary>.manifest`, digesting all registered files.
    pub fn write(mut self, primary_output: &Path, wall_clock_s: f64) -> Result<()> {
        for path in self.inputs.clone() {
            let digest = file_digest(&path)?;
            self.set(&format!("input.{}", path.display()), digest);
        }
        for path in self.outputs.clone() {
            let digest = file_digest(&path)?;
            self.set(&format!("output.{}", path.display()), digest);
        }
        self.set("wall_clock_s", format!("{wall_clock_s:.3}"));
        let mut text = String::new();
        for (k, v) in &self.entries {
            writeln!(text, "{k}={v}").expect("string write");
        }
        let path = manifest_path(primary_output);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    name.push_str(".manifest");
    primary_output.with_file_name(name)
}
