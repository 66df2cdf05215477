//! Run manifests: a flat `key=value` file written next to the primary
//! output, listing the command, effective config, and SHA-256 of every input
//! and output file. No timestamps, so identical runs give identical
//! manifests.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn config(&mut self, echo: Vec<(String, String)>) {
        for (k, v) in echo {
            self.entries.push((format!("config.{k}"), v));
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn render(&self) -> io::Result<String> {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={}", escape(v)).unwrap();
        }
        for (kind, files) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (name, path) in files {
                writeln!(s, "{kind}.{name}={}", escape(&path.display().to_string())).unwrap();
                writeln!(s, "{kind}.{name}.sha256={}", sha256_file(path)?).unwrap();
            }
        }
        Ok(s)
    }

    /// Writes `<primary>.manifest` and returns its path.
    pub fn write_next_to(&self, primary: &Path) -> io::Result<PathBuf> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest");
        let path = PathBuf::from(name);
        std::fs::write(&path, self.render()?)?;
        Ok(path)
    }
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}
