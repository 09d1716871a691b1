//! Output directory bookkeeping: every artifact a command writes is hashed
//! into `manifest.json`, keyed by its path relative to the run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn rel_key(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub struct RunDir {
    root: PathBuf,
    /// Prefix owned by the running command; stale entries under it are
    /// dropped from the manifest.
    prefix: String,
    written: BTreeMap<String, String>,
}

impl RunDir {
    pub fn open(root: &Path, prefix: &str) -> CliResult<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            prefix: prefix.to_owned(),
            written: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        babel_core::corpus::write_bytes(&self.root.join(rel), bytes)?;
        self.written.insert(rel.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        self.write(rel, text.as_bytes())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(rel, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> CliResult<()> {
        self.write(rel, babel_core::corpus::write_jsonl_string(records).as_bytes())
    }

    /// Hash a file some other writer produced. Files outside the run
    /// directory are recorded under their path as given.
    pub fn record(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
        let key = match path.strip_prefix(&self.root) {
            Ok(rel) => rel_key(rel),
            Err(_) => rel_key(path),
        };
        self.written.insert(key, sha256_hex(&bytes));
        Ok(())
    }

    /// Merge this command's entries into the manifest.
    pub fn finish(self) -> CliResult<BTreeMap<String, String>> {
        let path = self.root.join(MANIFEST);
        let mut manifest: BTreeMap<String, String> = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let stale = format!("{}/", self.prefix);
        manifest.retain(|k, _| !k.starts_with(&stale));
        manifest.extend(self.written);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        babel_core::corpus::write_bytes(&path, text.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_merges_and_replaces_own_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RunDir::open(dir.path(), "a").unwrap();
        a.write_text("a/x.txt", "1").unwrap();
        a.write_text("a/y.txt", "2").unwrap();
        a.finish().unwrap();
        let mut b = RunDir::open(dir.path(), "b").unwrap();
        b.write_text("b/z.txt", "3").unwrap();
        b.finish().unwrap();
        let mut a = RunDir::open(dir.path(), "a").unwrap();
        a.write_text("a/x.txt", "1").unwrap();
        let m = a.finish().unwrap();
        assert_eq!(m.keys().collect::<Vec<_>>(), ["a/x.txt", "b/z.txt"]);
        assert_eq!(m["a/x.txt"], sha256_hex(b"1"));
    }
}
