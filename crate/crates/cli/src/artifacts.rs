//! Output directories whose written files are listed, with SHA-256 hashes,
//! in a `MANIFEST` file.

use std::fs;
use std::path::{Path, PathBuf};

use machplan::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "MANIFEST";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct OutDir {
    root: PathBuf,
    entries: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    /// Writes `bytes` to `rel` (slash-separated, relative to the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(rel, bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.entries.retain(|(r, _)| r != rel);
        self.entries.push((rel.to_string(), sha256_hex(bytes)));
    }

    /// Writes `MANIFEST`: one `<sha256>  <path>` line per artifact, sorted
    /// by path.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.entries.sort();
        let text: String = self.entries.iter().map(|(r, h)| format!("{h}  {r}\n")).collect();
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
