use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

/// First 16 hex digits of the SHA-256 of `parts`, each length-prefixed.
pub fn config_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Output directory `<root>/<subcommand>/<hash>/<seed>/`, filled in a
/// staging directory and moved into place only once every file is written.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn create(root: &Path, subcommand: &str, hash: &str, seed: u64) -> Result<Self, CliError> {
        let parent = root.join(subcommand).join(hash);
        let target = parent.join(seed.to_string());
        let staging = parent.join(format!(".{seed}.partial-{}", std::process::id()));
        fs::create_dir_all(&staging).map_err(|e| io_err(&staging, e))?;
        Ok(Self { staging, target })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.staging.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))
    }

    /// Replaces any earlier run with the same name.
    pub fn commit(self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| io_err(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| io_err(&self.target, e))?;
        Ok(self.target.clone())
    }

    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_separates_parts() {
        assert_eq!(config_hash(&[b"ab", b"c"]).len(), 16);
        assert_ne!(config_hash(&[b"ab", b"c"]), config_hash(&[b"a", b"bc"]));
        assert_eq!(config_hash(&[b"x"]), config_hash(&[b"x"]));
    }
}
