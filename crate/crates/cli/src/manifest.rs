//! Run manifests: what a subcommand read and wrote, with content hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Git object id of `bytes` as a blob under the SHA-256 object format.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Derived from the command, its settings and the input hashes.
    pub run_id: String,
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub profile: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub checkpoint_hash: Option<String>,
}

pub struct ManifestBuilder {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    profile: String,
    inputs: Vec<Artifact>,
    outputs: Vec<PathBuf>,
    checkpoint: Option<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Option<&Path>, seed: Option<u64>, profile: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            seed,
            profile: profile.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn checkpoint(&mut self, path: PathBuf) {
        self.checkpoint = Some(path.clone());
        self.outputs.push(path);
    }

    /// Hash the outputs and write `<out>/<command>.manifest.json`.
    pub fn write(self, out: &Path) -> Result<PathBuf> {
        let mut id = Sha256::new();
        id.update(self.command.as_bytes());
        id.update(format!("{:?}|{:?}|{}", self.config, self.seed, self.profile).as_bytes());
        for a in &self.inputs {
            id.update(a.sha256.as_bytes());
        }
        let checkpoint_hash = match &self.checkpoint {
            Some(p) => Some(git_blob_hash(&std::fs::read(p)?)),
            None => None,
        };
        let manifest = RunManifest {
            run_id: hex(&id.finalize()[..8]),
            command: self.command,
            config: self.config,
            seed: self.seed,
            profile: self.profile,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            checkpoint_hash,
        };
        let path = out.join(format!("{}.manifest.json", manifest.command));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Every listed input and output exists and matches its recorded hash.
#[cfg(test)]
pub fn verify(manifest: &RunManifest) -> Result<()> {
    for a in manifest.inputs.iter().chain(&manifest.outputs) {
        let now = Artifact::of(&a.path)?;
        if now.sha256 != a.sha256 {
            anyhow::bail!("{} changed since the run", a.path.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            git_blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn written_manifest_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        let out = dir.path().join("out.bin");
        std::fs::write(&input, "x").unwrap();
        std::fs::write(&out, "y").unwrap();
        let mut b = ManifestBuilder::new("demo", None, Some(3), "desk");
        b.input(&input).unwrap();
        b.checkpoint(out.clone());
        let path = b.write(dir.path()).unwrap();
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        verify(&m).unwrap();
        assert_eq!(m.checkpoint_hash.as_deref(), Some(git_blob_hash(b"y").as_str()));
        std::fs::write(&out, "z").unwrap();
        assert!(verify(&m).is_err());
    }
}
