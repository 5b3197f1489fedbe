use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one run: what went in, with which settings, and what came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input datasets, path to SHA-256.
    pub datasets: BTreeMap<String, String>,
    /// Input checkpoints, path to SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: BTreeMap::from([("seed".to_string(), seed)]),
            datasets: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn add_dataset(&mut self, path: &Path) -> Result<()> {
        self.datasets.insert(key(path), hash_path(path)?);
        Ok(())
    }

    pub fn add_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoints.insert(key(path), hash_path(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(key(path), hash_path(path)?);
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Checks that `self`, a fresh manifest for the run about to start, has
    /// the same command, settings and input hashes as `previous`.
    pub fn verify_against(&self, previous: &RunManifest) -> Result<()> {
        if self.command != previous.command {
            bail!("manifest is for `{}`, not `{}`", previous.command, self.command);
        }
        if self.config != previous.config || self.seeds != previous.seeds {
            bail!("configuration differs from the recorded run");
        }
        for (what, now, then) in [
            ("dataset", &self.datasets, &previous.datasets),
            ("checkpoint", &self.checkpoints, &previous.checkpoints),
        ] {
            if now != then {
                let changed: Vec<&String> = now
                    .keys()
                    .chain(then.keys())
                    .filter(|k| now.get(*k) != then.get(*k))
                    .collect();
                bail!("{what} hashes differ from the recorded run: {changed:?}");
            }
        }
        Ok(())
    }

    /// Whether every recorded output still exists with its recorded hash.
    pub fn outputs_intact(&self) -> bool {
        self.finished_at.is_some()
            && !self.outputs.is_empty()
            && self
                .outputs
                .iter()
                .all(|(p, h)| hash_path(Path::new(p)).is_ok_and(|now| &now == h))
    }
}

/// `<output>.manifest.json`
pub fn default_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn key(path: &Path) -> String {
    path.display().to_string()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.display().to_string().as_bytes());
            hasher.update([0]);
            hasher.update(hash_path(&f)?.as_bytes());
        }
    } else {
        let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        std::io::copy(&mut f, &mut hasher)?;
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
