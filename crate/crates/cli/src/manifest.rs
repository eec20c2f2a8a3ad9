use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BUILD_ID: &str = env!("DCGL_GIT_DESCRIBE");

/// Record of one training run, enough to rebuild it from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub config_hash: String,
    pub data_dir: PathBuf,
    pub min_interactions: usize,
    pub split_seed: u64,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub build: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
