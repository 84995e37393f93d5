//! Run ledger: one CSV row per emitted artifact, tying it to the command,
//! the configuration fingerprint, the seed and a hash of the inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const LEDGER: &str = "ledger.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub run_id: String,
    pub command: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub inputs_hash: String,
    /// Path relative to the output directory.
    pub output: String,
    pub output_sha256: String,
}

pub struct RunLedger {
    pub run_id: String,
    command: String,
    fingerprint: String,
    seed: u64,
    inputs_hash: String,
    outputs: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash over the sorted relative names and contents of every file under `dir`.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, std::path::PathBuf)>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let p = e.map_err(|e| CliError::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"), p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (name, p) in files {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunLedger {
    pub fn new(command: &str, fingerprint: &str, seed: u64, inputs_hash: &str) -> Self {
        let mut h = Sha256::new();
        for part in [command, fingerprint, &seed.to_string(), inputs_hash] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let run_id = hex::encode(&h.finalize()[..8]);
        Self { run_id, command: command.into(), fingerprint: fingerprint.into(), seed, inputs_hash: inputs_hash.into(), outputs: Vec::new() }
    }

    /// Records a file or directory under `out`.
    pub fn record(&mut self, out: &Path, rel: &str) -> Result<()> {
        let p = out.join(rel);
        let h = if p.is_dir() { sha256_dir(&p)? } else { sha256_file(&p)? };
        self.outputs.push((rel.to_string(), h));
        Ok(())
    }

    /// Merges into `out/ledger.csv`. Older rows for the same artifact are
    /// replaced so each artifact stays traceable to exactly one run.
    pub fn write(&self, out: &Path) -> Result<Vec<Entry>> {
        let path = out.join(LEDGER);
        let mut rows: Vec<Entry> = Vec::new();
        if path.exists() {
            let mut r = csv::Reader::from_path(&path)?;
            for e in r.deserialize() {
                rows.push(e?);
            }
        }
        rows.retain(|e| !self.outputs.iter().any(|(o, _)| *o == e.output));
        rows.extend(self.outputs.iter().map(|(o, h)| Entry {
            run_id: self.run_id.clone(),
            command: self.command.clone(),
            config_fingerprint: self.fingerprint.clone(),
            seed: self.seed,
            inputs_hash: self.inputs_hash.clone(),
            output: o.clone(),
            output_sha256: h.clone(),
        }));
        rows.sort_by(|a, b| a.output.cmp(&b.output));
        let mut w = csv::Writer::from_path(&path)?;
        for e in &rows {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(rows)
    }
}
