//! Binary checkpoints: every named parameter tensor, the model configuration
//! and the fingerprint of the run that produced them.
//!
//! Layout (little-endian): magic `PMCKPT01`, u32 version, fingerprint and
//! model TOML as length-prefixed UTF-8, u32 tensor count, then per tensor a
//! length-prefixed name, u32 rank, u64 dims and f64 values. A SHA-256 of all
//! preceding bytes closes the file.

use std::path::Path;

use protomiss_core::config::ModelConfig;
use protomiss_core::model::PrimeModel;
use protomiss_core::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"PMCKPT01";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub fingerprint: String,
    pub model: ModelConfig,
    pub params: ParamStore,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &toml::to_string(&self.model).expect("model config serializes"));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            put_str(&mut out, self.params.name(id));
            let t = self.params.get(id);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { b: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {}", version));
        }
        let fingerprint = r.string()?;
        let model: ModelConfig = toml::from_str(&r.string()?).map_err(|e| e.to_string())?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<std::result::Result<Vec<_>, _>>()?;
            params.add(&name, Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { fingerprint, model, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingFile(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
        Self::decode(&bytes).map_err(|msg| CliError::Checkpoint { path: path.to_path_buf(), msg })
    }

    /// Rebuilds the model and fills every parameter from the checkpoint.
    pub fn restore(&self) -> std::result::Result<(PrimeModel, ParamStore), String> {
        let mut ps = ParamStore::new();
        let model = PrimeModel::new(&mut ps, &self.model, 0).map_err(|e| e.to_string())?;
        let copied = ps.load_from(&self.params);
        if copied != ps.len() {
            return Err(format!("checkpoint supplies {} of {} model tensors", copied, ps.len()));
        }
        Ok((model, ps))
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.b.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.b.len()));
        }
        self.pos += n;
        Ok(&self.b[self.pos - n..self.pos])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
