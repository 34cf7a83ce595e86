//! Binary checkpoints: a magic tag, a format version, then the serialized trainer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::{Trainer, TrainerState};

pub const MAGIC: &[u8; 8] = b"DDFGCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config_toml: String,
    state: TrainerState,
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let snap = Snapshot { config_toml: trainer.config().to_toml_string()?, state: trainer.state.clone() };
    let mut out = Vec::with_capacity(1 << 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    bincode::serialize_into(&mut out, &snap).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
    }
    let snap: Snapshot = bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = RunConfig::from_toml_str(&snap.config_toml)?;
    Trainer::from_state(config, snap.state)
}

/// Writes through a temporary file so a crash never leaves a truncated checkpoint.
pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}
