//! Versioned JSON checkpoint container.
//!
//! ```json
//! {"format": "decorr-checkpoint", "kind": "loop_state", "version": 1, "payload": {...}}
//! ```
//!
//! Writes go to a temporary sibling file that is synced and renamed over the
//! target, so a crash leaves either the old or the new checkpoint.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT: &str = "decorr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    kind: String,
    version: u32,
    payload: T,
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: &str, payload: &T) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let env = Envelope {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            version: VERSION,
            payload,
        };
        serde_json::to_writer(&mut w, &env).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_envelope(path: &Path) -> Result<Envelope<serde_json::Value>> {
    let r = BufReader::new(File::open(path)?);
    let env: Envelope<serde_json::Value> =
        serde_json::from_reader(r).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", env.format)));
    }
    if env.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
    }
    Ok(env)
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    let env = read_envelope(path.as_ref())?;
    if env.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            env.kind
        )));
    }
    serde_json::from_value(env.payload).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// The `kind` tag of a checkpoint file.
pub fn kind(path: impl AsRef<Path>) -> Result<String> {
    read_envelope(path.as_ref()).map(|env| env.kind)
}
