//! Checkpoints, image export, configuration documents and run manifests.

mod checkpoint;
mod config;
mod image;
mod manifest;
mod objects;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{parse_config, parse_config_str, Config, RunConfig};
pub use image::{encode_pnm, export_image, pixel_byte, tile};
pub use manifest::{git_hash, now_ms, InputRecord, RunManifest, StageStamp};
pub use objects::{
    load_dataset, load_inversion, load_network, network_checkpoint, save_dataset, save_inversion, save_network,
    SavedDataset, SavedNetwork,
};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes to a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
