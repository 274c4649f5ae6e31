//! File formats: layout and scene JSON, PLY point clouds, PGM/PNG buffer dumps.
//!
//! Every writer goes through [`write_atomic`], which writes a temporary file in
//! the destination directory and renames it into place.

mod buffers;
mod layout_file;
mod ply;
mod scene_file;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use buffers::{
    decode_depth, encode_depth, load_depth_map, load_mask, normal_png, read_pgm, silhouette_pgm,
    write_buffers, BufferPaths, DepthSidecar, Pgm,
};
pub use layout_file::{
    interpret_row, load_layout_spec, load_layout_spec_detailed, parse_layout_spec, LoadMode,
    LoadedLayout, RowInterpretation,
};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyFormat};
pub use scene_file::{load_scene_file, save_scene_file, PipelineConfig, SceneEntry, SceneFile};

/// Reads a whole file, attaching the path to any error.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_err = |source| Error::File {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(file_err)?;
    tmp.write_all(bytes).map_err(file_err)?;
    tmp.as_file().sync_all().map_err(file_err)?;
    tmp.persist(path).map_err(|e| file_err(e.error))?;
    Ok(())
}
