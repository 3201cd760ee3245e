//! Binary checkpoint of named matrices.
//!
//! Layout: `PMFCKPT1`, u32 LE section count, then per section a u32 LE name
//! length, the UTF-8 name and one matrix block (see
//! [`crate::data::write_matrix_block`]). Sections are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::data::{read_matrix_block, write_matrix_block};
use crate::error::{PmfError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMFCKPT1";

pub fn save_sections(path: &Path, sections: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| PmfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(sections.len() as u32).to_le_bytes())?;
        for (name, m) in sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_matrix_block(w, m)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| PmfError::io(path, e))
}

pub fn load_sections(path: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    if !path.exists() {
        return Err(PmfError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| PmfError::io(path, e))?;
    let fmt = |detail: &str| PmfError::Format {
        file: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| fmt("truncated header"))?;
    let count = u32::from_le_bytes(word);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut word).map_err(|_| fmt("truncated section name"))?;
        let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut name).map_err(|_| fmt("truncated section name"))?;
        let name = String::from_utf8(name).map_err(|_| fmt("section name is not UTF-8"))?;
        let m = read_matrix_block(&mut r, path)?;
        if out.insert(name.clone(), m).is_some() {
            return Err(fmt(&format!("duplicate section '{name}'")));
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(fmt("trailing bytes after last section"));
    }
    Ok(out)
}

/// Rounds every entry to f32, matching what a save/load cycle produces.
pub fn round_to_f32(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v as f32 as f64)
}
