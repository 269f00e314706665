//! RKT1 binary tensor files and checkpoint manifests.
//!
//! Layout: magic bytes `RKT1`, u32 little-endian rank (always 2), u32 rows,
//! u32 cols, u8 precision tag (4 = single, 8 = double), then row-major raw
//! little-endian values (f32 for single, f64 for double). Single-precision
//! tensors round-trip bit-exactly because their elements are f32-representable
//! by construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor2D};

const MAGIC: &[u8; 4] = b"RKT1";

pub fn write_tensor(path: &Path, tensor: &Tensor2D) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
    w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
    w.write_all(&[tensor.precision().tag()])?;
    match tensor.precision() {
        Precision::Single => {
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Precision::Double => {
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor2D> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadTensorFile {
            reason: format!("bad magic {magic:?}"),
        });
    }
    let rank = read_u32(&mut r)?;
    if rank != 2 {
        return Err(Error::BadTensorFile {
            reason: format!("unsupported rank {rank}"),
        });
    }
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = Precision::from_tag(tag[0]).ok_or_else(|| Error::BadTensorFile {
        reason: format!("unknown precision tag {}", tag[0]),
    })?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::BadTensorFile {
            reason: "element count overflow".to_string(),
        })?;
    let mut data = Vec::with_capacity(count);
    match precision {
        Precision::Single => {
            let mut buf = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Precision::Double => {
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::BadTensorFile {
            reason: "trailing bytes after payload".to_string(),
        });
    }
    Tensor2D::new(rows, cols, data, precision)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write a checkpoint: one RKT1 file per named matrix plus a `manifest.csv`
/// mapping `name,file` inside `dir`.
pub fn write_checkpoint(dir: &Path, entries: &[(String, &Tensor2D)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("name,file\n");
    for (name, tensor) in entries {
        let file = format!("{name}.rkt");
        write_tensor(&dir.join(&file), tensor)?;
        manifest.push_str(&format!("{name},{file}\n"));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Read every tensor listed in a checkpoint manifest, in manifest order.
pub fn read_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor2D)>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for line in manifest.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (name, file) = line.split_once(',').ok_or_else(|| Error::Parse {
            field: format!("manifest line {line:?}"),
        })?;
        out.push((name.to_string(), read_tensor(&dir.join(file))?));
    }
    Ok(out)
}
