//! Binary cache for extracted log-mel-spectrograms.
//!
//! Layout: magic `MELC`, then `version`, `n_mels`, `T` as little-endian
//! u32, then `n_mels * T` row-major little-endian f32 values.

use super::{DspError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MELC";
const VERSION: u32 = 1;

pub fn save_mel_cache(path: &Path, values: &Array2<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(values.nrows() as u32)?;
    w.write_u32::<LittleEndian>(values.ncols() as u32)?;
    for row in values.rows() {
        for &v in row {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_mel_cache(path: &Path) -> Result<Array2<f32>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DspError::CacheFormat(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(DspError::CacheFormat(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n_mels = r.read_u32::<LittleEndian>()? as usize;
    let t_total = r.read_u32::<LittleEndian>()? as usize;
    if n_mels == 0 || t_total == 0 {
        return Err(DspError::CacheFormat(format!(
            "{}: empty dimensions {n_mels}x{t_total}",
            path.display()
        )));
    }
    let mut data = vec![0f32; n_mels * t_total];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(DspError::CacheFormat(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Array2::from_shape_vec((n_mels, t_total), data)
        .map_err(|e| DspError::CacheFormat(e.to_string()))
}
