use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{FeatureError, FeatureMatrix};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"ASRF";
const ARCHIVE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 4;

/// Binary layout (little endian): magic, version u32, frames u64, dims u32,
/// frame_shift_ms f32, frame_length_ms f32, then frames*dims f32 in row-major order.
pub fn write_archive(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<(), FeatureError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(ARCHIVE_MAGIC)?;
    f.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    f.write_all(&(fm.frames() as u64).to_le_bytes())?;
    f.write_all(&(fm.dims() as u32).to_le_bytes())?;
    f.write_all(&(fm.frame_shift_ms as f32).to_le_bytes())?;
    f.write_all(&(fm.frame_length_ms as f32).to_le_bytes())?;
    for v in fm.values().iter() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Format("truncated header".into()));
    }
    if &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let f32_at = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != ARCHIVE_VERSION {
        return Err(FeatureError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let frames = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let dims = u32_at(16) as usize;
    let shift = f32_at(20) as f64;
    let length = f32_at(24) as f64;
    let expected = HEADER_LEN + frames * dims * 4;
    if bytes.len() != expected {
        return Err(FeatureError::Format(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let values = Array2::from_shape_vec((frames, dims), data)
        .map_err(|e| FeatureError::Format(e.to_string()))?;
    FeatureMatrix::with_geometry(values, shift, length)
}

/// Text fixture format: a `frames dims` line followed by one whitespace-separated row per frame.
pub fn write_text_matrix(fm: &FeatureMatrix) -> String {
    let mut out = format!("{} {}\n", fm.frames(), fm.dims());
    for row in fm.values().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_text_matrix(text: &str) -> Result<FeatureMatrix, FeatureError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| FeatureError::Format("empty matrix text".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| FeatureError::Format(format!("bad header `{header}`")))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() != 2 {
        return Err(FeatureError::Format(format!("bad header `{header}`")));
    }
    let (frames, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(frames * cols);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| FeatureError::Format(format!("row {i}: bad number `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        if row.len() != cols {
            return Err(FeatureError::Format(format!(
                "row {i} has {} values, expected {cols}",
                row.len()
            )));
        }
        data.extend(row);
    }
    if data.len() != frames * cols {
        return Err(FeatureError::Format(format!(
            "expected {frames} rows, found {}",
            data.len() / cols.max(1)
        )));
    }
    FeatureMatrix::new(Array2::from_shape_vec((frames, cols), data).expect("checked shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feats");
        let fm = FeatureMatrix::new(Array2::from_shape_fn((4, 3), |(t, d)| {
            t as f64 * 0.5 - d as f64
        }))
        .unwrap();
        write_archive(&path, &fm).unwrap();
        assert_eq!(read_archive(&path).unwrap(), fm);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        assert!(read_archive(&path).is_err());
        bytes[0] = b'Z';
        fs::write(&path, &bytes).unwrap();
        assert!(read_archive(&path).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let fm = FeatureMatrix::new(Array2::from_shape_fn((2, 3), |(t, d)| {
            (t * 3 + d) as f64 / 7.0
        }))
        .unwrap();
        assert_eq!(read_text_matrix(&write_text_matrix(&fm)).unwrap(), fm);
        assert!(read_text_matrix("2 2\n1 2\n3\n").is_err());
    }
}
