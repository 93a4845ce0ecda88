//! On-disk formats private to the pipeline.

use std::path::Path;

use ndarray::Array2;

use super::PipelineError;
use crate::binio::{BinReader, BinWriter};
use crate::features::FeatureMatrix;

const BUNDLE_MAGIC: &[u8; 4] = b"FBND";
const MATRIX_MAGIC: &[u8; 4] = b"MATX";
const VECTOR_MAGIC: &[u8; 4] = b"VECT";

fn malformed(path: &Path, msg: impl ToString) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Named feature matrices stored in single precision.
pub fn write_bundle(items: &[(String, FeatureMatrix)]) -> Vec<u8> {
    let mut w = BinWriter::new(BUNDLE_MAGIC, 1);
    w.u64(items.len() as u64);
    for (id, fm) in items {
        w.str(id);
        w.f64(fm.frame_shift_ms);
        w.f64(fm.frame_length_ms);
        w.array2_f32(fm.values());
    }
    w.finish()
}

pub fn read_bundle(
    data: &[u8],
    path: &Path,
) -> Result<Vec<(String, FeatureMatrix)>, PipelineError> {
    let parse = || -> Result<Vec<(String, FeatureMatrix)>, crate::binio::BinError> {
        let mut r = BinReader::new(data, BUNDLE_MAGIC, 1)?;
        let n = r.u64("count")? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.str("id")?;
            let shift = r.f64("frame shift")?;
            let len = r.f64("frame length")?;
            let values = r.array2_f32("values")?;
            let fm = FeatureMatrix::with_geometry(values, shift, len)
                .map_err(|e| crate::binio::BinError::Format(e.to_string()))?;
            out.push((id, fm));
        }
        r.finish()?;
        Ok(out)
    };
    parse().map_err(|e| malformed(path, e))
}

pub fn write_matrix(m: &Array2<f64>) -> Vec<u8> {
    let mut w = BinWriter::new(MATRIX_MAGIC, 1);
    w.array2(m);
    w.finish()
}

pub fn read_matrix(data: &[u8], path: &Path) -> Result<Array2<f64>, PipelineError> {
    let parse = || {
        let mut r = BinReader::new(data, MATRIX_MAGIC, 1)?;
        let m = r.array2("matrix")?;
        r.finish()?;
        Ok::<_, crate::binio::BinError>(m)
    };
    parse().map_err(|e| malformed(path, e))
}

pub fn write_vector(v: &[f64]) -> Vec<u8> {
    let mut w = BinWriter::new(VECTOR_MAGIC, 1);
    w.f64s(v);
    w.finish()
}

pub fn read_vector(data: &[u8], path: &Path) -> Result<Vec<f64>, PipelineError> {
    let parse = || {
        let mut r = BinReader::new(data, VECTOR_MAGIC, 1)?;
        let v = r.f64s("vector")?;
        r.finish()?;
        Ok::<_, crate::binio::BinError>(v)
    };
    parse().map_err(|e| malformed(path, e))
}

/// One row of a prepared set: `utt-id<TAB>speaker<TAB>transcript`.
#[derive(Debug, Clone, PartialEq)]
pub struct UttInfo {
    pub id: String,
    pub speaker: String,
    pub words: Vec<String>,
}

pub fn format_utts(utts: &[UttInfo]) -> String {
    utts.iter()
        .map(|u| format!("{}\t{}\t{}\n", u.id, u.speaker, u.words.join(" ")))
        .collect()
}

pub fn parse_utts(text: &str, path: &Path) -> Result<Vec<UttInfo>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.splitn(3, '\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(spk), Some(text)) if !id.is_empty() => Ok(UttInfo {
                    id: id.to_string(),
                    speaker: spk.to_string(),
                    words: text.split_whitespace().map(String::from).collect(),
                }),
                _ => Err(malformed(
                    path,
                    format!("line {}: expected 3 tab-separated fields", i + 1),
                )),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bundle_round_trip() {
        let items = vec![
            (
                "a".to_string(),
                FeatureMatrix::new(array![[1.0, 2.5], [0.25, -3.0]]).unwrap(),
            ),
            (
                "b c".to_string(),
                FeatureMatrix::new(Array2::zeros((0, 2))).unwrap(),
            ),
        ];
        let back = read_bundle(&write_bundle(&items), Path::new("x")).unwrap();
        assert_eq!(back, items);
        assert!(read_bundle(&write_bundle(&items)[..20], Path::new("x")).is_err());
    }

    #[test]
    fn utts_round_trip() {
        let u = vec![UttInfo {
            id: "u1".into(),
            speaker: "s".into(),
            words: vec!["你好".into(), "世界".into()],
        }];
        assert_eq!(parse_utts(&format_utts(&u), Path::new("x")).unwrap(), u);
        assert!(parse_utts("only\tone\n", Path::new("x")).is_err());
    }
}
