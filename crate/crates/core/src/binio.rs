//! Little-endian binary encoding helpers shared by the model formats.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinError {
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unexpected end of data reading {0}")]
    Eof(&'static str),
    #[error("malformed data: {0}")]
    Format(String),
}

#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn array1(&mut self, a: &Array1<f64>) {
        self.u64(a.len() as u64);
        for &x in a.iter() {
            self.f64(x);
        }
    }

    pub fn array2(&mut self, a: &Array2<f64>) {
        self.u64(a.nrows() as u64);
        self.u64(a.ncols() as u64);
        for &x in a.iter() {
            self.f64(x);
        }
    }

    /// Single-precision storage for bulky feature data.
    pub fn array2_f32(&mut self, a: &Array2<f64>) {
        self.u64(a.nrows() as u64);
        self.u64(a.ncols() as u64);
        for &x in a.iter() {
            self.buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, BinError> {
        if data.len() < 8 || &data[..4] != magic {
            return Err(BinError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let mut r = Self { data, pos: 4 };
        let found = r.u32("version")?;
        if found != version {
            return Err(BinError::Version {
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], BinError> {
        if self.pos + n > self.data.len() {
            return Err(BinError::Eof(what));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, BinError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, BinError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, BinError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn i32(&mut self, what: &'static str) -> Result<i32, BinError> {
        Ok(i32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64, BinError> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn array2_f32(&mut self, what: &'static str) -> Result<Array2<f64>, BinError> {
        let rows = self.u64(what)? as usize;
        let cols = self.u64(what)? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| BinError::Format(format!("{what}: size overflow")))?;
        let bytes = self.take(n, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| BinError::Format(e.to_string()))
    }

    pub fn str(&mut self, what: &'static str) -> Result<String, BinError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| BinError::Format(format!("{what}: invalid utf-8")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, BinError> {
        let n = self.u64(what)? as usize;
        if n > self.data.len() {
            return Err(BinError::Format(format!("{what}: implausible length {n}")));
        }
        Ok(n)
    }

    pub fn f64s(&mut self, what: &'static str) -> Result<Vec<f64>, BinError> {
        let n = self.len(what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn array1(&mut self, what: &'static str) -> Result<Array1<f64>, BinError> {
        Ok(Array1::from(self.f64s(what)?))
    }

    pub fn array2(&mut self, what: &'static str) -> Result<Array2<f64>, BinError> {
        let rows = self.len(what)?;
        let cols = self.len(what)?;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| self.f64(what))
            .collect::<Result<_, _>>()?;
        Array2::from_shape_vec((rows, cols), data).map_err(|e| BinError::Format(e.to_string()))
    }

    pub fn finish(self) -> Result<(), BinError> {
        if self.pos != self.data.len() {
            return Err(BinError::Format(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
