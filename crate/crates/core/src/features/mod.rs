//! Frame-level acoustic features: MFCC, pitch, normalization, deltas and splicing.

mod io;
mod mfcc;
mod pitch;

pub use io::{read_archive, read_text_matrix, write_archive, write_text_matrix, ARCHIVE_MAGIC};
pub use mfcc::{compute_mfcc, hz_to_mel, mel_to_hz, MelFilterbank, MfccConfig};
pub use pitch::{compute_pitch, PitchConfig};

use ndarray::{s, Array2, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio has {samples} samples, shorter than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("delta order must be 1 or 2, got {0}")]
    DeltaOrder(usize),
    #[error("frame count mismatch: {0} vs {1}")]
    FrameMismatch(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("pitch feature count must be 3 or 4, got {0}")]
    PitchFeatureCount(usize),
    #[error("feature values must be finite")]
    NonFinite,
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frames x dims matrix plus the framing geometry it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, FeatureError> {
        Self::with_geometry(values, 10.0, 25.0)
    }

    pub fn with_geometry(
        values: Array2<f64>,
        frame_shift_ms: f64,
        frame_length_ms: f64,
    ) -> Result<Self, FeatureError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self {
            values,
            frame_shift_ms,
            frame_length_ms,
        })
    }

    fn derived(&self, values: Array2<f64>) -> Self {
        Self {
            values,
            frame_shift_ms: self.frame_shift_ms,
            frame_length_ms: self.frame_length_ms,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(t)
    }

    /// Concatenates feature streams column-wise; frame counts must agree.
    pub fn hstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix, FeatureError> {
        let first = parts
            .first()
            .ok_or_else(|| FeatureError::Config("nothing to stack".into()))?;
        let frames = first.frames();
        for p in parts {
            if p.frames() != frames {
                return Err(FeatureError::FrameMismatch(frames, p.frames()));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(Axis(1), &views).expect("frame counts checked");
        Ok(first.derived(values))
    }

    /// Applies `x -> x * transform^T`, i.e. projects each frame through a (out x in) matrix.
    pub fn project(&self, transform: &Array2<f64>) -> Result<FeatureMatrix, FeatureError> {
        if transform.ncols() != self.dims() {
            return Err(FeatureError::DimMismatch {
                expected: transform.ncols(),
                got: self.dims(),
            });
        }
        Ok(self.derived(self.values.dot(&transform.t())))
    }
}

/// Per-utterance cepstral mean normalization.
pub fn apply_cmn(fm: &FeatureMatrix) -> FeatureMatrix {
    if fm.frames() == 0 {
        return fm.clone();
    }
    let mean = fm.values.mean_axis(Axis(0)).expect("nonempty");
    let mut out = fm.values.clone();
    for mut row in out.rows_mut() {
        row -= &mean;
    }
    fm.derived(out)
}

const DELTA_WINDOW: usize = 2;

fn delta_block(x: &Array2<f64>) -> Array2<f64> {
    let (t_len, dims) = x.dim();
    let mut out = Array2::zeros((t_len, dims));
    if t_len == 0 {
        return out;
    }
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    for t in 0..t_len as isize {
        for n in 1..=DELTA_WINDOW as isize {
            let fwd = (t + n).min(last) as usize;
            let back = (t - n).max(0) as usize;
            for d in 0..dims {
                out[[t as usize, d]] += n as f64 * (x[[fwd, d]] - x[[back, d]]);
            }
        }
    }
    out /= denom;
    out
}

/// Appends regression deltas (window +-2, boundary frames replicated) up to `order`.
pub fn append_deltas(fm: &FeatureMatrix, order: usize) -> Result<FeatureMatrix, FeatureError> {
    if !(1..=2).contains(&order) {
        return Err(FeatureError::DeltaOrder(order));
    }
    let mut blocks = vec![fm.values.clone()];
    for _ in 0..order {
        let next = delta_block(blocks.last().expect("nonempty"));
        blocks.push(next);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(fm.derived(ndarray::concatenate(Axis(1), &views).expect("same frames")))
}

/// Stacks frames t-left..=t+right (indices clamped to the utterance) into one row.
pub fn splice_frames(fm: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let (t_len, dims) = fm.values.dim();
    let width = left + right + 1;
    let mut out = Array2::zeros((t_len, dims * width));
    if t_len == 0 {
        return fm.derived(out);
    }
    let last = t_len as isize - 1;
    for t in 0..t_len as isize {
        for (k, off) in (-(left as isize)..=right as isize).enumerate() {
            let src = (t + off).clamp(0, last) as usize;
            out.slice_mut(s![t as usize, k * dims..(k + 1) * dims])
                .assign(&fm.values.row(src));
        }
    }
    fm.derived(out)
}

/// Network input: hires MFCC, pitch and the utterance i-vector repeated on every frame.
pub fn assemble_nnet_input(
    mfcc_hires: &FeatureMatrix,
    pitch: &FeatureMatrix,
    ivector: &[f64],
) -> Result<FeatureMatrix, FeatureError> {
    if mfcc_hires.frames() != pitch.frames() {
        return Err(FeatureError::FrameMismatch(
            mfcc_hires.frames(),
            pitch.frames(),
        ));
    }
    let frames = mfcc_hires.frames();
    let ivec = Array2::from_shape_fn((frames, ivector.len()), |(_, j)| ivector[j]);
    let ivec = mfcc_hires.derived(ivec);
    FeatureMatrix::hstack(&[mfcc_hires, pitch, &ivec])
}
