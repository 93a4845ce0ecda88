//! Audio ingestion, band-limited resampling and the speed/volume augmentations.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad RIFF/WAVE header: {0}")]
    BadHeader(String),
    #[error("truncated wav data: {0}")]
    Truncated(String),
    #[error("unsupported wav encoding (format tag {0}), only PCM is accepted")]
    NonPcm(u16),
    #[error("unsupported bit depth {0}, expected 8 or 16")]
    UnsupportedBitDepth(u16),
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("speed factor {0} outside (0.5, 2.0)")]
    SpeedFactor(f64),
    #[error("gain must be positive and finite, got {0}")]
    Gain(f64),
    #[error("sample {index} is not finite or exceeds unit amplitude: {value}")]
    BadSample { index: usize, value: f32 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

/// Mono PCM samples in [-1, 1] with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::BadSample { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a buffer clamping every sample into [-1, 1]; non-finite samples become 0.
    pub fn from_clamped(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        let samples = samples
            .into_iter()
            .map(|s| {
                if s.is_finite() {
                    s.clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads an 8- or 16-bit PCM RIFF/WAVE file. Stereo input is averaged down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            AudioError::FileNotFound(path.to_path_buf())
        } else {
            AudioError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::Truncated(
            "file shorter than RIFF header".into(),
        ));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::BadHeader("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(AudioError::Truncated("fmt chunk".into()));
            }
            let tag = read_u16(bytes, body);
            let channels = read_u16(bytes, body + 2);
            let rate = read_u32(bytes, body + 4);
            let bits = read_u16(bytes, body + 14);
            // WAVE_FORMAT_EXTENSIBLE carries the real tag in the sub-format GUID
            let tag = if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                read_u16(bytes, body + 24)
            } else {
                tag
            };
            fmt = Some((tag, channels, rate, bits));
        } else if id == b"data" {
            let (tag, channels, rate, bits) =
                fmt.ok_or_else(|| AudioError::BadHeader("data chunk before fmt chunk".into()))?;
            if tag != 1 {
                return Err(AudioError::NonPcm(tag));
            }
            if bits != 8 && bits != 16 {
                return Err(AudioError::UnsupportedBitDepth(bits));
            }
            if channels == 0 {
                return Err(AudioError::BadHeader("zero channels".into()));
            }
            if rate == 0 {
                return Err(AudioError::ZeroRate);
            }
            if body + size > bytes.len() {
                return Err(AudioError::Truncated(format!(
                    "data chunk declares {} bytes, {} present",
                    size,
                    bytes.len() - body
                )));
            }
            return Ok(decode_pcm(
                &bytes[body..body + size],
                channels as usize,
                bits,
                rate,
            ));
        }
        pos = body + size + (size & 1);
    }
    if fmt.is_none() {
        Err(AudioError::Truncated("no fmt chunk".into()))
    } else {
        Err(AudioError::Truncated("no data chunk".into()))
    }
}

fn decode_pcm(data: &[u8], channels: usize, bits: u16, rate: u32) -> AudioBuffer {
    let width = (bits / 8) as usize;
    let frame = width * channels;
    let frames = data.len() / frame;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for c in 0..channels {
            let at = f * frame + c * width;
            let v = if bits == 8 {
                (data[at] as f64 - 128.0) / 128.0
            } else {
                i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0
            };
            acc += v;
        }
        samples.push((acc / channels as f64) as f32);
    }
    AudioBuffer {
        samples,
        sample_rate: rate,
    }
}

/// Encodes as 16-bit mono PCM.
pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = buf.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buf.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    fs::write(path, encode_wav(buf)).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Zero crossings of the interpolation kernel on each side of the centre tap.
const KERNEL_HALF_ZEROS: f64 = 16.0;
const KAISER_BETA: f64 = 6.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const TABLE_PER_ZERO: usize = 1024;

/// Kaiser-windowed sinc sampled on `u` in [0, KERNEL_HALF_ZEROS], `u` in units of zero crossings.
fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = KERNEL_HALF_ZEROS as usize * TABLE_PER_ZERO + 2;
        let i0_beta = bessel_i0(KAISER_BETA);
        (0..n)
            .map(|i| {
                let u = i as f64 / TABLE_PER_ZERO as f64;
                if u >= KERNEL_HALF_ZEROS {
                    return 0.0;
                }
                let arg = PI * u;
                let sinc = if u == 0.0 { 1.0 } else { arg.sin() / arg };
                let r = u / KERNEL_HALF_ZEROS;
                sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
            })
            .collect()
    })
}

fn kernel_at(table: &[f64], u: f64) -> f64 {
    let pos = u.abs() * TABLE_PER_ZERO as f64;
    let i = pos as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - i as f64;
    table[i] * (1.0 - frac) + table[i + 1] * frac
}

/// Resamples `samples` so that input sample spacing 1 maps to output spacing `ratio`
/// (output rate / input rate), producing `out_len` samples.
fn resample_ratio(samples: &[f32], ratio: f64, out_len: usize) -> Vec<f32> {
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half_width = KERNEL_HALF_ZEROS / cutoff;
    let table = kernel_table();
    let n = samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let lo = (center - half_width).ceil() as isize;
        let hi = (center + half_width).floor() as isize;
        let mut acc = 0.0f64;
        for i in lo.max(0)..=hi.min(n - 1) {
            let x = i as f64 - center;
            acc += samples[i as usize] as f64 * kernel_at(table, cutoff * x);
        }
        out.push((acc * cutoff).clamp(-1.0, 1.0) as f32);
    }
    out
}

/// Windowed-sinc (Kaiser) resampling to `target_rate`.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::ZeroRate);
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let ratio = target_rate as f64 / buf.sample_rate as f64;
    let out_len = (buf.samples.len() as f64 * ratio).round() as usize;
    Ok(AudioBuffer {
        samples: resample_ratio(&buf.samples, ratio, out_len),
        sample_rate: target_rate,
    })
}

/// Speed perturbation: resample by 1/factor and keep the original rate label, so
/// duration scales by 1/factor and pitch shifts with it.
pub fn speed_perturb(buf: &AudioBuffer, factor: f64) -> Result<AudioBuffer, AudioError> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(AudioError::SpeedFactor(factor));
    }
    if factor == 1.0 {
        return Ok(buf.clone());
    }
    let ratio = 1.0 / factor;
    let out_len = (buf.samples.len() as f64 * ratio).round() as usize;
    Ok(AudioBuffer {
        samples: resample_ratio(&buf.samples, ratio, out_len),
        sample_rate: buf.sample_rate,
    })
}

/// Scales by `gain` and clamps to [-1, 1]. Returns the buffer and the number of clamped samples.
pub fn volume_perturb(buf: &AudioBuffer, gain: f64) -> Result<(AudioBuffer, usize), AudioError> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(AudioError::Gain(gain));
    }
    let mut clamped = 0;
    let samples = buf
        .samples
        .iter()
        .map(|&s| {
            let v = s as f64 * gain;
            if v.abs() > 1.0 {
                clamped += 1;
                v.signum() as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok((
        AudioBuffer {
            samples,
            sample_rate: buf.sample_rate,
        },
        clamped,
    ))
}

/// Range for randomly drawn augmentation gains.
pub const VOLUME_GAIN_RANGE: (f64, f64) = (0.125, 2.0);

/// Default speed perturbation factors (90%, 100%, 110%).
pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: PathBuf,
    pub speaker_id: String,
    pub transcript: String,
}

/// Parses `utt-id<TAB>wav-path<TAB>speaker-id<TAB>transcript` lines. Blank lines are skipped.
/// Relative wav paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestEntry>, AudioError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(AudioError::Manifest {
                line: i + 1,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(AudioError::Manifest {
                line: i + 1,
                msg: "empty utterance id".into(),
            });
        }
        let mut wav_path = PathBuf::from(fields[1]);
        if let Some(base) = base {
            if wav_path.is_relative() {
                wav_path = base.join(wav_path);
            }
        }
        out.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            wav_path,
            speaker_id: fields[2].to_string(),
            transcript: fields[3].trim_end().to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, AudioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            AudioError::FileNotFound(path.to_path_buf())
        } else {
            AudioError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    parse_manifest(&text, path.parent())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for e in entries {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            e.utt_id,
            e.wav_path.display(),
            e.speaker_id,
            e.transcript
        )
        .map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}
