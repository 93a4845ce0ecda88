use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{append_deltas, FeatureError, FeatureMatrix};
use crate::audio::AudioBuffer;

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub num_ceps: usize,
    pub num_mel_bins: usize,
    pub low_freq: f64,
    /// Upper filterbank edge; `None` means the Nyquist frequency.
    pub high_freq: Option<f64>,
    /// Replace c0 with the log frame energy.
    pub use_energy: bool,
    /// Append delta and delta-delta blocks (13 -> 39 dims).
    pub hires: bool,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemph: f64,
    pub cepstral_lifter: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_ceps: 13,
            num_mel_bins: 23,
            low_freq: 20.0,
            high_freq: None,
            use_energy: true,
            hires: false,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemph: 0.97,
            cepstral_lifter: 22.0,
        }
    }
}

impl MfccConfig {
    pub fn hires() -> Self {
        Self {
            hires: true,
            ..Self::default()
        }
    }

    pub fn output_dims(&self) -> usize {
        if self.hires {
            self.num_ceps * 3
        } else {
            self.num_ceps
        }
    }
}

/// Frame length and shift in samples for a given rate.
pub(crate) fn frame_geometry(rate: u32, length_ms: f64, shift_ms: f64) -> (usize, usize) {
    let len = (rate as f64 * length_ms / 1000.0).round() as usize;
    let shift = (rate as f64 * shift_ms / 1000.0).round() as usize;
    (len.max(1), shift.max(1))
}

pub(crate) fn num_frames(samples: usize, frame_len: usize, frame_shift: usize) -> usize {
    if samples < frame_len {
        0
    } else {
        1 + (samples - frame_len) / frame_shift
    }
}

/// Triangular mel filterbank over an FFT power spectrum.
#[derive(Clone)]
pub struct MelFilterbank {
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    fft_size: usize,
    frame_len: usize,
    frame_shift: usize,
    sample_rate: u32,
    preemph: f64,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for MelFilterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFilterbank")
            .field("centers_hz", &self.centers_hz)
            .field("fft_size", &self.fft_size)
            .field("frame_len", &self.frame_len)
            .field("frame_shift", &self.frame_shift)
            .finish()
    }
}

impl MelFilterbank {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        let nyquist = sample_rate as f64 / 2.0;
        let high = cfg.high_freq.unwrap_or(nyquist);
        if !(cfg.low_freq >= 0.0 && cfg.low_freq < high && high <= nyquist) {
            return Err(FeatureError::Config(format!(
                "need 0 <= low_freq ({}) < high_freq ({}) <= nyquist ({})",
                cfg.low_freq, high, nyquist
            )));
        }
        if cfg.num_ceps == 0 || cfg.num_ceps > cfg.num_mel_bins {
            return Err(FeatureError::Config(format!(
                "num_ceps ({}) must be in 1..=num_mel_bins ({})",
                cfg.num_ceps, cfg.num_mel_bins
            )));
        }
        let (frame_len, frame_shift) =
            frame_geometry(sample_rate, cfg.frame_length_ms, cfg.frame_shift_ms);
        let fft_size = frame_len.next_power_of_two();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mel_lo = hz_to_mel(cfg.low_freq);
        let mel_hi = hz_to_mel(high);
        let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
        let mut filters = Vec::with_capacity(cfg.num_mel_bins);
        let mut centers_hz = Vec::with_capacity(cfg.num_mel_bins);
        for m in 0..cfg.num_mel_bins {
            let left = mel_lo + m as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=fft_size / 2 {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel < right {
                    if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    }
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        let window = (0..frame_len)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len as f64 - 1.0).max(1.0)).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            filters,
            centers_hz,
            fft_size,
            frame_len,
            frame_shift,
            sample_rate,
            preemph: cfg.preemph,
            fft,
            window,
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn num_bins(&self) -> usize {
        self.filters.len()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    /// Returns (log mel energies, log raw frame energies) per frame.
    pub fn log_energies(&self, buf: &AudioBuffer) -> Result<(Array2<f64>, Vec<f64>), FeatureError> {
        let samples = buf.samples();
        let frames = num_frames(samples.len(), self.frame_len, self.frame_shift);
        if frames == 0 {
            return Err(FeatureError::TooShort {
                samples: samples.len(),
                frame_len: self.frame_len,
            });
        }
        let mut out = Array2::zeros((frames, self.filters.len()));
        let mut energies = Vec::with_capacity(frames);
        let mut frame = vec![0.0f64; self.frame_len];
        let mut spec = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut power = vec![0.0f64; self.fft_size / 2 + 1];
        for t in 0..frames {
            let start = t * self.frame_shift;
            for (i, v) in frame.iter_mut().enumerate() {
                *v = samples[start + i] as f64;
            }
            let mean = frame.iter().sum::<f64>() / self.frame_len as f64;
            frame.iter_mut().for_each(|v| *v -= mean);
            let energy: f64 = frame.iter().map(|v| v * v).sum();
            energies.push(energy.max(f64::MIN_POSITIVE).ln());
            for i in (1..self.frame_len).rev() {
                frame[i] -= self.preemph * frame[i - 1];
            }
            frame[0] -= self.preemph * frame[0];
            for c in spec.iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            for i in 0..self.frame_len {
                spec[i].re = frame[i] * self.window[i];
            }
            self.fft.process(&mut spec);
            for (k, p) in power.iter_mut().enumerate() {
                *p = spec[k].norm_sqr();
            }
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                let e: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * power[first + j])
                    .sum();
                out[[t, m]] = e.max(f64::EPSILON).ln();
            }
        }
        Ok((out, energies))
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// MFCCs: pre-emphasis, Hamming window, FFT power spectrum, mel filterbank, log,
/// orthonormal DCT-II and sinusoidal liftering. `hires` appends deltas and delta-deltas.
pub fn compute_mfcc(buf: &AudioBuffer, cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    let bank = MelFilterbank::new(cfg, buf.sample_rate())?;
    let (log_mel, log_energy) = bank.log_energies(buf)?;
    let bins = bank.num_bins();
    let frames = log_mel.nrows();
    let dct = Array2::from_shape_fn((cfg.num_ceps, bins), |(k, m)| {
        let scale = if k == 0 {
            (1.0 / bins as f64).sqrt()
        } else {
            (2.0 / bins as f64).sqrt()
        };
        scale * (PI * k as f64 * (m as f64 + 0.5) / bins as f64).cos()
    });
    let mut ceps = log_mel.dot(&dct.t());
    if cfg.cepstral_lifter > 0.0 {
        let q = cfg.cepstral_lifter;
        for k in 0..cfg.num_ceps {
            let lift = 1.0 + 0.5 * q * (PI * k as f64 / q).sin();
            ceps.column_mut(k).mapv_inplace(|v| v * lift);
        }
    }
    if cfg.use_energy {
        for t in 0..frames {
            ceps[[t, 0]] = log_energy[t];
        }
    }
    let fm = FeatureMatrix::with_geometry(ceps, cfg.frame_shift_ms, cfg.frame_length_ms)?;
    if cfg.hires {
        append_deltas(&fm, 2)
    } else {
        Ok(fm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, len: usize, amp: f64) -> AudioBuffer {
        let s = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    #[test]
    fn frame_count_formula() {
        let buf = tone(440.0, 8000, 400, 0.3);
        let fm = compute_mfcc(&buf, &MfccConfig::default()).unwrap();
        assert_eq!(fm.frames(), 3);
        assert_eq!(fm.dims(), 13);
        let hi = compute_mfcc(&buf, &MfccConfig::hires()).unwrap();
        assert_eq!(hi.dims(), 39);
    }

    #[test]
    fn too_short_is_error() {
        let buf = tone(440.0, 8000, 199, 0.3);
        assert!(matches!(
            compute_mfcc(&buf, &MfccConfig::default()),
            Err(FeatureError::TooShort { .. })
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let buf = tone(440.0, 8000, 800, 0.3);
        let cfg = MfccConfig {
            high_freq: Some(5000.0),
            ..MfccConfig::default()
        };
        assert!(compute_mfcc(&buf, &cfg).is_err());
        let cfg = MfccConfig {
            num_ceps: 30,
            ..MfccConfig::default()
        };
        assert!(compute_mfcc(&buf, &cfg).is_err());
    }

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 100.0, 1000.0, 3999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 1127.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let buf = tone(523.0, 8000, 4000, 0.4);
        let a = compute_mfcc(&buf, &MfccConfig::hires()).unwrap();
        let b = compute_mfcc(&buf, &MfccConfig::hires()).unwrap();
        assert_eq!(a, b);
    }
}
