use ndarray::Array2;

use super::mfcc::{frame_geometry, num_frames};
use super::{FeatureError, FeatureMatrix};
use crate::audio::AudioBuffer;

/// Normalized-autocorrelation pitch tracker settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchConfig {
    pub min_f0: f64,
    pub max_f0: f64,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    /// Cost per unit of |log lag ratio| between consecutive frames.
    pub transition_weight: f64,
    /// Cost per unit of log(lag / min_lag); breaks ties toward the fundamental.
    pub octave_bias: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            min_f0: 60.0,
            max_f0: 400.0,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            transition_weight: 0.5,
            octave_bias: 0.1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Voicing probability from the correlation peak.
fn pov_from_nccf(r: f64) -> f64 {
    sigmoid(10.0 * (r - 0.5))
}

fn nccf_frame(x: &[f64], start: usize, window: usize, lags: &[usize], out: &mut [f64]) {
    let at = |i: usize| x.get(i).copied().unwrap_or(0.0);
    let e0: f64 = (start..start + window).map(|i| at(i) * at(i)).sum();
    for (slot, &lag) in out.iter_mut().zip(lags) {
        let mut cross = 0.0;
        let mut e1 = 0.0;
        for i in start..start + window {
            let a = at(i);
            let b = at(i + lag);
            cross += a * b;
            e1 += b * b;
        }
        let denom = (e0 * e1).sqrt();
        *slot = if denom > 0.0 { cross / denom } else { 0.0 };
    }
}

/// Per-frame pitch features: `[pov, log-f0, delta-log-f0]`, plus the raw correlation
/// peak as a fourth column when `num_feats == 4`. Framing matches [`super::compute_mfcc`].
pub fn compute_pitch(
    buf: &AudioBuffer,
    num_feats: usize,
    cfg: &PitchConfig,
) -> Result<FeatureMatrix, FeatureError> {
    if num_feats != 3 && num_feats != 4 {
        return Err(FeatureError::PitchFeatureCount(num_feats));
    }
    if !(cfg.min_f0 > 0.0 && cfg.min_f0 < cfg.max_f0) {
        return Err(FeatureError::Config("need 0 < min_f0 < max_f0".into()));
    }
    let rate = buf.sample_rate() as f64;
    let (frame_len, frame_shift) =
        frame_geometry(buf.sample_rate(), cfg.frame_length_ms, cfg.frame_shift_ms);
    let frames = num_frames(buf.len(), frame_len, frame_shift);
    if frames == 0 {
        return Err(FeatureError::TooShort {
            samples: buf.len(),
            frame_len,
        });
    }
    let min_lag = ((rate / cfg.max_f0).ceil() as usize).max(2);
    let max_lag = ((rate / cfg.min_f0).floor() as usize).max(min_lag + 2);
    let lags: Vec<usize> = (min_lag..=max_lag).collect();
    let n_lags = lags.len();

    let mean = buf.samples().iter().map(|&s| s as f64).sum::<f64>() / buf.len() as f64;
    let x: Vec<f64> = buf.samples().iter().map(|&s| s as f64 - mean).collect();

    let mut nccf = Array2::<f64>::zeros((frames, n_lags));
    let mut row = vec![0.0; n_lags];
    for t in 0..frames {
        nccf_frame(&x, t * frame_shift, frame_len, &lags, &mut row);
        nccf.row_mut(t).assign(&ndarray::ArrayView1::from(&row[..]));
    }

    let log_lag: Vec<f64> = lags.iter().map(|&l| (l as f64).ln()).collect();
    let local =
        |t: usize, j: usize| 1.0 - nccf[[t, j]] + cfg.octave_bias * (log_lag[j] - log_lag[0]);
    // Viterbi over lag states
    let mut cost: Vec<f64> = (0..n_lags).map(|j| local(0, j)).collect();
    let mut back = vec![vec![0usize; n_lags]; frames];
    let mut next = vec![0.0; n_lags];
    for t in 1..frames {
        for j in 0..n_lags {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for i in 0..n_lags {
                let c = cost[i] + cfg.transition_weight * (log_lag[j] - log_lag[i]).abs();
                if c < best {
                    best = c;
                    arg = i;
                }
            }
            next[j] = best + local(t, j);
            back[t][j] = arg;
        }
        std::mem::swap(&mut cost, &mut next);
    }
    let mut state = (0..n_lags)
        .min_by(|&a, &b| cost[a].total_cmp(&cost[b]))
        .expect("nonempty lag range");
    let mut path = vec![0usize; frames];
    for t in (0..frames).rev() {
        path[t] = state;
        state = back[t][state];
    }

    let mut out = Array2::zeros((frames, num_feats));
    let mut log_f0 = vec![0.0; frames];
    for t in 0..frames {
        let j = path[t];
        let r = nccf[[t, j]];
        let mut lag = lags[j] as f64;
        if j > 0 && j + 1 < n_lags {
            let (a, b, c) = (nccf[[t, j - 1]], r, nccf[[t, j + 1]]);
            let curv = a - 2.0 * b + c;
            if curv < 0.0 {
                lag += (0.5 * (a - c) / curv).clamp(-0.5, 0.5);
            }
        }
        log_f0[t] = (rate / lag).ln();
        out[[t, 0]] = pov_from_nccf(r);
        out[[t, 1]] = log_f0[t];
        if num_feats == 4 {
            out[[t, 3]] = r;
        }
    }
    let last = frames as isize - 1;
    for t in 0..frames as isize {
        let mut d = 0.0;
        for n in 1..=2isize {
            let f = (t + n).min(last) as usize;
            let b = (t - n).max(0) as usize;
            d += n as f64 * (log_f0[f] - log_f0[b]);
        }
        out[[t as usize, 2]] = d / 10.0;
    }
    FeatureMatrix::with_geometry(out, cfg.frame_shift_ms, cfg.frame_length_ms)
}
