use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{softmax_ce_grad, Network, NnetError};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Chunks per minibatch.
    pub minibatch: usize,
    /// Kept for configuration fidelity; the cross-entropy objective does not use it.
    pub xent_regularization: f64,
    /// Chunk lengths for the first, second and last third of each epoch's utterances.
    pub frames_per_example: Vec<usize>,
    pub dropout_peak: f64,
    /// Training progress at which dropout switches on.
    pub dropout_start: f64,
    /// Minibatches between log records.
    pub minibatches_per_iter: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr_initial: 0.001,
            lr_final: 0.0001,
            minibatch: 128,
            xent_regularization: 0.1,
            frames_per_example: vec![150, 110, 90],
            dropout_peak: 0.3,
            dropout_start: 0.5,
            minibatches_per_iter: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: &str| Err(NnetError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite())
        {
            return bad("need 0 < lr_final <= lr_initial");
        }
        if self.minibatch == 0 || self.minibatches_per_iter == 0 {
            return bad("minibatch and minibatches_per_iter must be at least 1");
        }
        if self.frames_per_example.is_empty() || self.frames_per_example.contains(&0) {
            return bad("frames_per_example must be nonempty and positive");
        }
        if !(0.0..1.0).contains(&self.dropout_peak) || !(0.0..=1.0).contains(&self.dropout_start) {
            return bad("dropout_peak must be in [0, 1) and dropout_start in [0, 1]");
        }
        Ok(())
    }
}

/// Geometric interpolation from lr_initial to lr_final.
pub fn lr_schedule(cfg: &TrainConfig, progress: f64) -> Result<f64, NnetError> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(NnetError::Progress(progress));
    }
    Ok(cfg.lr_initial * (cfg.lr_final / cfg.lr_initial).powf(progress))
}

/// Hidden-layer dropout rate: zero, then the peak from `dropout_start` on. The output layer
/// never gets dropout.
pub fn dropout_schedule(cfg: &TrainConfig, progress: f64) -> f64 {
    if progress >= cfg.dropout_start {
        cfg.dropout_peak
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub train_logprob: f64,
    pub valid_logprob: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,train_logprob,valid_logprob,wall_ms\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.3}",
                r.iter, r.train_logprob, r.valid_logprob, r.wall_ms
            );
        }
        out
    }

    pub fn median_wall_ms(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.wall_ms).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }
}

/// (utterance, start frame, length) chunks for one epoch: utterances are shuffled and
/// split into thirds, each third cut into non-overlapping chunks of its length. Utterances
/// shorter than the chunk length form a single chunk. The chunk list is then shuffled.
pub fn make_chunks(
    lengths: &[usize],
    frames_per_example: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let parts = frames_per_example.len();
    let mut chunks = Vec::new();
    for (pos, &u) in order.iter().enumerate() {
        let len = frames_per_example[pos * parts / order.len().max(1)];
        let total = lengths[u];
        let mut start = 0;
        while start < total {
            let n = len.min(total - start);
            chunks.push((u, start, n));
            start += n;
        }
    }
    chunks.shuffle(rng);
    chunks
}

fn mean_log_prob(net: &Network, data: &[(&FeatureMatrix, &[usize])]) -> Result<f64, NnetError> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for (fm, targets) in data {
        let lp = net.log_posteriors(fm.view())?;
        total += targets
            .iter()
            .enumerate()
            .map(|(t, &y)| lp[[t, y]])
            .sum::<f64>();
        frames += targets.len();
    }
    Ok(if frames == 0 {
        0.0
    } else {
        total / frames as f64
    })
}

fn check_set(net: &Network, data: &[(&FeatureMatrix, &[usize])]) -> Result<(), NnetError> {
    for (fm, targets) in data {
        net.check_input(fm.view())?;
        net.check_targets(fm.frames(), targets)?;
    }
    Ok(())
}

/// Minibatch SGD on mean frame cross-entropy. Each layer moves by
/// lr_schedule(progress) * lr_multiplier; multiplier-0 layers are untouched and gradients
/// are not propagated below the first trainable layer.
pub fn train_sgd(
    mut net: Network,
    train: &[(&FeatureMatrix, &[usize])],
    valid: &[(&FeatureMatrix, &[usize])],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog), NnetError> {
    cfg.validate()?;
    if train.is_empty() || train.iter().all(|(fm, _)| fm.frames() == 0) {
        return Err(NnetError::EmptyTrainSet);
    }
    check_set(&net, train)?;
    check_set(&net, valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train.iter().map(|(fm, _)| fm.frames()).collect();
    let mut minibatches: Vec<Vec<(usize, usize, usize)>> = Vec::new();
    for _ in 0..cfg.epochs {
        let chunks = make_chunks(&lengths, &cfg.frames_per_example, &mut rng);
        minibatches.extend(chunks.chunks(cfg.minibatch).map(|c| c.to_vec()));
    }
    let total = minibatches.len();
    let stop = net.first_trainable();
    let mut log = TrainLog::default();
    let mut iter_lp = 0.0;
    let mut iter_frames = 0usize;
    let mut iter_ms = 0.0;
    for (mb_index, batch) in minibatches.iter().enumerate() {
        let started = Instant::now();
        let progress = mb_index as f64 / total as f64;
        let lr = lr_schedule(cfg, progress)?;
        let dropout = dropout_schedule(cfg, progress);
        let frames: usize = batch.iter().map(|c| c.2).sum();
        let scale = 1.0 / frames as f64;
        let keep_from = stop.unwrap_or(net.layers.len());
        let mut grads = net.zero_gradients(keep_from);
        for &(u, start, len) in batch {
            let (fm, targets) = train[u];
            let x = fm.values().slice(s![start..start + len, ..]);
            let y = &targets[start..start + len];
            let trace = net.forward_trace(x, Some((dropout, &mut rng)), keep_from);
            iter_lp += y
                .iter()
                .enumerate()
                .map(|(t, &c)| trace.log_probs[[t, c]])
                .sum::<f64>();
            if let Some(stop) = stop {
                let d = softmax_ce_grad(&trace.log_probs, y, scale);
                net.backward_trace(&trace, d, stop, &mut grads);
            }
        }
        iter_frames += frames;
        if let Some(stop) = stop {
            for (layer, g) in net.layers[stop..].iter_mut().zip(&grads.0[stop..]) {
                let step = lr * layer.lr_multiplier;
                if step == 0.0 {
                    continue;
                }
                for (p, gp) in layer.params.iter_mut().zip(g) {
                    p.scaled_add(-step, gp);
                }
            }
        }
        iter_ms += started.elapsed().as_secs_f64() * 1000.0;
        if (mb_index + 1) % cfg.minibatches_per_iter == 0 || mb_index + 1 == total {
            log.records.push(IterRecord {
                iter: log.records.len() + 1,
                train_logprob: iter_lp / iter_frames as f64,
                valid_logprob: mean_log_prob(&net, valid)?,
                wall_ms: iter_ms,
            });
            iter_lp = 0.0;
            iter_frames = 0;
            iter_ms = 0.0;
        }
    }
    Ok((net, log))
}

/// Posterior-weighted accuracy helper for tests and reports: fraction of frames whose
/// argmax matches the target.
pub fn frame_accuracy(log_probs: &Array2<f64>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(t, &y)| {
            let row = log_probs.row(t);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / targets.len() as f64
}
