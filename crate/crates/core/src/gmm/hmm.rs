use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use super::diag::{variance_floor, DiagGmm};
use super::GmmError;
use crate::binio::{BinError, BinReader, BinWriter};
use crate::features::FeatureMatrix;

pub const STATES_PER_PHONE: usize = 3;

/// Probabilities are kept inside [floor, 1 - floor] so no transition is ever impossible.
const TRANSITION_FLOOR: f64 = 0.01;

/// Monophone HMM set: one 3-state left-to-right HMM per phone, each state with its own
/// diagonal GMM. The pdf-id of (phone, state) is `3 * phone + state`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModelGmm {
    phones: Vec<String>,
    gmms: Vec<DiagGmm>,
    /// Per pdf: (log self-loop, log forward).
    transitions: Vec<(f64, f64)>,
}

impl AcousticModelGmm {
    pub fn new(
        phones: Vec<String>,
        gmms: Vec<DiagGmm>,
        transitions: Vec<(f64, f64)>,
    ) -> Result<Self, GmmError> {
        let n = phones.len() * STATES_PER_PHONE;
        if phones.is_empty() || gmms.len() != n || transitions.len() != n {
            return Err(GmmError::Shape(format!(
                "{} phones need {} pdfs, got {} gmms and {} transitions",
                phones.len(),
                n,
                gmms.len(),
                transitions.len()
            )));
        }
        let dim = gmms[0].dim();
        if gmms.iter().any(|g| g.dim() != dim) {
            return Err(GmmError::Shape("pdfs disagree on feature dim".into()));
        }
        for &(s, f) in &transitions {
            if (s.exp() + f.exp() - 1.0).abs() > 1e-9 {
                return Err(GmmError::Shape(
                    "transition probabilities must sum to 1".into(),
                ));
            }
        }
        Ok(Self {
            phones,
            gmms,
            transitions,
        })
    }

    /// Every pdf a single Gaussian at `mean`/`var`, transitions 0.5/0.5.
    pub fn flat(
        phones: Vec<String>,
        mean: Array1<f64>,
        var: Array1<f64>,
    ) -> Result<Self, GmmError> {
        let n = phones.len() * STATES_PER_PHONE;
        let g = DiagGmm::new(
            Array1::ones(1),
            mean.insert_axis(Axis(0)),
            var.insert_axis(Axis(0)),
        )?;
        let half = 0.5f64.ln();
        Self::new(phones, vec![g; n], vec![(half, half); n])
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn num_phones(&self) -> usize {
        self.phones.len()
    }

    pub fn num_pdfs(&self) -> usize {
        self.gmms.len()
    }

    pub fn dim(&self) -> usize {
        self.gmms[0].dim()
    }

    pub fn pdf_id(phone: usize, state: usize) -> usize {
        phone * STATES_PER_PHONE + state
    }

    pub fn phone_index(&self, name: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == name)
    }

    pub fn gmm(&self, pdf: usize) -> &DiagGmm {
        &self.gmms[pdf]
    }

    pub fn gmms(&self) -> &[DiagGmm] {
        &self.gmms
    }

    pub fn transition(&self, pdf: usize) -> (f64, f64) {
        self.transitions[pdf]
    }

    pub fn transitions(&self) -> &[(f64, f64)] {
        &self.transitions
    }

    pub fn total_gaussians(&self) -> usize {
        self.gmms.iter().map(|g| g.num_components()).sum()
    }

    /// Frames x pdfs matrix of emission log-likelihoods.
    pub fn log_likelihoods(&self, fm: &FeatureMatrix) -> Result<Array2<f64>, GmmError> {
        if fm.dims() != self.dim() {
            return Err(GmmError::DimMismatch {
                expected: self.dim(),
                got: fm.dims(),
            });
        }
        let mut out = Array2::zeros((fm.frames(), self.num_pdfs()));
        for (t, x) in fm.values().rows().into_iter().enumerate() {
            for (p, g) in self.gmms.iter().enumerate() {
                out[[t, p]] = g.log_likelihood(x);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(b"AMGM", 1);
        w.u32(self.phones.len() as u32);
        for p in &self.phones {
            w.str(p);
        }
        for (g, &(s, f)) in self.gmms.iter().zip(&self.transitions) {
            w.f64(s);
            w.f64(f);
            w.array1(g.weights());
            w.array2(g.means());
            w.array2(g.vars());
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, GmmError> {
        let mut r = BinReader::new(data, b"AMGM", 1)?;
        let n = r.u32("phone count")? as usize;
        let phones = (0..n)
            .map(|_| r.str("phone"))
            .collect::<Result<Vec<_>, _>>()?;
        let mut gmms = Vec::new();
        let mut transitions = Vec::new();
        for _ in 0..n * STATES_PER_PHONE {
            let s = r.f64("self loop")?;
            let f = r.f64("forward")?;
            let weights = r.array1("weights")?;
            let means = r.array2("means")?;
            let vars = r.array2("vars")?;
            transitions.push((s, f));
            gmms.push(DiagGmm::new(weights, means, vars)?);
        }
        r.finish()?;
        Self::new(phones, gmms, transitions)
    }
}

impl From<BinError> for GmmError {
    fn from(e: BinError) -> Self {
        GmmError::Format(e.to_string())
    }
}

/// One aligned frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedFrame {
    pub phone: usize,
    pub state: usize,
    pub pdf: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub utt_id: String,
    pub frames: Vec<AlignedFrame>,
    pub log_prob: f64,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Text dump, one `utt-id frame phone state pdf` line per frame.
    pub fn dump(&self, phones: &[String]) -> String {
        let mut out = String::new();
        for (t, f) in self.frames.iter().enumerate() {
            let name = phones.get(f.phone).map(String::as_str).unwrap_or("?");
            let _ = writeln!(out, "{} {} {} {} {}", self.utt_id, t, name, f.state, f.pdf);
        }
        out
    }

    /// Parses the text dump for one or more utterances, preserving first-seen order.
    pub fn parse_dump(text: &str, phones: &[String]) -> Result<Vec<Alignment>, GmmError> {
        let mut out: Vec<Alignment> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || GmmError::Format(format!("alignment line {}: `{line}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let phone = phones.iter().position(|p| p == f[2]).ok_or_else(bad)?;
            let state: usize = f[3].parse().map_err(|_| bad())?;
            let pdf: usize = f[4].parse().map_err(|_| bad())?;
            if out.last().map(|a| a.utt_id != f[0]).unwrap_or(true) {
                out.push(Alignment {
                    utt_id: f[0].to_string(),
                    frames: Vec::new(),
                    log_prob: 0.0,
                });
            }
            out.last_mut()
                .expect("pushed")
                .frames
                .push(AlignedFrame { phone, state, pdf });
        }
        Ok(out)
    }
}

/// Per-frame pdf-ids: the network's classification targets.
pub fn alignment_to_targets(al: &Alignment) -> Vec<usize> {
    al.frames.iter().map(|f| f.pdf).collect()
}

/// Best path through a linear left-to-right chain of `emit.ncols()` states over
/// `emit.nrows()` frames. The path starts in state 0, ends in the last state, and at each
/// frame either stays or advances one state. The score sums emissions, the transitions
/// taken, and the exit (forward) transition of the last state.
pub fn linear_viterbi(
    emit: &Array2<f64>,
    self_loop: &[f64],
    forward: &[f64],
) -> Option<(Vec<usize>, f64)> {
    let (frames, states) = emit.dim();
    if states == 0 || frames < states {
        return None;
    }
    let neg = f64::NEG_INFINITY;
    let mut score = vec![neg; states];
    let mut back = vec![0u8; frames * states];
    score[0] = emit[[0, 0]];
    for t in 1..frames {
        // states reachable at t and still able to finish by the last frame
        let lo = (states + t).saturating_sub(frames);
        let hi = t.min(states - 1);
        for s in (lo..=hi).rev() {
            let stay = score[s] + self_loop[s];
            let adv = if s > 0 {
                score[s - 1] + forward[s - 1]
            } else {
                neg
            };
            let (best, from) = if adv > stay { (adv, 1u8) } else { (stay, 0u8) };
            score[s] = best + emit[[t, s]];
            back[t * states + s] = from;
        }
        if lo > 0 {
            score[lo - 1] = neg;
        }
    }
    let total = score[states - 1] + forward[states - 1];
    if !total.is_finite() {
        return None;
    }
    let mut path = vec![0usize; frames];
    let mut s = states - 1;
    for t in (0..frames).rev() {
        path[t] = s;
        if t > 0 && back[t * states + s] == 1 {
            s -= 1;
        }
    }
    Some((path, total))
}

/// Forced alignment of `fm` to the phone sequence `phones`.
pub fn viterbi_align(
    am: &AcousticModelGmm,
    fm: &FeatureMatrix,
    phones: &[usize],
    utt_id: &str,
) -> Result<Alignment, GmmError> {
    let states = phones.len() * STATES_PER_PHONE;
    if phones.is_empty() || states > fm.frames() {
        return Err(GmmError::Infeasible {
            frames: fm.frames(),
            states,
        });
    }
    if fm.dims() != am.dim() {
        return Err(GmmError::DimMismatch {
            expected: am.dim(),
            got: fm.dims(),
        });
    }
    if let Some(&bad) = phones.iter().find(|&&p| p >= am.num_phones()) {
        return Err(GmmError::UnknownPhone(bad));
    }
    let pdfs: Vec<usize> = phones
        .iter()
        .flat_map(|&p| (0..STATES_PER_PHONE).map(move |s| AcousticModelGmm::pdf_id(p, s)))
        .collect();
    // emissions per distinct pdf, then scattered to chain positions
    let mut distinct: Vec<usize> = pdfs.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut ll = Array2::zeros((fm.frames(), distinct.len()));
    for (t, x) in fm.values().rows().into_iter().enumerate() {
        for (j, &p) in distinct.iter().enumerate() {
            ll[[t, j]] = am.gmm(p).log_likelihood(x);
        }
    }
    let col: Vec<usize> = pdfs
        .iter()
        .map(|p| distinct.binary_search(p).expect("present"))
        .collect();
    let emit = Array2::from_shape_fn((fm.frames(), states), |(t, s)| ll[[t, col[s]]]);
    let self_loop: Vec<f64> = pdfs.iter().map(|&p| am.transition(p).0).collect();
    let forward: Vec<f64> = pdfs.iter().map(|&p| am.transition(p).1).collect();
    let (path, log_prob) =
        linear_viterbi(&emit, &self_loop, &forward).ok_or(GmmError::Infeasible {
            frames: fm.frames(),
            states,
        })?;
    let frames = path
        .iter()
        .map(|&s| AlignedFrame {
            phone: phones[s / STATES_PER_PHONE],
            state: s % STATES_PER_PHONE,
            pdf: pdfs[s],
        })
        .collect();
    Ok(Alignment {
        utt_id: utt_id.to_string(),
        frames,
        log_prob,
    })
}

/// Training input: features plus the phone sequence from the lexicon expansion.
#[derive(Debug, Clone, Copy)]
pub struct TrainUtterance<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMatrix,
    pub phones: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonophoneConfig {
    pub num_passes: usize,
    /// Total Gaussian budget reached by the growth schedule.
    pub max_gaussians: usize,
    /// Fraction of passes over which the Gaussian count grows.
    pub growth_fraction: f64,
    pub em_iters_per_pass: usize,
    /// Frames required per Gaussian before a pdf may split.
    pub min_frames_per_gaussian: usize,
}

impl Default for MonophoneConfig {
    fn default() -> Self {
        Self {
            num_passes: 10,
            max_gaussians: 200,
            growth_fraction: 0.6,
            em_iters_per_pass: 2,
            min_frames_per_gaussian: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonophoneTraining {
    pub model: AcousticModelGmm,
    /// Total alignment log-probability of each pass.
    pub pass_log_probs: Vec<f64>,
    /// Ids of utterances with fewer frames than HMM states.
    pub skipped: Vec<String>,
    /// Final alignments, in input order, for the utterances that were not skipped.
    pub alignments: Vec<Alignment>,
}

fn uniform_alignment(u: &TrainUtterance<'_>) -> Alignment {
    let states = u.phones.len() * STATES_PER_PHONE;
    let frames = u.features.frames();
    let frames = (0..frames)
        .map(|t| {
            let s = t * states / frames;
            let phone = u.phones[s / STATES_PER_PHONE];
            let state = s % STATES_PER_PHONE;
            AlignedFrame {
                phone,
                state,
                pdf: AcousticModelGmm::pdf_id(phone, state),
            }
        })
        .collect();
    Alignment {
        utt_id: u.id.to_string(),
        frames,
        log_prob: f64::NEG_INFINITY,
    }
}

fn pooled(utts: &[TrainUtterance<'_>]) -> Array2<f64> {
    let views: Vec<_> = utts.iter().map(|u| u.features.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal dims")
}

/// Gaussians allotted to each pdf: proportional to occupancy^0.2, at least one,
/// limited by the frames available.
fn gaussian_targets(occ: &[usize], total: usize, min_frames: usize) -> Vec<usize> {
    let powered: Vec<f64> = occ.iter().map(|&o| (o as f64).powf(0.2)).collect();
    let sum: f64 = powered.iter().sum();
    occ.iter()
        .zip(&powered)
        .map(|(&o, &p)| {
            let want = if sum > 0.0 {
                (total as f64 * p / sum).round() as usize
            } else {
                1
            };
            want.clamp(1, (o / min_frames.max(1)).max(1))
        })
        .collect()
}

struct Trainer<'a, 'b> {
    utts: &'b [TrainUtterance<'a>],
    floor: Array1<f64>,
    cfg: &'b MonophoneConfig,
}

impl Trainer<'_, '_> {
    /// Re-estimates every pdf from the alignments. Each GMM is refined by EM starting at its
    /// current parameters (never lowering the likelihood of its frames); a split is kept only
    /// if it does not lower that likelihood either.
    fn reestimate(
        &self,
        model: &AcousticModelGmm,
        alignments: &[(usize, Alignment)],
        pass: usize,
        from_flat: bool,
    ) -> AcousticModelGmm {
        let num_pdfs = model.num_pdfs();
        let dim = model.dim();
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); num_pdfs];
        let mut self_counts = vec![0usize; num_pdfs];
        let mut fwd_counts = vec![0usize; num_pdfs];
        for (ui, al) in alignments {
            let fm = self.utts[*ui].features;
            for (t, f) in al.frames.iter().enumerate() {
                buckets[f.pdf].extend(fm.row(t).iter());
                let next = al.frames.get(t + 1);
                // adjacent chain positions never share a pdf, so equal pdfs mean a self-loop
                if next.map(|n| n.pdf == f.pdf).unwrap_or(false) {
                    self_counts[f.pdf] += 1;
                } else {
                    fwd_counts[f.pdf] += 1;
                }
            }
        }
        let occ: Vec<usize> = buckets.iter().map(|b| b.len() / dim.max(1)).collect();
        let growth_passes =
            ((self.cfg.num_passes as f64 * self.cfg.growth_fraction).ceil() as usize).max(1);
        let budget = num_pdfs
            + (self.cfg.max_gaussians.saturating_sub(num_pdfs)) * (pass + 1).min(growth_passes)
                / growth_passes;
        let targets = gaussian_targets(&occ, budget, self.cfg.min_frames_per_gaussian);

        let mut gmms = Vec::with_capacity(num_pdfs);
        let mut transitions = Vec::with_capacity(num_pdfs);
        for p in 0..num_pdfs {
            let old = model.gmm(p);
            if occ[p] == 0 {
                gmms.push(old.clone());
                transitions.push(model.transition(p));
                continue;
            }
            let data = Array2::from_shape_vec((occ[p], dim), std::mem::take(&mut buckets[p]))
                .expect("bucket shape");
            let floor = self.floor.view();
            let mut g = if from_flat {
                DiagGmm::single(data.view(), floor).expect("nonempty")
            } else {
                let mut g = old.clone();
                for _ in 0..self.cfg.em_iters_per_pass {
                    g = g.em_step(data.view(), floor);
                }
                g
            };
            let mut ll = g.total_log_likelihood(data.view());
            while g.num_components() < targets[p] {
                let mut cand = g.split_heaviest();
                for _ in 0..self.cfg.em_iters_per_pass.max(1) {
                    cand = cand.em_step(data.view(), floor);
                }
                let cand_ll = cand.total_log_likelihood(data.view());
                if cand_ll >= ll {
                    g = cand;
                    ll = cand_ll;
                } else {
                    break;
                }
            }
            gmms.push(g);
            let (s, f) = (self_counts[p] as f64, fwd_counts[p] as f64);
            let p_self = (s / (s + f)).clamp(TRANSITION_FLOOR, 1.0 - TRANSITION_FLOOR);
            transitions.push((p_self.ln(), (1.0 - p_self).ln()));
        }
        AcousticModelGmm::new(model.phones.clone(), gmms, transitions).expect("shapes preserved")
    }

    fn align_all(
        &self,
        model: &AcousticModelGmm,
        usable: &[usize],
    ) -> Result<(Vec<(usize, Alignment)>, f64), GmmError> {
        let mut out = Vec::with_capacity(usable.len());
        let mut total = 0.0;
        for &i in usable {
            let u = &self.utts[i];
            let al = viterbi_align(model, u.features, u.phones, u.id)?;
            total += al.log_prob;
            out.push((i, al));
        }
        Ok((out, total))
    }

    fn run(
        &self,
        phones: Vec<String>,
        usable: Vec<usize>,
        skipped: Vec<String>,
        initial: Vec<(usize, Alignment)>,
    ) -> Result<MonophoneTraining, GmmError> {
        let all = pooled(self.utts);
        let mean = all.mean_axis(Axis(0)).expect("nonempty");
        let var = all.var_axis(Axis(0), 0.0).mapv(|v| v.max(1e-12));
        let flat = AcousticModelGmm::flat(phones, mean, var)?;
        let mut model = self.reestimate(&flat, &initial, 0, true);
        let mut pass_log_probs = Vec::with_capacity(self.cfg.num_passes);
        let mut alignments = initial;
        for pass in 0..self.cfg.num_passes {
            let (al, total) = self.align_all(&model, &usable)?;
            pass_log_probs.push(total);
            alignments = al;
            if pass + 1 < self.cfg.num_passes {
                model = self.reestimate(&model, &alignments, pass + 1, false);
            }
        }
        Ok(MonophoneTraining {
            model,
            pass_log_probs,
            skipped,
            alignments: alignments.into_iter().map(|(_, a)| a).collect(),
        })
    }
}

fn partition(utts: &[TrainUtterance<'_>]) -> (Vec<usize>, Vec<String>) {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        if u.phones.is_empty() || u.phones.len() * STATES_PER_PHONE > u.features.frames() {
            skipped.push(u.id.to_string());
        } else {
            usable.push(i);
        }
    }
    (usable, skipped)
}

fn check_corpus(utts: &[TrainUtterance<'_>], num_phones: usize) -> Result<(), GmmError> {
    if utts.is_empty() {
        return Err(GmmError::EmptyCorpus);
    }
    let dim = utts[0].features.dims();
    for u in utts {
        if u.features.dims() != dim {
            return Err(GmmError::DimMismatch {
                expected: dim,
                got: u.features.dims(),
            });
        }
        if let Some(&p) = u.phones.iter().find(|&&p| p >= num_phones) {
            return Err(GmmError::UnknownPhone(p));
        }
    }
    Ok(())
}

/// Flat-start monophone training: uniform segmentation, then alternating Viterbi
/// alignment and re-estimation passes while the Gaussian count grows to its budget.
pub fn train_monophone(
    utts: &[TrainUtterance<'_>],
    phones: &[String],
    cfg: &MonophoneConfig,
) -> Result<MonophoneTraining, GmmError> {
    check_corpus(utts, phones.len())?;
    let (usable, skipped) = partition(utts);
    if usable.is_empty() {
        return Err(GmmError::EmptyCorpus);
    }
    let initial = usable
        .iter()
        .map(|&i| (i, uniform_alignment(&utts[i])))
        .collect();
    let trainer = Trainer {
        utts,
        floor: variance_floor(pooled(utts).view()),
        cfg,
    };
    trainer.run(phones.to_vec(), usable, skipped, initial)
}

/// Like [`train_monophone`] but the first estimate comes from existing alignments (for
/// example from a previous model on different features of the same utterances).
/// `alignments` is matched to `utts` by utterance id.
pub fn train_monophone_from_alignments(
    utts: &[TrainUtterance<'_>],
    phones: &[String],
    alignments: &[Alignment],
    cfg: &MonophoneConfig,
) -> Result<MonophoneTraining, GmmError> {
    check_corpus(utts, phones.len())?;
    let by_id: std::collections::HashMap<&str, &Alignment> =
        alignments.iter().map(|a| (a.utt_id.as_str(), a)).collect();
    let (candidates, mut skipped) = partition(utts);
    let mut usable = Vec::new();
    let mut initial = Vec::new();
    for i in candidates {
        match by_id.get(utts[i].id) {
            Some(a) if a.len() == utts[i].features.frames() => {
                usable.push(i);
                initial.push((i, (*a).clone()));
            }
            _ => skipped.push(utts[i].id.to_string()),
        }
    }
    if usable.is_empty() {
        return Err(GmmError::EmptyCorpus);
    }
    let trainer = Trainer {
        utts,
        floor: variance_floor(pooled(utts).view()),
        cfg,
    };
    trainer.run(phones.to_vec(), usable, skipped, initial)
}
