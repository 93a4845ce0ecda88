//! Parent/child artificial languages with overlapping phone inventories, rendered by a
//! two-formant source-filter synthesizer with frame-level ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::audio::{write_manifest, write_wav, AudioBuffer, AudioError, ManifestEntry};
use crate::derive_seed;
use crate::lexlm::SILENCE_PHONE;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("shared fraction {0} outside [0, 1]")]
    SharedFraction(f64),
    #[error("invalid language spec: {0}")]
    Spec(String),
    #[error("need at least one utterance")]
    NoUtterances,
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSpec {
    pub name: String,
    pub f1: f64,
    pub f2: f64,
    pub amplitude: f64,
    pub voiced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyllableSpec {
    /// One CJK character per syllable; words are spelled with these.
    pub symbol: char,
    pub phones: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    /// Index 0 is silence (noise floor only).
    pub phones: Vec<PhoneSpec>,
    pub syllables: Vec<SyllableSpec>,
    /// Syllable indices per word.
    pub words: Vec<Vec<usize>>,
    pub word_weights: Vec<f64>,
    /// Inclusive range of words per sentence.
    pub sentence_len: (usize, usize),
    pub sample_rate: u32,
    pub num_speakers: usize,
    pub seed: u64,
}

/// Sizes of the generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub parent_phones: usize,
    pub parent_syllables: usize,
    pub parent_words: usize,
    pub child_phones: usize,
    pub child_syllables: usize,
    pub child_words: usize,
    pub sentence_len: (usize, usize),
    pub sample_rate: u32,
    pub num_speakers: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            parent_phones: 20,
            parent_syllables: 80,
            parent_words: 200,
            child_phones: 14,
            child_syllables: 40,
            child_words: 50,
            sentence_len: (1, 3),
            sample_rate: 8000,
            num_speakers: 10,
        }
    }
}

const PARENT_SYMBOL_BASE: u32 = 0x4E00;
const CHILD_SYMBOL_BASE: u32 = 0x5E00;

fn silence_phone() -> PhoneSpec {
    PhoneSpec {
        name: SILENCE_PHONE.to_string(),
        f1: 0.0,
        f2: 0.0,
        amplitude: 0.0,
        voiced: false,
    }
}

/// Formant targets kept apart so that phones stay acoustically distinct.
fn draw_phones(
    count: usize,
    first_id: usize,
    avoid: &[PhoneSpec],
    rng: &mut ChaCha8Rng,
) -> Vec<PhoneSpec> {
    let mut out: Vec<PhoneSpec> = Vec::with_capacity(count);
    let mut min_dist = 160.0;
    let mut tries = 0;
    while out.len() < count {
        let f1 = rng.random_range(250.0..900.0);
        let f2 = rng.random_range(f1 + 400.0..3000.0);
        let voiced = rng.random_bool(0.7);
        let far = avoid.iter().chain(&out).all(|p| {
            let d = ((p.f1 - f1).powi(2) + ((p.f2 - f2) / 2.0).powi(2)).sqrt();
            d >= min_dist || p.voiced != voiced
        });
        tries += 1;
        if tries % 500 == 0 {
            min_dist *= 0.9;
        }
        if !far {
            continue;
        }
        out.push(PhoneSpec {
            name: format!("ph{:02}", first_id + out.len()),
            f1,
            f2,
            amplitude: rng.random_range(0.5..1.0),
            voiced,
        });
    }
    // every inventory needs voiced nuclei
    if !out.is_empty() && !out.iter().any(|p| p.voiced) {
        out[0].voiced = true;
    }
    out
}

fn draw_syllables(
    phones: &[PhoneSpec],
    count: usize,
    symbol_base: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<SyllableSpec> {
    let nuclei: Vec<usize> = (1..phones.len()).filter(|&p| phones[p].voiced).collect();
    let onsets: Vec<usize> = (1..phones.len()).collect();
    let capacity = nuclei.len() * (1 + onsets.len());
    let count = count.min(capacity);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let nucleus = *nuclei.choose(rng).expect("voiced phones exist");
        let phones = if rng.random_bool(0.7) {
            vec![*onsets.choose(rng).expect("onsets exist"), nucleus]
        } else {
            vec![nucleus]
        };
        if seen.insert(phones.clone()) {
            out.push(SyllableSpec {
                symbol: char::from_u32(symbol_base + out.len() as u32).expect("CJK block"),
                phones,
            });
        }
    }
    out
}

fn draw_words(syllables: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let capacity = syllables + syllables * syllables;
    let count = count.min(capacity);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = if rng.random_bool(0.5) { 1 } else { 2 };
        let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..syllables)).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 1.0).powf(0.8)).collect()
}

/// Parent and child languages. The child keeps ceil(shared_fraction * parent phones) of the
/// parent's phones with identical formant targets and draws the rest fresh.
pub fn make_language_pair(
    shared_fraction: f64,
    seed: u64,
) -> Result<(SyntheticLanguageSpec, SyntheticLanguageSpec), SynthError> {
    make_language_pair_with(shared_fraction, seed, &PairConfig::default())
}

pub fn make_language_pair_with(
    shared_fraction: f64,
    seed: u64,
    cfg: &PairConfig,
) -> Result<(SyntheticLanguageSpec, SyntheticLanguageSpec), SynthError> {
    if !(0.0..=1.0).contains(&shared_fraction) {
        return Err(SynthError::SharedFraction(shared_fraction));
    }
    if cfg.parent_phones == 0
        || cfg.child_phones == 0
        || cfg.parent_words == 0
        || cfg.child_words == 0
    {
        return Err(SynthError::Spec("inventories must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic/pair"));
    let mut parent_phones = vec![silence_phone()];
    parent_phones.extend(draw_phones(cfg.parent_phones, 0, &[], &mut rng));
    let shared = ((shared_fraction * cfg.parent_phones as f64) - 1e-9)
        .ceil()
        .max(0.0) as usize;
    let shared = shared.min(cfg.child_phones).min(cfg.parent_phones);
    let mut pool: Vec<usize> = (1..=cfg.parent_phones).collect();
    pool.shuffle(&mut rng);
    let mut picked: Vec<usize> = pool[..shared].to_vec();
    picked.sort_unstable();
    let mut child_phones = vec![silence_phone()];
    child_phones.extend(picked.iter().map(|&i| parent_phones[i].clone()));
    let fresh = draw_phones(
        cfg.child_phones - shared,
        cfg.parent_phones,
        &parent_phones[1..],
        &mut rng,
    );
    child_phones.extend(fresh);
    if !child_phones[1..].iter().any(|p| p.voiced) {
        child_phones[1].voiced = true;
    }
    let build = |name: &str,
                 phones: Vec<PhoneSpec>,
                 syl: usize,
                 words: usize,
                 base: u32,
                 rng: &mut ChaCha8Rng| {
        let syllables = draw_syllables(&phones, syl, base, rng);
        let words = draw_words(syllables.len(), words, rng);
        let word_weights = zipf_weights(words.len());
        SyntheticLanguageSpec {
            name: name.to_string(),
            phones,
            syllables,
            words,
            word_weights,
            sentence_len: cfg.sentence_len,
            sample_rate: cfg.sample_rate,
            num_speakers: cfg.num_speakers,
            seed: rng.random(),
        }
    };
    let parent = build(
        "parent",
        parent_phones,
        cfg.parent_syllables,
        cfg.parent_words,
        PARENT_SYMBOL_BASE,
        &mut rng,
    );
    let child = build(
        "child",
        child_phones,
        cfg.child_syllables,
        cfg.child_words,
        CHILD_SYMBOL_BASE,
        &mut rng,
    );
    parent.validate()?;
    child.validate()?;
    Ok((parent, child))
}

impl SyntheticLanguageSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let nyq = self.sample_rate as f64 / 2.0;
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.phones.first().map(|p| p.name.as_str()) != Some(SILENCE_PHONE) {
            return bad("phone 0 must be silence".into());
        }
        // allow for speaker and token jitter
        if let Some(p) = self
            .phones
            .iter()
            .find(|p| p.f2 * 1.05 * 1.05 >= nyq || p.f1 * 1.1 >= nyq)
        {
            return bad(format!(
                "phone {} formants exceed the Nyquist limit",
                p.name
            ));
        }
        if self.words.is_empty() || self.words.len() != self.word_weights.len() {
            return bad("need a nonempty word list with one weight per word".into());
        }
        if self.word_weights.iter().any(|&w| !(w > 0.0)) {
            return bad("word weights must be positive".into());
        }
        if self.sentence_len.0 == 0 || self.sentence_len.0 > self.sentence_len.1 {
            return bad("sentence length range must be 1 <= min <= max".into());
        }
        if self.num_speakers == 0 {
            return bad("need at least one speaker".into());
        }
        for w in &self.words {
            if w.is_empty() || w.iter().any(|&s| s >= self.syllables.len()) {
                return bad("word references a missing syllable".into());
            }
        }
        for s in &self.syllables {
            if s.phones.iter().any(|&p| p == 0 || p >= self.phones.len()) {
                return bad(format!("syllable {} references a missing phone", s.symbol));
            }
        }
        Ok(())
    }

    pub fn word_text(&self, w: usize) -> String {
        self.words[w]
            .iter()
            .map(|&s| self.syllables[s].symbol)
            .collect()
    }

    pub fn syllable_name(&self, s: usize) -> String {
        self.syllables[s].symbol.to_string()
    }

    /// Lexicon entries: word -> syllables and syllable -> phones.
    pub fn lexicon_entries(&self) -> (Vec<(String, Vec<String>)>, Vec<(String, Vec<String>)>) {
        let words = (0..self.words.len())
            .map(|w| {
                (
                    self.word_text(w),
                    self.words[w]
                        .iter()
                        .map(|&s| self.syllable_name(s))
                        .collect(),
                )
            })
            .collect();
        let syllables = self
            .syllables
            .iter()
            .map(|s| {
                (
                    s.symbol.to_string(),
                    s.phones
                        .iter()
                        .map(|&p| self.phones[p].name.clone())
                        .collect(),
                )
            })
            .collect();
        (words, syllables)
    }

    pub fn phone_names(&self) -> Vec<String> {
        self.phones.iter().map(|p| p.name.clone()).collect()
    }

    fn speaker(&self, id: usize) -> Speaker {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("speaker/{id}")));
        Speaker {
            f0: rng.random_range(90.0..220.0),
            formant_scale: rng.random_range(0.95..1.05),
            gain: rng.random_range(0.7..1.3),
        }
    }
}

struct Speaker {
    f0: f64,
    formant_scale: f64,
    gain: f64,
}

const NOISE_FLOOR: f64 = 0.002;
const FRAME_LENGTH_MS: f64 = 25.0;
const FRAME_SHIFT_MS: f64 = 10.0;

/// Two-pole resonator with unity gain at DC-ish normalization.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, rate: f64) -> Self {
        let r = (-PI * bandwidth / rate).exp();
        let theta = 2.0 * PI * freq / rate;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn render_segment(
    phone: &PhoneSpec,
    samples: usize,
    f0: f64,
    formant_scale: f64,
    gain: f64,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    if phone.amplitude == 0.0 {
        return vec![0.0; samples];
    }
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-0.05..0.05);
    let f1 = phone.f1 * formant_scale * jitter(rng);
    let f2 = phone.f2 * formant_scale * jitter(rng);
    let mut r1 = Resonator::new(f1, 90.0, rate);
    let mut r2 = Resonator::new(f2, 130.0, rate);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut phase = rng.random::<f64>();
    let mut out = Vec::with_capacity(samples);
    for n in 0..samples {
        let excitation = if phone.voiced {
            // slight vibrato keeps the pitch track alive
            let f = f0 * (1.0 + 0.02 * (2.0 * PI * 5.0 * n as f64 / rate).sin());
            phase += f / rate;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            pulse + 0.02 * noise.sample(rng)
        } else {
            noise.sample(rng)
        };
        out.push(r2.step(r1.step(excitation)));
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / samples.max(1) as f64).sqrt();
    let target = 0.1 * phone.amplitude * gain;
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= target / rms);
    }
    out
}

/// One rendered utterance with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub words: Vec<String>,
    pub audio: AudioBuffer,
    /// Phone index (into the spec's inventory) per 25 ms / 10 ms frame.
    pub frame_labels: Vec<usize>,
}

impl SynthUtterance {
    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }
}

/// Renders utterance `index`; deterministic in (spec, seed, index).
pub fn render_utterance(spec: &SyntheticLanguageSpec, index: usize, seed: u64) -> SynthUtterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &format!("synthetic/{}/{index}", spec.name),
    ));
    let rate = spec.sample_rate as f64;
    let speaker_idx = rng.random_range(0..spec.num_speakers);
    let speaker = spec.speaker(speaker_idx);
    let (lo, hi) = spec.sentence_len;
    let n_words = rng.random_range(lo..=hi);
    let total_w: f64 = spec.word_weights.iter().sum();
    let words: Vec<usize> = (0..n_words)
        .map(|_| {
            let mut r = rng.random::<f64>() * total_w;
            for (i, &w) in spec.word_weights.iter().enumerate() {
                if r < w {
                    return i;
                }
                r -= w;
            }
            spec.word_weights.len() - 1
        })
        .collect();
    // (phone, duration seconds)
    let mut segments: Vec<(usize, f64)> = vec![(0, rng.random_range(0.10..0.25))];
    for (k, &w) in words.iter().enumerate() {
        if k > 0 && rng.random_bool(0.3) {
            segments.push((0, rng.random_range(0.08..0.2)));
        }
        for &s in &spec.words[w] {
            for &p in &spec.syllables[s].phones {
                segments.push((p, rng.random_range(0.08..0.2)));
            }
        }
    }
    segments.push((0, rng.random_range(0.10..0.25)));
    let noise = Normal::new(0.0, NOISE_FLOOR).expect("valid normal");
    let mut samples = Vec::new();
    let mut owner = Vec::new();
    for &(p, dur) in &segments {
        let n = (dur * rate).round() as usize;
        let f0 = speaker.f0 * rng.random_range(0.95..1.05);
        let seg = render_segment(
            &spec.phones[p],
            n,
            f0,
            speaker.formant_scale,
            speaker.gain,
            rate,
            &mut rng,
        );
        samples.extend(seg);
        owner.extend(std::iter::repeat_n(p, n));
    }
    let samples: Vec<f32> = samples
        .iter()
        .map(|v| (v + noise.sample(&mut rng)) as f32)
        .collect();
    let frame_len = (rate * FRAME_LENGTH_MS / 1000.0).round() as usize;
    let shift = (rate * FRAME_SHIFT_MS / 1000.0).round() as usize;
    let frames = if owner.len() < frame_len {
        0
    } else {
        1 + (owner.len() - frame_len) / shift
    };
    let frame_labels = (0..frames)
        .map(|t| owner[t * shift + frame_len / 2])
        .collect();
    SynthUtterance {
        utt_id: format!("{}-{index:05}", spec.name),
        speaker_id: format!("{}-spk{speaker_idx:02}", spec.name),
        words: words.iter().map(|&w| spec.word_text(w)).collect(),
        audio: AudioBuffer::from_clamped(samples, spec.sample_rate).expect("positive rate"),
        frame_labels,
    }
}

/// A single phone rendered for `seconds` by speaker 0.
pub fn render_phone(
    spec: &SyntheticLanguageSpec,
    phone: usize,
    seconds: f64,
    seed: u64,
) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = spec.speaker(0);
    let rate = spec.sample_rate as f64;
    let n = (seconds * rate).round() as usize;
    let seg = render_segment(
        &spec.phones[phone],
        n,
        sp.f0,
        sp.formant_scale,
        sp.gain,
        rate,
        &mut rng,
    );
    AudioBuffer::from_clamped(seg.iter().map(|&v| v as f32).collect(), spec.sample_rate)
        .expect("positive rate")
}

pub fn synthesize_utterances(
    spec: &SyntheticLanguageSpec,
    num_utterances: usize,
    seed: u64,
) -> Result<Vec<SynthUtterance>, SynthError> {
    if num_utterances == 0 {
        return Err(SynthError::NoUtterances);
    }
    spec.validate()?;
    Ok((0..num_utterances)
        .map(|i| render_utterance(spec, i, seed))
        .collect())
}

/// Writes `<utt>.wav`, `<utt>.labels` and `manifest.tsv` under `dir`; returns the manifest.
pub fn synthesize_corpus(
    spec: &SyntheticLanguageSpec,
    num_utterances: usize,
    seed: u64,
    dir: &Path,
) -> Result<Vec<ManifestEntry>, SynthError> {
    let utts = synthesize_utterances(spec, num_utterances, seed)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let wav = format!("{}.wav", u.utt_id);
        write_wav(dir.join(&wav), &u.audio)?;
        let labels: String = u.frame_labels.iter().map(|l| format!("{l}\n")).collect();
        let lp = dir.join(format!("{}.labels", u.utt_id));
        fs::write(&lp, labels).map_err(io(&lp))?;
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            wav_path: PathBuf::from(wav),
            speaker_id: u.speaker_id.clone(),
            transcript: u.transcript(),
        });
    }
    write_manifest(dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}
