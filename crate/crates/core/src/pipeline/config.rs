//! Experiment configuration: `[section]` headers followed by `key = value` lines.
//! `#` starts a comment. Keys are addressed as `section.key` (for `--set` overrides too).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::decoder::DecodeConfig;
use crate::gmm::MonophoneConfig;
use crate::lexlm::Smoothing;
use crate::nnet::TrainConfig;
use crate::synthetic::PairConfig;

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// Config-file line, or `None` for command-line overrides.
    line: Option<usize>,
}

/// Raw parsed key/value pairs.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

fn config_err(line: Option<usize>, msg: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        line,
        msg: msg.into(),
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = Some(i + 1);
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(line, "unterminated section header"))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(config_err(line, format!("bad section name {name:?}")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| {
                config_err(line, format!("expected `key = value`, got {content:?}"))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(config_err(line, "empty key"));
            }
            let sec = section
                .as_deref()
                .ok_or_else(|| config_err(line, "key outside any [section]"))?;
            let key = format!("{sec}.{k}");
            let entry = Entry {
                value: v.trim().to_string(),
                line,
            };
            if entries.insert(key.clone(), entry).is_some() {
                return Err(config_err(line, format!("duplicate key {key}")));
            }
        }
        Ok(Self { entries })
    }

    /// `section.key=value`.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(None, format!("override {assignment:?} is not key=value")))?;
        let k = k.trim();
        if k.split('.').count() != 2 || k.split('.').any(str::is_empty) {
            return Err(config_err(
                None,
                format!("override key {k:?} must be section.key"),
            ));
        }
        self.entries.insert(
            k.to_string(),
            Entry {
                value: v.trim().to_string(),
                line: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Canonical `key=value` listing, sorted by key.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|(k, e)| format!("{k}={}\n", e.value))
            .collect()
    }
}

/// Typed reads that remember which keys were consumed, so leftovers can be reported.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::collections::BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn str(&mut self, key: &str) -> Option<&'a str> {
        self.used.insert(key.to_string());
        self.raw.get(key)
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.raw.entries.get(key).and_then(|e| e.line)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, PipelineError> {
        match self.str(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_err(self.line(key), format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, PipelineError> {
        match self.str(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        config_err(self.line(key), format!("{key}: cannot parse {s:?}"))
                    })
                })
                .collect(),
        }
    }

    fn check(&self, key: &str, ok: bool, msg: &str) -> Result<(), PipelineError> {
        if ok {
            Ok(())
        } else {
            Err(config_err(self.line(key), format!("{key}: {msg}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvectorSource {
    Parent,
    Child,
}

impl IvectorSource {
    pub fn name(self) -> &'static str {
        match self {
            IvectorSource::Parent => "parent",
            IvectorSource::Child => "child",
        }
    }
}

impl FromStr for IvectorSource {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "parent" => Ok(IvectorSource::Parent),
            "child" => Ok(IvectorSource::Child),
            _ => Err(()),
        }
    }
}

/// Where the four corpora and the two lexicons come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic {
        shared_fraction: f64,
        pair: PairConfig,
    },
    /// User-supplied manifests and lexicon files, keyed by set / language name.
    Files {
        manifests: BTreeMap<String, PathBuf>,
        lexicons: BTreeMap<String, (PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// Utterance counts per set; only used by the synthetic source.
    pub sizes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub speed_factors: Vec<f64>,
    pub volume_perturb: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmStageConfig {
    pub mono: MonophoneConfig,
    pub lda_dim: usize,
    pub lda_context: usize,
    pub lda_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvectorConfig {
    pub dim: usize,
    pub ubm_components: usize,
    pub ubm_iters: usize,
    pub tv_iters: usize,
    pub source: IvectorSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnetShape {
    pub tdnn_dim: usize,
    pub lstm_cell: usize,
    pub lstm_proj: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferGridConfig {
    pub ks: Vec<usize>,
    pub xs: Vec<f64>,
    /// Also train the random-init child baseline.
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub order: usize,
    pub smoothing: Smoothing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub audio: AudioConfig,
    pub gmm: GmmStageConfig,
    pub ivector: IvectorConfig,
    pub nnet: NnetShape,
    pub train: TrainConfig,
    pub transfer: TransferGridConfig,
    pub lm: LmConfig,
    pub decode: DecodeConfig,
    /// Sha-256 of the canonical key/value listing.
    pub hash: String,
}

/// The corpus sets every run works with.
pub const SETS: [&str; 5] = [
    "parent_train",
    "parent_dev",
    "child_train",
    "child_dev",
    "child_test",
];
pub const LANGUAGES: [&str; 2] = ["parent", "child"];

fn default_sizes(set: &str) -> usize {
    match set {
        "parent_train" => 2000,
        "parent_dev" => 100,
        "child_train" => 200,
        "child_dev" => 40,
        "child_test" => 60,
        _ => unreachable!("known set"),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(None, format!("cannot read {}: {e}", path.display())))?;
        let mut raw = RawConfig::parse(&text)?;
        for o in overrides {
            raw.set(o)?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_raw(&raw, base)
    }

    /// Relative paths are resolved against `base`.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self, PipelineError> {
        let mut r = Reader {
            raw,
            used: Default::default(),
        };
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let out_dir = resolve(
            r.str("experiment.out_dir")
                .ok_or_else(|| config_err(None, "experiment.out_dir is required"))?,
        );
        let seed = r.parse("experiment.seed", 0u64)?;

        let mut sizes = BTreeMap::new();
        for set in SETS {
            let key = format!("corpus.{set}");
            let n = r.parse(&key, default_sizes(set))?;
            r.check(&key, n >= 1, "need at least one utterance")?;
            sizes.insert(set.to_string(), n);
        }
        let source = match r.str("corpus.source").unwrap_or("synthetic") {
            "synthetic" => {
                let shared_fraction = r.parse("corpus.shared_fraction", 0.6)?;
                r.check(
                    "corpus.shared_fraction",
                    (0.0..=1.0).contains(&shared_fraction),
                    "must be in [0, 1]",
                )?;
                let d = PairConfig::default();
                let pair = PairConfig {
                    parent_phones: r.parse("corpus.parent_phones", d.parent_phones)?,
                    parent_syllables: r.parse("corpus.parent_syllables", d.parent_syllables)?,
                    parent_words: r.parse("corpus.parent_words", d.parent_words)?,
                    child_phones: r.parse("corpus.child_phones", d.child_phones)?,
                    child_syllables: r.parse("corpus.child_syllables", d.child_syllables)?,
                    child_words: r.parse("corpus.child_words", d.child_words)?,
                    sentence_len: (
                        r.parse("corpus.min_words", d.sentence_len.0)?,
                        r.parse("corpus.max_words", d.sentence_len.1)?,
                    ),
                    sample_rate: r.parse("audio.sample_rate", 8000)?,
                    num_speakers: r.parse("corpus.speakers", d.num_speakers)?,
                };
                CorpusSource::Synthetic {
                    shared_fraction,
                    pair,
                }
            }
            "files" => {
                let mut manifests = BTreeMap::new();
                for set in SETS {
                    let key = format!("corpus.{set}_manifest");
                    let p = r.str(&key).ok_or_else(|| {
                        config_err(None, format!("{key} is required for files corpora"))
                    })?;
                    manifests.insert(set.to_string(), resolve(p));
                }
                let mut lexicons = BTreeMap::new();
                for lang in LANGUAGES {
                    let wk = format!("corpus.{lang}_words");
                    let sk = format!("corpus.{lang}_syllables");
                    let w = r.str(&wk).ok_or_else(|| {
                        config_err(None, format!("{wk} is required for files corpora"))
                    })?;
                    let s = r.str(&sk).ok_or_else(|| {
                        config_err(None, format!("{sk} is required for files corpora"))
                    })?;
                    lexicons.insert(lang.to_string(), (resolve(w), resolve(s)));
                }
                CorpusSource::Files {
                    manifests,
                    lexicons,
                }
            }
            other => {
                return Err(config_err(
                    r.line("corpus.source"),
                    format!("corpus.source: unknown source {other:?} (synthetic or files)"),
                ))
            }
        };

        let audio = AudioConfig {
            sample_rate: r.parse("audio.sample_rate", 8000)?,
            speed_factors: r.list("audio.speed_factors", vec![0.9, 1.0, 1.1])?,
            volume_perturb: r.parse("audio.volume_perturb", true)?,
        };
        r.check(
            "audio.sample_rate",
            audio.sample_rate >= 4000,
            "must be at least 4000",
        )?;
        r.check(
            "audio.speed_factors",
            !audio.speed_factors.is_empty()
                && audio.speed_factors.iter().all(|&f| f > 0.5 && f < 2.0),
            "need a nonempty list of factors in (0.5, 2)",
        )?;

        let dm = MonophoneConfig::default();
        let gmm = GmmStageConfig {
            mono: MonophoneConfig {
                num_passes: r.parse("gmm.passes", dm.num_passes)?,
                max_gaussians: r.parse("gmm.max_gaussians", dm.max_gaussians)?,
                growth_fraction: r.parse("gmm.growth_fraction", dm.growth_fraction)?,
                em_iters_per_pass: r.parse("gmm.em_iters", dm.em_iters_per_pass)?,
                min_frames_per_gaussian: r
                    .parse("gmm.min_frames_per_gaussian", dm.min_frames_per_gaussian)?,
            },
            lda_dim: r.parse("gmm.lda_dim", 40)?,
            lda_context: r.parse("gmm.lda_context", 3)?,
            lda_passes: r.parse("gmm.lda_passes", 4)?,
        };
        r.check("gmm.passes", gmm.mono.num_passes >= 1, "must be at least 1")?;
        r.check("gmm.lda_dim", gmm.lda_dim >= 1, "must be at least 1")?;
        r.check("gmm.lda_passes", gmm.lda_passes >= 1, "must be at least 1")?;

        let ivector = IvectorConfig {
            dim: r.parse("ivector.dim", 10)?,
            ubm_components: r.parse("ivector.ubm_components", 16)?,
            ubm_iters: r.parse("ivector.ubm_iters", 10)?,
            tv_iters: r.parse("ivector.tv_iters", 5)?,
            source: r.parse("ivector.source", IvectorSource::Child)?,
        };
        r.check("ivector.dim", ivector.dim >= 1, "must be at least 1")?;
        r.check(
            "ivector.ubm_components",
            ivector.ubm_components >= 1,
            "must be at least 1",
        )?;

        let nnet = NnetShape {
            tdnn_dim: r.parse("nnet.tdnn_dim", 64)?,
            lstm_cell: r.parse("nnet.lstm_cell", 32)?,
            lstm_proj: r.parse("nnet.lstm_proj", 32)?,
        };
        r.check(
            "nnet.tdnn_dim",
            nnet.tdnn_dim >= 1 && nnet.lstm_cell >= 1 && nnet.lstm_proj >= 1,
            "layer dims must be positive",
        )?;

        let dt = TrainConfig::default();
        let train = TrainConfig {
            epochs: r.parse("train.epochs", dt.epochs)?,
            lr_initial: r.parse("train.lr_initial", dt.lr_initial)?,
            lr_final: r.parse("train.lr_final", dt.lr_final)?,
            minibatch: r.parse("train.minibatch", dt.minibatch)?,
            xent_regularization: r.parse("train.xent_regularization", dt.xent_regularization)?,
            frames_per_example: r
                .list("train.frames_per_example", dt.frames_per_example.clone())?,
            dropout_peak: r.parse("train.dropout_peak", dt.dropout_peak)?,
            dropout_start: r.parse("train.dropout_start", dt.dropout_start)?,
            minibatches_per_iter: r.parse("train.minibatches_per_iter", dt.minibatches_per_iter)?,
            seed: 0,
        };
        train
            .validate()
            .map_err(|e| config_err(None, format!("train: {e}")))?;

        let transfer = TransferGridConfig {
            ks: r.list("transfer.k", vec![2, 4, 6])?,
            xs: r.list("transfer.lr_multiplier", vec![0.0, 0.25, 1.0])?,
            baseline: r.parse("transfer.baseline", true)?,
        };
        r.check(
            "transfer.lr_multiplier",
            transfer.xs.iter().all(|&x| x >= 0.0 && x.is_finite()),
            "multipliers must be finite and nonnegative",
        )?;
        r.check(
            "transfer.k",
            transfer.baseline || (!transfer.ks.is_empty() && !transfer.xs.is_empty()),
            "grid is empty and the baseline is disabled",
        )?;

        let lm = LmConfig {
            order: r.parse("lm.order", 3)?,
            smoothing: r.parse("lm.smoothing", Smoothing::KneserNey)?,
        };
        r.check("lm.order", (2..=4).contains(&lm.order), "must be 2, 3 or 4")?;

        let dd = DecodeConfig::default();
        let decode = DecodeConfig {
            beam: r.parse("decode.beam", dd.beam)?,
            acoustic_scale: r.parse("decode.acoustic_scale", dd.acoustic_scale)?,
            lm_scale: r.parse("decode.lm_scale", dd.lm_scale)?,
            nbest: r.parse("decode.nbest", dd.nbest)?,
        };
        r.check(
            "decode.beam",
            decode.beam > 0.0 && decode.acoustic_scale > 0.0 && decode.nbest >= 1,
            "beam and acoustic scale must be positive and nbest at least 1",
        )?;

        if let Some(unknown) = raw.entries.keys().find(|k| !r.used.contains(*k)) {
            return Err(config_err(
                r.line(unknown),
                format!("unknown key {unknown}"),
            ));
        }
        let hash = hex(&Sha256::digest(raw.canonical().as_bytes()));
        Ok(Self {
            out_dir,
            seed,
            corpus: CorpusConfig { source, sizes },
            audio,
            gmm,
            ivector,
            nnet,
            train,
            transfer,
            lm,
            decode,
            hash,
        })
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.corpus.source, CorpusSource::Synthetic { .. })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
