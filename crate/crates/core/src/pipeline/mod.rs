//! Experiment orchestration: stages with declared inputs, content-hashed completion
//! markers, and the CSV reports.
//!
//! Every stage owns a fixed set of output paths under the run directory. Before a stage
//! runs, the markers of its declared input stages must exist and still match the files on
//! disk. Reads go through [`Ctx`], which rejects any file outside the declared inputs.

mod artifacts;
mod config;
mod report;
mod stages;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use artifacts::{
    read_bundle, read_matrix, read_vector, write_bundle, write_matrix, write_vector,
};
pub use config::{
    AudioConfig, CorpusConfig, CorpusSource, ExperimentConfig, GmmStageConfig, IvectorConfig,
    IvectorSource, LmConfig, NnetShape, RawConfig, TransferGridConfig, LANGUAGES, SETS,
};
pub use report::{
    emit_report, read_results, read_timing, Report, ResultRow, TimingRow, RESULTS_HEADER,
    TIMING_HEADER,
};
pub use stages::{child_configs, ChildConfig, CHANCE_CONFIG};

use crate::audio::AudioError;
use crate::decoder::DecodeError;
use crate::features::FeatureError;
use crate::gmm::GmmError;
use crate::ivector::IvectorError;
use crate::lexlm::{LexError, LmError};
use crate::nnet::NnetError;
use crate::synthetic::SynthError;
use crate::transfer::TransferError;

fn at_line(line: &Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error{}: {msg}", at_line(line))]
    Config { line: Option<usize>, msg: String },
    #[error("missing artifact from stage `{stage}`: {detail}")]
    MissingArtifact { stage: &'static str, detail: String },
    #[error("stage `{stage}` tried to read {path}, which is not among its declared inputs")]
    UndeclaredInput { stage: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },
    #[error("no scored configurations to report")]
    NoScoredConfigs,
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Ivector(#[from] IvectorError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Lexicon(#[from] LexError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => EXIT_CONFIG,
            PipelineError::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
            _ => EXIT_RUNTIME,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.to_path_buf();
    move |source| PipelineError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    Prep,
    TrainGmm,
    TrainIvector,
    TrainParent,
    TransferTrain,
    Decode,
    Score,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenCorpus,
        Stage::Prep,
        Stage::TrainGmm,
        Stage::TrainIvector,
        Stage::TrainParent,
        Stage::TransferTrain,
        Stage::Decode,
        Stage::Score,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Prep => "prep",
            Stage::TrainGmm => "train-gmm",
            Stage::TrainIvector => "train-ivector",
            Stage::TrainParent => "train-parent",
            Stage::TransferTrain => "transfer-train",
            Stage::Decode => "decode",
            Stage::Score => "score",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn inputs(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenCorpus => &[],
            Prep => &[GenCorpus],
            TrainGmm => &[Prep],
            TrainIvector => &[Prep],
            TrainParent => &[Prep, TrainGmm, TrainIvector],
            TransferTrain => &[Prep, TrainGmm, TrainIvector, TrainParent],
            Decode => &[Prep, TrainGmm, TrainIvector, TransferTrain],
            Score => &[GenCorpus, Decode],
            Report => &[TrainParent, TransferTrain, Score],
        }
    }

    /// Paths (relative to the run directory) this stage owns.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Report => &["results.csv", "timing.csv", "curves"],
            Stage::GenCorpus => &["gen-corpus"],
            Stage::Prep => &["prep"],
            Stage::TrainGmm => &["train-gmm"],
            Stage::TrainIvector => &["train-ivector"],
            Stage::TrainParent => &["train-parent"],
            Stage::TransferTrain => &["transfer-train"],
            Stage::Decode => &["decode"],
            Stage::Score => &["score"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, PipelineError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config {
                line: None,
                msg: format!("unknown stage `{s}`"),
            })
    }
}

/// Handle given to stage implementations. Reads are checked against the declared inputs.
pub(crate) struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub stage: Stage,
    /// `None` lets the stage read anything (corpus ingestion of external files).
    allowed: Option<Vec<PathBuf>>,
}

impl Ctx<'_> {
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn check_read(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(allowed) = &self.allowed {
            if !allowed.iter().any(|root| path.starts_with(root)) {
                return Err(PipelineError::UndeclaredInput {
                    stage: self.stage.name(),
                    path: path.to_path_buf(),
                });
            }
        }
        Ok(())
    }

    /// Reads a file relative to the run directory (or an absolute path).
    pub fn read(&self, rel: impl AsRef<Path>) -> Result<Vec<u8>, PipelineError> {
        let path = self.path(rel);
        self.check_read(&path)?;
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn read_string(&self, rel: impl AsRef<Path>) -> Result<String, PipelineError> {
        let bytes = self.read(rel.as_ref())?;
        String::from_utf8(bytes).map_err(|_| PipelineError::Artifact {
            path: self.path(rel),
            msg: "not valid UTF-8".into(),
        })
    }

    /// Writes under one of this stage's own outputs.
    pub fn write(
        &self,
        rel: impl AsRef<Path>,
        data: impl AsRef<[u8]>,
    ) -> Result<(), PipelineError> {
        let rel = rel.as_ref();
        debug_assert!(
            self.stage.outputs().iter().any(|o| rel.starts_with(o)),
            "{} writing outside its outputs: {}",
            self.stage,
            rel.display()
        );
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, data).map_err(io_err(&path))
    }
}

/// Files with this name hold wall-clock measurements and are skipped when hashing outputs.
pub const VOLATILE_FILE: &str = "timing.csv";

fn sha256_hex(data: &[u8]) -> String {
    config::hex(&Sha256::digest(data))
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let full = root.join(rel);
    if full.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&full)
            .map_err(io_err(&full))?
            .map(|e| e.map(|e| rel.join(e.file_name())).map_err(io_err(&full)))
            .collect::<Result<_, _>>()?;
        names.sort();
        for n in names {
            collect_files(root, &n, out)?;
        }
    } else if full.is_file() {
        out.push(rel.to_path_buf());
    }
    Ok(())
}

/// Per-file hashes of a stage's outputs and their combined hash.
fn digest_outputs(
    out_dir: &Path,
    stage: Stage,
) -> Result<(Vec<(String, String)>, String), PipelineError> {
    let mut files = Vec::new();
    for o in stage.outputs() {
        collect_files(out_dir, Path::new(o), &mut files)?;
    }
    let mut listing = Vec::with_capacity(files.len());
    let mut all = Sha256::new();
    for f in files
        .into_iter()
        .filter(|f| f.file_name().is_none_or(|n| n != VOLATILE_FILE))
    {
        let path = out_dir.join(&f);
        let h = sha256_hex(&fs::read(&path).map_err(io_err(&path))?);
        let name = f.to_string_lossy().replace('\\', "/");
        all.update(name.as_bytes());
        all.update(b"\0");
        all.update(h.as_bytes());
        listing.push((name, h));
    }
    Ok((listing, config::hex(&all.finalize())))
}

/// Parsed completion marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub stage: String,
    pub config_hash: String,
    /// (input stage, its combined output hash when this stage ran).
    pub inputs: Vec<(String, String)>,
    pub files: Vec<(String, String)>,
    pub outputs_hash: String,
}

impl Marker {
    fn render(&self) -> String {
        let mut s = format!("stage {}\nconfig {}\n", self.stage, self.config_hash);
        for (st, h) in &self.inputs {
            s += &format!("input {st} {h}\n");
        }
        for (f, h) in &self.files {
            s += &format!("file {h} {f}\n");
        }
        s += &format!("outputs {}\n", self.outputs_hash);
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self, PipelineError> {
        let bad = |msg: &str| PipelineError::Artifact {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut m = Marker {
            stage: String::new(),
            config_hash: String::new(),
            inputs: Vec::new(),
            files: Vec::new(),
            outputs_hash: String::new(),
        };
        for line in text.lines() {
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad("malformed marker line"))?;
            match tag {
                "stage" => m.stage = rest.to_string(),
                "config" => m.config_hash = rest.to_string(),
                "outputs" => m.outputs_hash = rest.to_string(),
                "input" | "file" => {
                    let (a, b) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad("malformed marker line"))?;
                    if tag == "input" {
                        m.inputs.push((a.to_string(), b.to_string()));
                    } else {
                        m.files.push((b.to_string(), a.to_string()));
                    }
                }
                _ => return Err(bad("unknown marker tag")),
            }
        }
        if m.outputs_hash.is_empty() {
            return Err(bad("incomplete marker"));
        }
        Ok(m)
    }
}

pub fn marker_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir
        .join("markers")
        .join(format!("{}.done", stage.name()))
}

pub fn read_marker(out_dir: &Path, stage: Stage) -> Result<Option<Marker>, PipelineError> {
    let path = marker_path(out_dir, stage);
    match fs::read_to_string(&path) {
        Ok(text) => Marker::parse(&text, &path).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(PipelineError::Io { path, source: e }),
    }
}

/// Checks that every input stage has completed and its outputs are unchanged; returns
/// the (stage, outputs hash) pairs.
fn check_inputs(
    cfg: &ExperimentConfig,
    stage: Stage,
) -> Result<Vec<(String, String)>, PipelineError> {
    let mut out = Vec::new();
    for &input in stage.inputs() {
        let marker =
            read_marker(&cfg.out_dir, input)?.ok_or_else(|| PipelineError::MissingArtifact {
                stage: input.name(),
                detail: format!("run `{input}` before `{stage}`"),
            })?;
        let (_, current) = digest_outputs(&cfg.out_dir, input)?;
        if current != marker.outputs_hash {
            return Err(PipelineError::MissingArtifact {
                stage: input.name(),
                detail: format!(
                    "outputs of `{input}` changed or disappeared since it completed; re-run it"
                ),
            });
        }
        out.push((input.name().to_string(), marker.outputs_hash));
    }
    Ok(out)
}

/// Runs one stage: verifies inputs, clears the stage's old outputs, executes, and writes
/// the completion marker.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig) -> Result<Marker, PipelineError> {
    let inputs = check_inputs(cfg, stage)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let marker = marker_path(&cfg.out_dir, stage);
    if marker.exists() {
        fs::remove_file(&marker).map_err(io_err(&marker))?;
    }
    for o in stage.outputs() {
        let p = cfg.out_dir.join(o);
        if p.is_dir() {
            fs::remove_dir_all(&p).map_err(io_err(&p))?;
        } else if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    let allowed = (stage != Stage::GenCorpus).then(|| {
        stage
            .inputs()
            .iter()
            .flat_map(|s| s.outputs().iter().map(|o| cfg.out_dir.join(o)))
            .collect()
    });
    let ctx = Ctx {
        cfg,
        stage,
        allowed,
    };
    stages::execute(&ctx)?;
    let (files, outputs_hash) = digest_outputs(&cfg.out_dir, stage)?;
    let m = Marker {
        stage: stage.name().to_string(),
        config_hash: cfg.hash.clone(),
        inputs,
        files,
        outputs_hash,
    };
    let dir = cfg.out_dir.join("markers");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(&marker, m.render()).map_err(io_err(&marker))?;
    Ok(m)
}

/// Whether `stage` already completed under this config with its current inputs.
pub fn is_up_to_date(stage: Stage, cfg: &ExperimentConfig) -> Result<bool, PipelineError> {
    let Some(m) = read_marker(&cfg.out_dir, stage)? else {
        return Ok(false);
    };
    if m.config_hash != cfg.hash {
        return Ok(false);
    }
    let inputs = match check_inputs(cfg, stage) {
        Ok(i) => i,
        Err(PipelineError::MissingArtifact { .. }) => return Ok(false),
        Err(e) => return Err(e),
    };
    Ok(inputs == m.inputs && digest_outputs(&cfg.out_dir, stage)?.1 == m.outputs_hash)
}

/// Runs every stage in order, skipping those already up to date. `on_stage` is called
/// with each stage and whether it ran.
pub fn run_all(
    cfg: &ExperimentConfig,
    mut on_stage: impl FnMut(Stage, bool),
) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        let ran = !is_up_to_date(stage, cfg)?;
        if ran {
            run_stage(stage, cfg)?;
        }
        on_stage(stage, ran);
    }
    Ok(())
}
