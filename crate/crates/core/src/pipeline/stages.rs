use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::artifacts::{
    format_utts, parse_utts, read_bundle, write_bundle, write_matrix, write_vector, UttInfo,
};
use super::config::{CorpusSource, IvectorSource, LANGUAGES, SETS};
use super::{Ctx, PipelineError, Stage, VOLATILE_FILE};
use crate::audio::{
    encode_wav, parse_manifest, parse_wav, resample, speed_perturb, volume_perturb, write_manifest,
    AudioBuffer, ManifestEntry, VOLUME_GAIN_RANGE,
};
use crate::decoder::{
    build_graph, decode, format_hypotheses, parse_hypotheses, pdf_priors, posteriors_to_loglikes,
    score_errors, ErrorCounts, Unit,
};
use crate::derive_seed;
use crate::features::{
    apply_cmn, compute_mfcc, compute_pitch, splice_frames, FeatureMatrix, MfccConfig, PitchConfig,
};
use crate::gmm::{
    alignment_to_targets, estimate_lda, train_monophone, train_monophone_from_alignments,
    viterbi_align, AcousticModelGmm, Alignment, GmmError, MonophoneConfig, TrainUtterance,
};
use crate::ivector::{
    accumulate_stats, extract_ivector, format_ivectors, parse_ivectors, train_total_variability,
    train_ubm, IvectorExtractor,
};
use crate::lexlm::{
    read_lexicon, train_ngram, Lexicon, NgramLm, Segment, WordTrie, OOV_WORD, SILENCE_PHONE,
};
use crate::nnet::{tdnn_lstm_specs, train_sgd, Network, TrainLog};
use crate::synthetic::{make_language_pair_with, synthesize_utterances, SyntheticLanguageSpec};
use crate::transfer::{build_transfer_grid, transfer_weights, TransferConfig};

/// Name of the uniform-posterior reference decoder in decode and score outputs.
pub const CHANCE_CONFIG: &str = "chance";
const BASELINE_CONFIG: &str = "baseline";
/// Cap on pooled frames for UBM training.
const UBM_MAX_FRAMES: usize = 50_000;

/// One child training run: the random-init baseline (k = 0) or a transfer setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildConfig {
    pub name: String,
    pub k: usize,
    pub x: f64,
}

pub fn child_configs(cfg: &super::ExperimentConfig) -> Vec<ChildConfig> {
    let mut out = Vec::new();
    if cfg.transfer.baseline {
        out.push(ChildConfig {
            name: BASELINE_CONFIG.to_string(),
            k: 0,
            x: 1.0,
        });
    }
    for t in build_transfer_grid(&cfg.transfer.ks, &cfg.transfer.xs, 0) {
        out.push(ChildConfig {
            name: format!("k{}_x{}", t.k, t.x),
            k: t.k,
            x: t.x,
        });
    }
    out
}

pub(crate) fn execute(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    match ctx.stage {
        Stage::GenCorpus => gen_corpus(ctx),
        Stage::Prep => prep(ctx),
        Stage::TrainGmm => train_gmm(ctx),
        Stage::TrainIvector => train_ivector(ctx),
        Stage::TrainParent => train_parent(ctx),
        Stage::TransferTrain => transfer_train(ctx),
        Stage::Decode => decode_stage(ctx),
        Stage::Score => score_stage(ctx),
        Stage::Report => super::report::write_report(ctx),
    }
}

fn lang_of(set: &str) -> &str {
    set.split('_').next().unwrap_or(set)
}

fn malformed(path: PathBuf, msg: impl ToString) -> PipelineError {
    PipelineError::Artifact {
        path,
        msg: msg.to_string(),
    }
}

fn format_entries(entries: &[(String, Vec<String>)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k}\t{}\n", v.join(" ")))
        .collect()
}

// ---------------------------------------------------------------- gen-corpus

fn gen_corpus(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    match &cfg.corpus.source {
        CorpusSource::Synthetic {
            shared_fraction,
            pair,
        } => {
            let (parent, child) = make_language_pair_with(
                *shared_fraction,
                derive_seed(cfg.seed, "gen-corpus/pair"),
                pair,
            )?;
            for (lang, spec) in [("parent", &parent), ("child", &child)] {
                let (words, syllables) = spec.lexicon_entries();
                ctx.write(
                    format!("gen-corpus/lang/{lang}/words.txt"),
                    format_entries(&words),
                )?;
                ctx.write(
                    format!("gen-corpus/lang/{lang}/syllables.txt"),
                    format_entries(&syllables),
                )?;
                let mut phones = String::from("phone\tf1\tf2\tamplitude\tvoiced\n");
                for p in &spec.phones {
                    let _ = writeln!(
                        phones,
                        "{}\t{:.1}\t{:.1}\t{:.3}\t{}",
                        p.name, p.f1, p.f2, p.amplitude, p.voiced
                    );
                }
                ctx.write(format!("gen-corpus/lang/{lang}/phones.tsv"), phones)?;
            }
            for set in SETS {
                let spec: &SyntheticLanguageSpec = if lang_of(set) == "parent" {
                    &parent
                } else {
                    &child
                };
                let n = cfg.corpus.sizes[set];
                let utts = synthesize_utterances(
                    spec,
                    n,
                    derive_seed(cfg.seed, &format!("gen-corpus/{set}")),
                )?;
                let mut entries = Vec::with_capacity(n);
                for (i, u) in utts.iter().enumerate() {
                    let id = format!("{set}-{i:05}");
                    ctx.write(format!("gen-corpus/{set}/{id}.wav"), encode_wav(&u.audio))?;
                    let labels: String = u
                        .frame_labels
                        .iter()
                        .map(|&l| format!("{}\n", spec.phones[l].name))
                        .collect();
                    ctx.write(format!("gen-corpus/{set}/{id}.labels"), labels)?;
                    entries.push(ManifestEntry {
                        utt_id: id.clone(),
                        wav_path: PathBuf::from(format!("{id}.wav")),
                        speaker_id: u.speaker_id.clone(),
                        transcript: u.transcript(),
                    });
                }
                write_manifest(ctx.path(format!("gen-corpus/{set}/manifest.tsv")), &entries)?;
            }
        }
        CorpusSource::Files {
            manifests,
            lexicons,
        } => {
            for (lang, (words, syllables)) in lexicons {
                let w = ctx.read_string(words)?;
                let s = ctx.read_string(syllables)?;
                read_lexicon(&w, &s)?;
                ctx.write(format!("gen-corpus/lang/{lang}/words.txt"), w)?;
                ctx.write(format!("gen-corpus/lang/{lang}/syllables.txt"), s)?;
            }
            for (set, manifest) in manifests {
                let text = ctx.read_string(manifest)?;
                let entries = parse_manifest(&text, manifest.parent())?;
                let mut out = Vec::with_capacity(entries.len());
                for e in entries {
                    let mut buf = parse_wav(&ctx.read(&e.wav_path)?)?;
                    if buf.sample_rate() != cfg.audio.sample_rate {
                        buf = resample(&buf, cfg.audio.sample_rate)?;
                    }
                    let name = format!("{}.wav", e.utt_id);
                    ctx.write(format!("gen-corpus/{set}/{name}"), encode_wav(&buf))?;
                    out.push(ManifestEntry {
                        wav_path: PathBuf::from(name),
                        ..e
                    });
                }
                write_manifest(ctx.path(format!("gen-corpus/{set}/manifest.tsv")), &out)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- prep

fn load_lexicon(ctx: &Ctx<'_>, dir: &str, lang: &str) -> Result<Lexicon, PipelineError> {
    let w = ctx.read_string(format!("{dir}/lang/{lang}/words.txt"))?;
    let s = ctx.read_string(format!("{dir}/lang/{lang}/syllables.txt"))?;
    Ok(read_lexicon(&w, &s)?)
}

/// Splits transcript tokens that are not lexicon words with the prefix-tree segmenter.
/// Uncovered symbols become the OOV word.
fn normalize_transcripts(lexicon: &Lexicon, transcripts: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut counts: HashMap<&str, f64> = lexicon.words().map(|w| (w, 1.0)).collect();
    for t in transcripts {
        for w in t {
            if let Some(c) = counts.get_mut(w.as_str()) {
                *c += 1.0;
            }
        }
    }
    let total: f64 = counts.values().sum();
    let unigrams: HashMap<String, f64> = counts
        .iter()
        .map(|(w, c)| (w.to_string(), (c / total).ln()))
        .collect();
    let trie = WordTrie::new(lexicon.words(), &unigrams);
    transcripts
        .iter()
        .map(|t| {
            t.iter()
                .flat_map(|w| {
                    if lexicon.contains(w) {
                        vec![w.clone()]
                    } else {
                        trie.segment(w)
                            .0
                            .into_iter()
                            .map(|s| match s {
                                Segment::Word(w) => w,
                                Segment::Oov(_) => OOV_WORD.to_string(),
                            })
                            .collect()
                    }
                })
                .collect()
        })
        .collect()
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn read_set_manifest(ctx: &Ctx<'_>, set: &str) -> Result<Vec<ManifestEntry>, PipelineError> {
    let text = ctx.read_string(format!("gen-corpus/{set}/manifest.tsv"))?;
    Ok(parse_manifest(&text, None)?)
}

/// GMM features (CMN'd 13 MFCC + 3 pitch) and network features (CMN'd 39 MFCC + 4 pitch).
pub(crate) fn extract_features(
    buf: &AudioBuffer,
) -> Result<(FeatureMatrix, FeatureMatrix), PipelineError> {
    let mfcc = apply_cmn(&compute_mfcc(buf, &MfccConfig::default())?);
    let hires = apply_cmn(&compute_mfcc(buf, &MfccConfig::hires())?);
    let pitch = compute_pitch(buf, 4, &PitchConfig::default())?;
    let pitch3 = FeatureMatrix::with_geometry(
        pitch.values().slice(s![.., ..3]).to_owned(),
        pitch.frame_shift_ms,
        pitch.frame_length_ms,
    )?;
    Ok((
        FeatureMatrix::hstack(&[&mfcc, &pitch3])?,
        FeatureMatrix::hstack(&[&hires, &pitch])?,
    ))
}

fn prep(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let mut lexicons = BTreeMap::new();
    for lang in LANGUAGES {
        let lex = load_lexicon(ctx, "gen-corpus", lang)?;
        ctx.write(format!("prep/lang/{lang}/words.txt"), lex.format_words())?;
        ctx.write(
            format!("prep/lang/{lang}/syllables.txt"),
            lex.format_syllables(),
        )?;
        let train = read_set_manifest(ctx, &format!("{lang}_train"))?;
        let text: Vec<Vec<String>> = train.iter().map(|e| tokens(&e.transcript)).collect();
        let text = normalize_transcripts(&lex, &text);
        let lm = train_ngram(&text, cfg.lm.order, cfg.lm.smoothing)?;
        ctx.write(format!("prep/lang/{lang}/lm.arpa"), lm.to_arpa())?;
        lexicons.insert(lang, lex);
    }
    for set in SETS {
        let lex = &lexicons[lang_of(set)];
        let manifest = read_set_manifest(ctx, set)?;
        let augment = set.ends_with("_train");
        let transcripts: Vec<Vec<String>> =
            manifest.iter().map(|e| tokens(&e.transcript)).collect();
        let transcripts = normalize_transcripts(lex, &transcripts);
        let mut utts = Vec::new();
        let mut gmm_feats = Vec::new();
        let mut nnet_feats = Vec::new();
        for (e, words) in manifest.iter().zip(transcripts) {
            let mut buf =
                parse_wav(&ctx.read(format!("gen-corpus/{set}/{}", e.wav_path.display()))?)?;
            if buf.sample_rate() != cfg.audio.sample_rate {
                buf = resample(&buf, cfg.audio.sample_rate)?;
            }
            let copies: Vec<(String, AudioBuffer)> = if augment {
                cfg.audio
                    .speed_factors
                    .iter()
                    .map(|&f| {
                        let id = if f == 1.0 {
                            e.utt_id.clone()
                        } else {
                            format!("sp{f}-{}", e.utt_id)
                        };
                        Ok((id, speed_perturb(&buf, f)?))
                    })
                    .collect::<Result<_, PipelineError>>()?
            } else {
                vec![(e.utt_id.clone(), buf)]
            };
            for (id, mut b) in copies {
                if augment && cfg.audio.volume_perturb {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &format!("prep/volume/{id}"),
                    ));
                    let gain = rng.random_range(VOLUME_GAIN_RANGE.0..VOLUME_GAIN_RANGE.1);
                    b = volume_perturb(&b, gain)?.0;
                }
                let (g, h) = extract_features(&b)?;
                gmm_feats.push((id.clone(), g));
                nnet_feats.push((id.clone(), h));
                utts.push(UttInfo {
                    id,
                    speaker: e.speaker_id.clone(),
                    words: words.clone(),
                });
            }
        }
        ctx.write(format!("prep/{set}/utts.tsv"), format_utts(&utts))?;
        ctx.write(format!("prep/{set}/gmm.feats"), write_bundle(&gmm_feats))?;
        ctx.write(format!("prep/{set}/hires.feats"), write_bundle(&nnet_feats))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- train-gmm

struct PreparedSet {
    utts: Vec<UttInfo>,
    feats: Vec<FeatureMatrix>,
}

fn load_set(ctx: &Ctx<'_>, set: &str, kind: &str) -> Result<PreparedSet, PipelineError> {
    let utts_path = format!("prep/{set}/utts.tsv");
    let utts = parse_utts(&ctx.read_string(&utts_path)?, &ctx.path(&utts_path))?;
    let feats_path = format!("prep/{set}/{kind}.feats");
    let bundle = read_bundle(&ctx.read(&feats_path)?, &ctx.path(&feats_path))?;
    if bundle.len() != utts.len() || bundle.iter().zip(&utts).any(|((id, _), u)| id != &u.id) {
        return Err(malformed(
            ctx.path(&feats_path),
            "feature bundle does not match utts.tsv",
        ));
    }
    Ok(PreparedSet {
        utts,
        feats: bundle.into_iter().map(|(_, f)| f).collect(),
    })
}

/// Silence, the words' phones, silence.
fn phone_sequence(lex: &Lexicon, words: &[String]) -> Vec<usize> {
    let sil = lex
        .phone_index(SILENCE_PHONE)
        .expect("lexicon inventory starts with silence");
    let mut out = vec![sil];
    for w in words {
        out.extend(lex.word_phone_ids(w));
    }
    out.push(sil);
    out
}

fn lda_project(
    fm: &FeatureMatrix,
    context: usize,
    lda: &Array2<f64>,
) -> Result<FeatureMatrix, PipelineError> {
    Ok(splice_frames(fm, context, context).project(lda)?)
}

fn train_gmm(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    for lang in LANGUAGES {
        let lex = load_lexicon(ctx, "prep", lang)?;
        let phones = lex.phones().to_vec();
        let set = load_set(ctx, &format!("{lang}_train"), "gmm")?;
        let seqs: Vec<Vec<usize>> = set
            .utts
            .iter()
            .map(|u| phone_sequence(&lex, &u.words))
            .collect();
        let utts: Vec<TrainUtterance<'_>> = set
            .utts
            .iter()
            .zip(&set.feats)
            .zip(&seqs)
            .map(|((u, f), p)| TrainUtterance {
                id: &u.id,
                features: f,
                phones: p,
            })
            .collect();
        let mono = train_monophone(&utts, &phones, &cfg.gmm.mono)?;

        let index: HashMap<&str, usize> = set
            .utts
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect();
        let spliced: Vec<FeatureMatrix> = mono
            .alignments
            .iter()
            .map(|a| {
                splice_frames(
                    &set.feats[index[a.utt_id.as_str()]],
                    cfg.gmm.lda_context,
                    cfg.gmm.lda_context,
                )
            })
            .collect();
        let labels: Vec<Vec<usize>> = mono.alignments.iter().map(alignment_to_targets).collect();
        let lda_dim = cfg.gmm.lda_dim.min(spliced[0].dims());
        let lda = estimate_lda(&spliced, &labels, lda_dim)?;
        drop(spliced);
        let projected: Vec<FeatureMatrix> = set
            .feats
            .iter()
            .map(|f| lda_project(f, cfg.gmm.lda_context, &lda))
            .collect::<Result<_, _>>()?;
        let proj_utts: Vec<TrainUtterance<'_>> = utts
            .iter()
            .zip(&projected)
            .map(|(u, f)| TrainUtterance { features: f, ..*u })
            .collect();
        let lda_cfg = MonophoneConfig {
            num_passes: cfg.gmm.lda_passes,
            ..cfg.gmm.mono.clone()
        };
        let fin = train_monophone_from_alignments(&proj_utts, &phones, &mono.alignments, &lda_cfg)?;

        let dir = format!("train-gmm/{lang}");
        ctx.write(format!("{dir}/mono.mdl"), mono.model.to_bytes())?;
        ctx.write(format!("{dir}/lda.mat"), write_matrix(&lda))?;
        ctx.write(format!("{dir}/final.mdl"), fin.model.to_bytes())?;
        let dump: String = fin.alignments.iter().map(|a| a.dump(&phones)).collect();
        ctx.write(format!("{dir}/ali_train.txt"), dump)?;
        let mut passes = String::from("stage,pass,log_prob\n");
        for (name, lps) in [("mono", &mono.pass_log_probs), ("lda", &fin.pass_log_probs)] {
            for (i, lp) in lps.iter().enumerate() {
                let _ = writeln!(passes, "{name},{},{lp:.6}", i + 1);
            }
        }
        ctx.write(format!("{dir}/passes.csv"), passes)?;
        let skipped: String = fin.skipped.iter().map(|s| format!("{s}\n")).collect();
        ctx.write(format!("{dir}/skipped.txt"), skipped)?;

        let dev = load_set(ctx, &format!("{lang}_dev"), "gmm")?;
        let mut dev_dump = String::new();
        for (u, f) in dev.utts.iter().zip(&dev.feats) {
            let proj = lda_project(f, cfg.gmm.lda_context, &lda)?;
            match viterbi_align(&fin.model, &proj, &phone_sequence(&lex, &u.words), &u.id) {
                Ok(a) => dev_dump += &a.dump(&phones),
                Err(GmmError::Infeasible { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        ctx.write(format!("{dir}/ali_dev.txt"), dev_dump)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- train-ivector

fn mfcc_part(fm: &FeatureMatrix) -> Result<FeatureMatrix, PipelineError> {
    let d = MfccConfig::hires().output_dims();
    Ok(FeatureMatrix::with_geometry(
        fm.values().slice(s![.., ..d]).to_owned(),
        fm.frame_shift_ms,
        fm.frame_length_ms,
    )?)
}

fn train_ivector(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let ic = &cfg.ivector;
    let mut extractors = BTreeMap::new();
    for lang in LANGUAGES {
        let set = load_set(ctx, &format!("{lang}_train"), "hires")?;
        let feats: Vec<FeatureMatrix> =
            set.feats.iter().map(mfcc_part).collect::<Result<_, _>>()?;
        let total: usize = feats.iter().map(FeatureMatrix::frames).sum();
        let stride = total.div_ceil(UBM_MAX_FRAMES).max(1);
        let views: Vec<_> = feats
            .iter()
            .map(|f| f.values().slice(s![..;stride, ..]))
            .collect();
        let pooled =
            ndarray::concatenate(Axis(0), &views).map_err(|e| malformed(ctx.path("prep"), e))?;
        let ubm = train_ubm(
            &pooled,
            ic.ubm_components,
            ic.ubm_iters,
            derive_seed(cfg.seed, &format!("train-ivector/{lang}/ubm")),
        )?;
        let stats = feats
            .iter()
            .map(|f| accumulate_stats(&ubm, f))
            .collect::<Result<Vec<_>, _>>()?;
        let tv = train_total_variability(
            &stats,
            &ubm,
            ic.dim,
            ic.tv_iters,
            derive_seed(cfg.seed, &format!("train-ivector/{lang}/tv")),
        )?;
        ctx.write(
            format!("train-ivector/{lang}/extractor.bin"),
            tv.extractor.to_bytes(),
        )?;
        let mut obj = String::from("iter,objective\n");
        for (i, o) in tv.objective.iter().enumerate() {
            let _ = writeln!(obj, "{i},{o:.6}");
        }
        ctx.write(format!("train-ivector/{lang}/objective.csv"), obj)?;
        extractors.insert(lang, tv.extractor);
    }
    for set in SETS {
        let source = match (lang_of(set), ic.source) {
            ("child", IvectorSource::Child) => "child",
            _ => "parent",
        };
        let ex: &IvectorExtractor = &extractors[source];
        let data = load_set(ctx, set, "hires")?;
        let mut items = Vec::with_capacity(data.utts.len());
        for (u, f) in data.utts.iter().zip(&data.feats) {
            items.push((u.id.as_str(), extract_ivector(ex, &mfcc_part(f)?)?));
        }
        let text = format_ivectors(items.iter().map(|(id, v)| (*id, v.as_slice())));
        ctx.write(format!("train-ivector/{set}.ivec"), text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- network training

fn load_gmm(ctx: &Ctx<'_>, lang: &str) -> Result<AcousticModelGmm, PipelineError> {
    Ok(AcousticModelGmm::from_bytes(
        &ctx.read(format!("train-gmm/{lang}/final.mdl"))?,
    )?)
}

fn load_alignments(
    ctx: &Ctx<'_>,
    lang: &str,
    which: &str,
    phones: &[String],
) -> Result<Vec<Alignment>, PipelineError> {
    let text = ctx.read_string(format!("train-gmm/{lang}/ali_{which}.txt"))?;
    Ok(Alignment::parse_dump(&text, phones)?)
}

/// Network inputs (hires features + pitch + i-vector) for a set, in set order.
fn nnet_inputs(ctx: &Ctx<'_>, set: &str) -> Result<Vec<(String, FeatureMatrix)>, PipelineError> {
    let data = load_set(ctx, set, "hires")?;
    let ivec_path = format!("train-ivector/{set}.ivec");
    let ivecs: HashMap<String, Vec<f64>> = parse_ivectors(&ctx.read_string(&ivec_path)?)?
        .into_iter()
        .collect();
    data.utts
        .iter()
        .zip(data.feats)
        .map(|(u, f)| {
            let iv = ivecs.get(&u.id).ok_or_else(|| {
                malformed(ctx.path(&ivec_path), format!("no i-vector for {}", u.id))
            })?;
            let rep = Array2::from_shape_fn((f.frames(), iv.len()), |(_, j)| iv[j]);
            let rep = FeatureMatrix::with_geometry(rep, f.frame_shift_ms, f.frame_length_ms)?;
            Ok((u.id.clone(), FeatureMatrix::hstack(&[&f, &rep])?))
        })
        .collect()
}

/// Inputs paired with alignment targets; utterances without a usable alignment are dropped.
fn supervised(
    inputs: Vec<(String, FeatureMatrix)>,
    alignments: &[Alignment],
) -> Vec<(FeatureMatrix, Vec<usize>)> {
    let by_id: HashMap<&str, &Alignment> =
        alignments.iter().map(|a| (a.utt_id.as_str(), a)).collect();
    inputs
        .into_iter()
        .filter_map(|(id, f)| {
            let a = by_id.get(id.as_str())?;
            (a.len() == f.frames()).then(|| (f, alignment_to_targets(a)))
        })
        .collect()
}

fn training_data(
    ctx: &Ctx<'_>,
    lang: &str,
) -> Result<
    (
        AcousticModelGmm,
        Vec<(FeatureMatrix, Vec<usize>)>,
        Vec<(FeatureMatrix, Vec<usize>)>,
    ),
    PipelineError,
> {
    let gmm = load_gmm(ctx, lang)?;
    let train_ali = load_alignments(ctx, lang, "train", gmm.phones())?;
    let dev_ali = load_alignments(ctx, lang, "dev", gmm.phones())?;
    let train = supervised(nnet_inputs(ctx, &format!("{lang}_train"))?, &train_ali);
    let dev = supervised(nnet_inputs(ctx, &format!("{lang}_dev"))?, &dev_ali);
    Ok((gmm, train, dev))
}

/// Log-probabilities go to `log.csv`; wall-clock times, which never reproduce, go to
/// `timing.csv` (left out of output hashes).
fn write_train_log(ctx: &Ctx<'_>, dir: &str, log: &TrainLog) -> Result<(), PipelineError> {
    let mut curve = String::from("iter,train_logprob,valid_logprob\n");
    let mut timing = String::from("iter,wall_ms\n");
    for r in &log.records {
        let _ = writeln!(
            curve,
            "{},{:.6},{:.6}",
            r.iter, r.train_logprob, r.valid_logprob
        );
        let _ = writeln!(timing, "{},{:.3}", r.iter, r.wall_ms);
    }
    ctx.write(format!("{dir}/log.csv"), curve)?;
    ctx.write(format!("{dir}/{VOLATILE_FILE}"), timing)
}

fn as_pairs(data: &[(FeatureMatrix, Vec<usize>)]) -> Vec<(&FeatureMatrix, &[usize])> {
    data.iter().map(|(f, t)| (f, t.as_slice())).collect()
}

fn train_parent(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let (gmm, train, dev) = training_data(ctx, "parent")?;
    let input_dim = train
        .first()
        .map(|(f, _)| f.dims())
        .ok_or(crate::nnet::NnetError::EmptyTrainSet)?;
    let specs = tdnn_lstm_specs(
        cfg.nnet.tdnn_dim,
        cfg.nnet.lstm_cell,
        cfg.nnet.lstm_proj,
        gmm.num_pdfs(),
    );
    let net = Network::random(
        input_dim,
        &specs,
        derive_seed(cfg.seed, "train-parent/init"),
    )?;
    let tcfg = crate::nnet::TrainConfig {
        seed: derive_seed(cfg.seed, "train-parent/sgd"),
        ..cfg.train.clone()
    };
    let (net, log) = train_sgd(net, &as_pairs(&train), &as_pairs(&dev), &tcfg)?;
    ctx.write("train-parent/final.nnet", net.to_bytes())?;
    write_train_log(ctx, "train-parent", &log)?;
    Ok(())
}

fn transfer_train(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let parent = Network::from_bytes(&ctx.read("train-parent/final.nnet")?)?;
    let (gmm, train, dev) = training_data(ctx, "child")?;
    let input_dim = train
        .first()
        .map(|(f, _)| f.dims())
        .ok_or(crate::nnet::NnetError::EmptyTrainSet)?;
    let specs = tdnn_lstm_specs(
        cfg.nnet.tdnn_dim,
        cfg.nnet.lstm_cell,
        cfg.nnet.lstm_proj,
        gmm.num_pdfs(),
    );
    let init_seed = derive_seed(cfg.seed, "transfer-train/init");
    let tcfg = crate::nnet::TrainConfig {
        seed: derive_seed(cfg.seed, "transfer-train/sgd"),
        ..cfg.train.clone()
    };
    let (train, dev) = (as_pairs(&train), as_pairs(&dev));
    for cc in child_configs(cfg) {
        let net = if cc.k == 0 && cc.name == BASELINE_CONFIG {
            Network::random(input_dim, &specs, init_seed)?
        } else {
            transfer_weights(
                &parent,
                &specs,
                &TransferConfig {
                    k: cc.k,
                    x: cc.x,
                    seed: init_seed,
                },
            )?
        };
        let (net, log) = train_sgd(net, &train, &dev, &tcfg)?;
        ctx.write(
            format!("transfer-train/{}/final.nnet", cc.name),
            net.to_bytes(),
        )?;
        write_train_log(ctx, &format!("transfer-train/{}", cc.name), &log)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- decode / score

fn decode_stage(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let lex = load_lexicon(ctx, "prep", "child")?;
    let lm = NgramLm::from_arpa(&ctx.read_string("prep/lang/child/lm.arpa")?)?;
    let gmm = load_gmm(ctx, "child")?;
    let graph = build_graph(&lex, &lm, &gmm)?;
    let train_ali = load_alignments(ctx, "child", "train", gmm.phones())?;
    let targets: Vec<Vec<usize>> = train_ali.iter().map(alignment_to_targets).collect();
    let priors = pdf_priors(targets.iter().map(Vec::as_slice), gmm.num_pdfs());
    ctx.write(
        "decode/priors.bin",
        write_vector(priors.as_slice().expect("contiguous")),
    )?;
    let test = nnet_inputs(ctx, "child_test")?;

    let run =
        |name: &str, log_post: &dyn Fn(&FeatureMatrix) -> Result<Array2<f64>, PipelineError>| {
            let mut hyps = Vec::with_capacity(test.len());
            for (id, f) in &test {
                let ll = posteriors_to_loglikes(&log_post(f)?, &priors);
                hyps.push((id.as_str(), decode(&graph, &ll, &cfg.decode)?.words()));
            }
            let text = format_hypotheses(hyps.iter().map(|(id, w)| (*id, w.as_slice())));
            ctx.write(format!("decode/{name}/hyp.txt"), text)
        };
    for cc in child_configs(cfg) {
        let net =
            Network::from_bytes(&ctx.read(format!("transfer-train/{}/final.nnet", cc.name))?)?;
        run(&cc.name, &|f| Ok(net.log_posteriors(f.view())?))?;
    }
    let uniform = -(gmm.num_pdfs() as f64).ln();
    run(CHANCE_CONFIG, &|f| {
        Ok(Array2::from_elem((f.frames(), gmm.num_pdfs()), uniform))
    })?;
    Ok(())
}

/// Per-config error counts in characters and words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ScoreSummary {
    pub chars: ErrorCounts,
    pub words: ErrorCounts,
}

pub(crate) const SUMMARY_HEADER: &str =
    "config\tS\tD\tI\tN\tcer\tword_S\tword_D\tword_I\tword_N\twer";

fn score_stage(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let refs: BTreeMap<String, Vec<String>> = read_set_manifest(ctx, "child_test")?
        .into_iter()
        .map(|e| (e.utt_id, tokens(&e.transcript)))
        .collect();
    let mut names: Vec<String> = child_configs(ctx.cfg).into_iter().map(|c| c.name).collect();
    names.push(CHANCE_CONFIG.to_string());
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for name in names {
        let path = format!("decode/{name}/hyp.txt");
        let hyps: HashMap<String, Vec<String>> = parse_hypotheses(&ctx.read_string(&path)?)?
            .into_iter()
            .collect();
        let mut table = String::from("utt\tS\tD\tI\tN\tcer\tword_S\tword_D\tword_I\tword_N\twer\n");
        let mut total = ScoreSummary {
            chars: ErrorCounts::default(),
            words: ErrorCounts::default(),
        };
        for (id, r) in &refs {
            let empty = Vec::new();
            let h = hyps.get(id).unwrap_or(&empty);
            let c = score_errors(r, h, Unit::Character)?;
            let w = score_errors(r, h, Unit::Word)?;
            let _ = writeln!(table, "{id}\t{}", counts_row(&c, &w));
            total.chars = total.chars + c;
            total.words = total.words + w;
        }
        let _ = writeln!(table, "TOTAL\t{}", counts_row(&total.chars, &total.words));
        ctx.write(format!("score/{name}.txt"), table)?;
        let _ = writeln!(
            summary,
            "{name}\t{}",
            counts_row(&total.chars, &total.words)
        );
    }
    ctx.write("score/summary.tsv", summary)?;
    Ok(())
}

fn counts_row(c: &ErrorCounts, w: &ErrorCounts) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{:.6}",
        c.s,
        c.d,
        c.i,
        c.n,
        c.rate(),
        w.s,
        w.d,
        w.i,
        w.n,
        w.rate()
    )
}

pub(crate) fn parse_summary(
    text: &str,
    path: &Path,
) -> Result<Vec<(String, ScoreSummary)>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || malformed(path.to_path_buf(), format!("summary line {}", i + 1));
        if f.len() != 11 {
            return Err(bad());
        }
        let n = |j: usize| f[j].parse::<usize>().map_err(|_| bad());
        out.push((
            f[0].to_string(),
            ScoreSummary {
                chars: ErrorCounts {
                    s: n(1)?,
                    d: n(2)?,
                    i: n(3)?,
                    n: n(4)?,
                },
                words: ErrorCounts {
                    s: n(6)?,
                    d: n(7)?,
                    i: n(8)?,
                    n: n(9)?,
                },
            },
        ));
    }
    Ok(out)
}
