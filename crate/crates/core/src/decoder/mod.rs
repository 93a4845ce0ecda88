//! Token-passing Viterbi decoding over a word loop with bigram scores and optional
//! silence, n-best rescoring with the full n-gram model, and error-rate scoring.

mod score;

pub use score::{score_errors, ErrorCounts, Unit};

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::gmm::{AcousticModelGmm, STATES_PER_PHONE};
use crate::lexlm::{Lexicon, NgramLm, SILENCE_PHONE};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("lexicon has no words")]
    EmptyLexicon,
    #[error("no input frames")]
    EmptyInput,
    #[error("phone `{0}` is not in the acoustic model")]
    MissingPhone(String),
    #[error("likelihood matrix has {got} pdf columns, the graph needs {needed}")]
    PdfColumns { needed: usize, got: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("malformed hypothesis file: {0}")]
    Format(String),
}

/// Log-probability of taking (or skipping) the optional silence at a word boundary.
pub const SILENCE_LOG_PROB: f64 = -std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam: f64,
    pub acoustic_scale: f64,
    pub lm_scale: f64,
    /// Distinct word histories kept per state; the final list is rescored with the full LM.
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 16.0,
            acoustic_scale: 0.1,
            lm_scale: 1.0,
            nbest: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Owner {
    Word(usize),
    /// Silence chain entered with this LM context (0 = sentence start, 1 + w = word w).
    Silence(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct State {
    pdf: usize,
    self_loop: f64,
    forward: f64,
    owner: Owner,
    /// Last state of its chain.
    last: bool,
}

/// Word-loop graph. Acoustic scale is applied at decode time.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeGraph {
    words: Vec<String>,
    states: Vec<State>,
    /// First state of each pronunciation chain and its word.
    word_starts: Vec<(usize, usize)>,
    /// First state of the silence chain per context.
    sil_starts: Vec<usize>,
    /// ln p(w | ctx), ctx 0 = <s>, 1 + i = word i; column `words.len()` is </s>.
    bigram: Array2<f64>,
    lm: NgramLm,
    num_pdfs: usize,
}

fn chain_states(
    am: &AcousticModelGmm,
    phones: &[String],
    owner: Owner,
) -> Result<Vec<State>, DecodeError> {
    let mut out = Vec::new();
    for name in phones {
        let p = am
            .phone_index(name)
            .ok_or_else(|| DecodeError::MissingPhone(name.clone()))?;
        for s in 0..STATES_PER_PHONE {
            let pdf = AcousticModelGmm::pdf_id(p, s);
            let (self_loop, forward) = am.transition(pdf);
            out.push(State {
                pdf,
                self_loop,
                forward,
                owner,
                last: false,
            });
        }
    }
    if let Some(s) = out.last_mut() {
        s.last = true;
    }
    Ok(out)
}

/// Builds the word loop from every lexicon word (all pronunciations), a silence chain per
/// LM context, and the bigram view of `lm`.
pub fn build_graph(
    lexicon: &Lexicon,
    lm: &NgramLm,
    am: &AcousticModelGmm,
) -> Result<DecodeGraph, DecodeError> {
    let words: Vec<String> = lexicon.words().map(str::to_string).collect();
    if words.is_empty() {
        return Err(DecodeError::EmptyLexicon);
    }
    let mut states = Vec::new();
    let mut word_starts = Vec::new();
    for (wi, w) in words.iter().enumerate() {
        for pron in lexicon.word_to_phones(w) {
            word_starts.push((states.len(), wi));
            states.extend(chain_states(am, &pron, Owner::Word(wi))?);
        }
    }
    let sil = [SILENCE_PHONE.to_string()];
    let mut sil_starts = Vec::new();
    for ctx in 0..=words.len() {
        sil_starts.push(states.len());
        states.extend(chain_states(am, &sil, Owner::Silence(ctx))?);
    }
    let ids: Vec<u32> = words.iter().map(|w| lm.word_id(w)).collect();
    let ctx_ids: Vec<u32> = std::iter::once(lm.bos())
        .chain(ids.iter().copied())
        .collect();
    let bigram = Array2::from_shape_fn((words.len() + 1, words.len() + 1), |(c, w)| {
        let target = if w == words.len() { lm.eos() } else { ids[w] };
        lm.ln_prob_ids(&[ctx_ids[c]], target)
    });
    Ok(DecodeGraph {
        words,
        states,
        word_starts,
        sil_starts,
        bigram,
        lm: lm.clone(),
        num_pdfs: am.num_pdfs(),
    })
}

impl DecodeGraph {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Emitting states of the chain for word `w` (its first pronunciation).
    pub fn word_chain_len(&self, w: &str) -> Option<usize> {
        let wi = self.words.iter().position(|x| x == w)?;
        Some(
            self.states
                .iter()
                .filter(|s| s.owner == Owner::Word(wi))
                .count()
                / self.prons_of(wi),
        )
    }

    fn prons_of(&self, wi: usize) -> usize {
        self.word_starts.iter().filter(|(_, w)| *w == wi).count()
    }

    /// Bigram arc weight ln p(w | prev) before LM scaling; `prev = None` is sentence start.
    pub fn lm_arc(&self, prev: Option<&str>, w: Option<&str>) -> Option<f64> {
        let c = match prev {
            None => 0,
            Some(p) => 1 + self.words.iter().position(|x| x == p)?,
        };
        let col = match w {
            None => self.words.len(),
            Some(x) => self.words.iter().position(|y| y == x)?,
        };
        Some(self.bigram[[c, col]])
    }

    fn bigram_sentence(&self, words: &[usize]) -> f64 {
        let mut ctx = 0;
        let mut total = 0.0;
        for &w in words {
            total += self.bigram[[ctx, w]];
            ctx = 1 + w;
        }
        total + self.bigram[[ctx, self.words.len()]]
    }
}

#[derive(Debug, Clone, Copy)]
struct Token {
    score: f64,
    hist: u32,
}

/// Interned word histories: id 0 is empty, each other id is (word, previous id).
struct Histories {
    links: Vec<(usize, u32)>,
    index: HashMap<(usize, u32), u32>,
}

impl Histories {
    fn new() -> Self {
        Self {
            links: vec![(usize::MAX, 0)],
            index: HashMap::new(),
        }
    }

    fn push(&mut self, word: usize, prev: u32) -> u32 {
        *self.index.entry((word, prev)).or_insert_with(|| {
            self.links.push((word, prev));
            (self.links.len() - 1) as u32
        })
    }

    fn words(&self, mut id: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while id != 0 {
            let (w, prev) = self.links[id as usize];
            out.push(w);
            id = prev;
        }
        out.reverse();
        out
    }
}

/// Keeps the `n` best tokens with distinct histories.
fn merge(list: &mut Vec<Token>, tok: Token, n: usize) {
    if !tok.score.is_finite() {
        return;
    }
    if let Some(t) = list.iter_mut().find(|t| t.hist == tok.hist) {
        if tok.score > t.score {
            t.score = tok.score;
        }
    } else if list.len() < n {
        list.push(tok);
    } else {
        let (worst, ws) = list
            .iter()
            .enumerate()
            .map(|(i, t)| (i, t.score))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if tok.score > ws {
            list[worst] = tok;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// Graph score (scaled acoustics + scaled bigram + silence) before rescoring.
    pub graph_score: f64,
    /// Score with the bigram replaced by the full-order LM.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Rescored n-best list, best first.
    pub nbest: Vec<Hypothesis>,
}

impl DecodeResult {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.nbest.first()
    }

    pub fn words(&self) -> Vec<String> {
        self.best().map(|h| h.words.clone()).unwrap_or_default()
    }
}

/// Frame-synchronous Viterbi token passing. `loglikes` holds per-frame acoustic
/// log-likelihoods (or scaled posteriors) indexed by pdf-id.
pub fn decode(
    graph: &DecodeGraph,
    loglikes: &Array2<f64>,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    if loglikes.nrows() == 0 {
        return Err(DecodeError::EmptyInput);
    }
    if loglikes.ncols() < graph.num_pdfs {
        return Err(DecodeError::PdfColumns {
            needed: graph.num_pdfs,
            got: loglikes.ncols(),
        });
    }
    if cfg.nbest == 0 || cfg.beam.is_nan() || cfg.beam < 0.0 {
        return Err(DecodeError::Config("need nbest >= 1 and beam >= 0".into()));
    }
    let n = cfg.nbest;
    let ac = cfg.acoustic_scale;
    let nw = graph.words.len();
    let num_states = graph.states.len();
    let mut hist = Histories::new();
    let mut tokens: Vec<Vec<Token>> = vec![Vec::new(); num_states];
    let mut next: Vec<Vec<Token>> = vec![Vec::new(); num_states];
    // boundary entries for frame 0: sentence start, with or without leading silence
    let start = Token {
        score: SILENCE_LOG_PROB,
        hist: 0,
    };
    let mut ctx_ready: Vec<Vec<Token>> = vec![Vec::new(); nw + 1];
    let mut sil_entry: Vec<Vec<Token>> = vec![Vec::new(); nw + 1];
    ctx_ready[0].push(start);
    sil_entry[0].push(start);
    let frames = loglikes.nrows();
    for t in 0..=frames {
        if t > 0 {
            // word and silence exits after frame t-1
            for c in ctx_ready.iter_mut().chain(sil_entry.iter_mut()) {
                c.clear();
            }
            for (s, st) in graph.states.iter().enumerate() {
                if !st.last {
                    continue;
                }
                for tok in &tokens[s] {
                    let score = tok.score + ac * st.forward;
                    match st.owner {
                        Owner::Word(w) => {
                            let h = hist.push(w, tok.hist);
                            let skip = Token {
                                score: score + SILENCE_LOG_PROB,
                                hist: h,
                            };
                            merge(&mut ctx_ready[1 + w], skip, n);
                            merge(&mut sil_entry[1 + w], skip, n);
                        }
                        Owner::Silence(c) => merge(
                            &mut ctx_ready[c],
                            Token {
                                score,
                                hist: tok.hist,
                            },
                            n,
                        ),
                    }
                }
            }
        }
        if t == frames {
            break;
        }
        let emit = loglikes.row(t);
        for list in next.iter_mut() {
            list.clear();
        }
        for (s, st) in graph.states.iter().enumerate() {
            for tok in &tokens[s] {
                merge(
                    &mut next[s],
                    Token {
                        score: tok.score + ac * st.self_loop,
                        hist: tok.hist,
                    },
                    n,
                );
                if !st.last {
                    let adv = Token {
                        score: tok.score + ac * st.forward,
                        hist: tok.hist,
                    };
                    merge(&mut next[s + 1], adv, n);
                }
            }
        }
        for &(s, w) in &graph.word_starts {
            for (c, ready) in ctx_ready.iter().enumerate() {
                let lm = cfg.lm_scale * graph.bigram[[c, w]];
                for tok in ready {
                    merge(
                        &mut next[s],
                        Token {
                            score: tok.score + lm,
                            hist: tok.hist,
                        },
                        n,
                    );
                }
            }
        }
        for (c, entries) in sil_entry.iter().enumerate() {
            for &tok in entries {
                merge(&mut next[graph.sil_starts[c]], tok, n);
            }
        }
        let mut best = f64::NEG_INFINITY;
        for (s, list) in next.iter_mut().enumerate() {
            let e = ac * emit[graph.states[s].pdf];
            for tok in list.iter_mut() {
                tok.score += e;
                best = best.max(tok.score);
            }
        }
        let floor = best - cfg.beam;
        for list in next.iter_mut() {
            list.retain(|t| t.score >= floor);
        }
        std::mem::swap(&mut tokens, &mut next);
        // entries only live for one frame; silence from sentence start only at frame 0
        for c in ctx_ready.iter_mut().chain(sil_entry.iter_mut()) {
            c.clear();
        }
    }
    let mut finals: Vec<Token> = Vec::new();
    for (c, ready) in ctx_ready.iter().enumerate() {
        let lm = cfg.lm_scale * graph.bigram[[c, nw]];
        for tok in ready {
            merge(
                &mut finals,
                Token {
                    score: tok.score + lm,
                    hist: tok.hist,
                },
                n,
            );
        }
    }
    let mut nbest: Vec<Hypothesis> = finals
        .into_iter()
        .map(|tok| {
            let ids = hist.words(tok.hist);
            let words: Vec<String> = ids.iter().map(|&w| graph.words[w].clone()).collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let full = graph.lm.sentence_ln_prob(&refs);
            let score = tok.score + cfg.lm_scale * (full - graph.bigram_sentence(&ids));
            Hypothesis {
                words,
                graph_score: tok.score,
                score,
            }
        })
        .collect();
    nbest.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.graph_score.total_cmp(&a.graph_score))
    });
    Ok(DecodeResult { nbest })
}

/// Converts network log-posteriors into scaled likelihoods by subtracting log priors.
pub fn posteriors_to_loglikes(log_post: &Array2<f64>, priors: &Array1<f64>) -> Array2<f64> {
    let log_prior = priors.mapv(f64::ln);
    log_post - &log_prior
}

/// pdf priors from target counts, add-one smoothed.
pub fn pdf_priors<'a>(
    targets: impl IntoIterator<Item = &'a [usize]>,
    num_pdfs: usize,
) -> Array1<f64> {
    let mut counts = Array1::from_elem(num_pdfs, 1.0);
    for seq in targets {
        for &p in seq {
            counts[p] += 1.0;
        }
    }
    let total = counts.sum();
    counts / total
}

/// `utt-id w1 w2 ...` lines.
pub fn format_hypotheses<'a>(items: impl IntoIterator<Item = (&'a str, &'a [String])>) -> String {
    let mut out = String::new();
    for (id, words) in items {
        let _ = write!(out, "{id}");
        for w in words {
            let _ = write!(out, " {w}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_hypotheses(text: &str) -> Result<Vec<(String, Vec<String>)>, DecodeError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let id = it
                .next()
                .ok_or_else(|| DecodeError::Format("empty line".into()))?;
            Ok((id.to_string(), it.map(str::to_string).collect()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{linear_viterbi, DiagGmm};
    use crate::lexlm::{compile_lexicon, train_ngram, Smoothing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(k: &str, v: &str) -> (String, Vec<String>) {
        (
            k.to_string(),
            v.split_whitespace().map(str::to_string).collect(),
        )
    }

    /// Lexicon over phones x, y, z with words given as `word syllable-phones`.
    fn setup(words: &[(&str, &str)], lm_text: &[&str]) -> (Lexicon, NgramLm, AcousticModelGmm) {
        let sylls: Vec<_> = words.iter().map(|(w, p)| e(&format!("s_{w}"), p)).collect();
        let wl: Vec<_> = words.iter().map(|(w, _)| e(w, &format!("s_{w}"))).collect();
        let lex = compile_lexicon(&wl, &sylls).unwrap();
        let corpus: Vec<Vec<String>> = lm_text
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        let lm = train_ngram(&corpus, 2, Smoothing::KneserNey).unwrap();
        let phones = lex.phones().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gmm = DiagGmm::new(
            Array1::from_elem(1, 1.0),
            Array2::zeros((1, 1)),
            Array2::ones((1, 1)),
        )
        .unwrap();
        let np = phones.len() * STATES_PER_PHONE;
        let trans = (0..np)
            .map(|_| {
                let p: f64 = rng.random_range(0.2..0.8);
                (p.ln(), (1.0 - p).ln())
            })
            .collect();
        let am = AcousticModelGmm::new(phones, vec![gmm; np], trans).unwrap();
        (lex, lm, am)
    }

    /// Best score over word sequences up to `max_words` and all silence placements.
    fn brute_force(
        graph: &DecodeGraph,
        am: &AcousticModelGmm,
        lex: &Lexicon,
        ll: &Array2<f64>,
        cfg: &DecodeConfig,
        max_words: usize,
    ) -> f64 {
        let nw = graph.words.len();
        let mut best = f64::NEG_INFINITY;
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=max_words {
            let mut more = Vec::new();
            for s in seqs.iter().filter(|s| s.len() == len - 1) {
                for w in 0..nw {
                    let mut x = s.clone();
                    x.push(w);
                    more.push(x);
                }
            }
            seqs.extend(more);
        }
        for seq in &seqs {
            for mask in 0..(1u32 << (seq.len() + 1)) {
                let mut phones: Vec<String> = Vec::new();
                for slot in 0..=seq.len() {
                    if slot > 0 {
                        phones.extend(lex.word_to_phones(&graph.words[seq[slot - 1]])[0].clone());
                    }
                    if mask >> slot & 1 == 1 {
                        phones.push(SILENCE_PHONE.to_string());
                    }
                }
                if phones.is_empty() {
                    continue;
                }
                let chain = chain_states(am, &phones, Owner::Silence(0)).unwrap();
                if chain.len() > ll.nrows() {
                    continue;
                }
                let emit = Array2::from_shape_fn((ll.nrows(), chain.len()), |(t, s)| {
                    cfg.acoustic_scale * ll[[t, chain[s].pdf]]
                });
                let sl: Vec<f64> = chain
                    .iter()
                    .map(|s| cfg.acoustic_scale * s.self_loop)
                    .collect();
                let fw: Vec<f64> = chain
                    .iter()
                    .map(|s| cfg.acoustic_scale * s.forward)
                    .collect();
                let Some((_, ac)) = linear_viterbi(&emit, &sl, &fw) else {
                    continue;
                };
                let score = ac
                    + (seq.len() + 1) as f64 * SILENCE_LOG_PROB
                    + cfg.lm_scale * graph.bigram_sentence(seq);
                best = best.max(score);
            }
        }
        best
    }

    #[test]
    fn exact_search_matches_brute_force() {
        let (lex, lm, am) = setup(
            &[("A", "x"), ("B", "y z"), ("C", "z")],
            &["A B", "B C A", "C"],
        );
        let graph = build_graph(&lex, &lm, &am).unwrap();
        let cfg = DecodeConfig {
            beam: f64::INFINITY,
            nbest: 1,
            acoustic_scale: 0.7,
            lm_scale: 1.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..60 {
            let frames = rng.random_range(3..=12);
            let ll = Array2::from_shape_simple_fn((frames, am.num_pdfs()), || {
                rng.random_range(-6.0..0.0)
            });
            let got = decode(&graph, &ll, &cfg).unwrap();
            let expect = brute_force(&graph, &am, &lex, &ll, &cfg, 4);
            let best = got.best().unwrap();
            assert!(
                (best.graph_score - expect).abs() < 1e-9,
                "case {case}: {} vs {expect}",
                best.graph_score
            );
        }
    }

    #[test]
    fn dominant_word_wins() {
        let (lex, lm, am) = setup(&[("A", "x"), ("B", "y")], &["A", "B"]);
        let graph = build_graph(&lex, &lm, &am).unwrap();
        let x = am.phone_index("x").unwrap();
        let mut ll = Array2::from_elem((9, am.num_pdfs()), -50.0);
        for t in 0..9 {
            ll[[t, AcousticModelGmm::pdf_id(x, t / 3)]] = 0.0;
        }
        let got = decode(&graph, &ll, &DecodeConfig::default()).unwrap();
        assert_eq!(got.words(), vec!["A"]);
    }

    #[test]
    fn graph_topology() {
        let (lex, lm, am) = setup(&[("A", "x y")], &["A A"]);
        let graph = build_graph(&lex, &lm, &am).unwrap();
        assert_eq!(graph.word_chain_len("A"), Some(6));
        assert!(
            (graph.lm_arc(Some("A"), Some("A")).unwrap() - lm.ln_prob(&["A"], "A")).abs() < 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ll = Array2::from_shape_simple_fn((20, am.num_pdfs()), || rng.random_range(-3.0..0.0));
        let got = decode(&graph, &ll, &DecodeConfig::default()).unwrap();
        assert!(got.words().iter().all(|w| w == "A"));
    }

    #[test]
    fn zero_beam_and_uniform_inputs_still_decode() {
        let (lex, lm, am) = setup(&[("A", "x"), ("B", "y z")], &["A B"]);
        let graph = build_graph(&lex, &lm, &am).unwrap();
        let ll = Array2::from_elem((15, am.num_pdfs()), -1.0);
        for beam in [0.0, 16.0] {
            let cfg = DecodeConfig {
                beam,
                ..DecodeConfig::default()
            };
            let got = decode(&graph, &ll, &cfg).unwrap();
            assert!(got.words().iter().all(|w| w == "A" || w == "B"));
        }
        assert!(matches!(
            decode(
                &graph,
                &Array2::zeros((0, am.num_pdfs())),
                &DecodeConfig::default()
            ),
            Err(DecodeError::EmptyInput)
        ));
    }

    #[test]
    fn rescoring_uses_full_order() {
        let (lex, _, am) = setup(&[("A", "x"), ("B", "y")], &["A"]);
        let corpus: Vec<Vec<String>> = ["A B A", "B B A", "A A B"]
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        let lm3 = train_ngram(&corpus, 3, Smoothing::KneserNey).unwrap();
        let graph = build_graph(&lex, &lm3, &am).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ll = Array2::from_shape_simple_fn((14, am.num_pdfs()), || rng.random_range(-2.0..0.0));
        let got = decode(&graph, &ll, &DecodeConfig::default()).unwrap();
        for h in &got.nbest {
            let refs: Vec<&str> = h.words.iter().map(String::as_str).collect();
            let ids: Vec<usize> = h
                .words
                .iter()
                .map(|w| graph.words.iter().position(|x| x == w).unwrap())
                .collect();
            let expect = h.graph_score + lm3.sentence_ln_prob(&refs) - graph.bigram_sentence(&ids);
            assert!((h.score - expect).abs() < 1e-9);
        }
        assert!(got.nbest.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn hypothesis_text_round_trip() {
        let words = vec!["A".to_string(), "B".to_string()];
        let text = format_hypotheses([("u1", words.as_slice()), ("u2", &[][..])]);
        let back = parse_hypotheses(&text).unwrap();
        assert_eq!(
            back,
            vec![("u1".to_string(), words), ("u2".to_string(), vec![])]
        );
    }
}
