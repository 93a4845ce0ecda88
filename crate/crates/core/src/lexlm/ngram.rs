use std::collections::{BTreeMap, HashMap};
use std::f64::consts::LN_10;
use std::fmt::Write as _;

use super::lexicon::OOV_WORD;
use super::LmError;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Absolute discount of the Kneser-Ney estimate.
pub const KN_DISCOUNT: f64 = 0.75;
/// Counts above this are used undiscounted by Good-Turing.
pub const GT_MAX_DISCOUNTED: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    KneserNey,
    GoodTuring,
}

impl std::str::FromStr for Smoothing {
    type Err = LmError;
    fn from_str(s: &str) -> Result<Self, LmError> {
        match s {
            "kn" | "kneser_ney" | "kneser-ney" => Ok(Smoothing::KneserNey),
            "gt" | "good_turing" | "good-turing" => Ok(Smoothing::GoodTuring),
            _ => Err(LmError::Format(format!("unknown smoothing `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    /// Natural-log probability; -inf for the sentence-begin unigram.
    logp: f64,
    /// Natural-log backoff weight when this n-gram is used as a context.
    bow: f64,
}

/// Backoff n-gram model. Ids 0, 1, 2 are <s>, </s> and <unk>.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    levels: Vec<HashMap<Vec<u32>, Entry>>,
}

fn build_vocab<'a>(
    words: impl IntoIterator<Item = &'a str>,
) -> (Vec<String>, HashMap<String, u32>) {
    let mut rest: Vec<&str> = words
        .into_iter()
        .filter(|w| ![BOS, EOS, OOV_WORD].contains(w))
        .collect();
    rest.sort_unstable();
    rest.dedup();
    let vocab: Vec<String> = [BOS, EOS, OOV_WORD]
        .into_iter()
        .chain(rest)
        .map(str::to_string)
        .collect();
    let index = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();
    (vocab, index)
}

fn check_order(order: usize) -> Result<(), LmError> {
    if (2..=4).contains(&order) {
        Ok(())
    } else {
        Err(LmError::Order(order))
    }
}

/// Katz-style Good-Turing discount ratios d_r for r = 1..=GT_MAX_DISCOUNTED (index r).
/// Ratios the formula cannot supply (missing count-of-counts, or outside (0, 1)) fall back
/// to (r - 0.5) / r.
fn good_turing_discounts(count_of_counts: &BTreeMap<u64, u64>) -> Vec<f64> {
    let n = |r: u64| *count_of_counts.get(&r).unwrap_or(&0) as f64;
    let k = GT_MAX_DISCOUNTED as u64;
    let common = if n(1) > 0.0 {
        (k + 1) as f64 * n(k + 1) / n(1)
    } else {
        f64::NAN
    };
    let mut d = vec![1.0; GT_MAX_DISCOUNTED + 1];
    for r in 1..=k {
        let rf = r as f64;
        let rstar = (rf + 1.0) * n(r + 1) / n(r);
        let v = (rstar / rf - common) / (1.0 - common);
        d[r as usize] = if n(r) > 0.0 && v.is_finite() && v > 0.0 && v < 1.0 {
            v
        } else {
            (rf - 0.5) / rf
        };
    }
    d
}

/// Trains a backoff model: interpolated Kneser-Ney with a fixed discount (continuation
/// counts below the top order, uniform floor under the unigrams), or Good-Turing with
/// Katz backoff.
pub fn train_ngram(
    corpus: &[Vec<String>],
    order: usize,
    smoothing: Smoothing,
) -> Result<NgramLm, LmError> {
    check_order(order)?;
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let (vocab, index) = build_vocab(corpus.iter().flatten().map(String::as_str));
    let (bos, eos) = (0u32, 1u32);
    let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for sent in corpus {
        let mut ids = vec![bos];
        ids.extend(sent.iter().map(|w| index[w.as_str()]));
        ids.push(eos);
        for end in 1..ids.len() {
            for m in 1..=order.min(end + 1) {
                *counts[m - 1]
                    .entry(ids[end + 1 - m..=end].to_vec())
                    .or_insert(0) += 1;
            }
        }
    }
    let mut lm = NgramLm {
        order,
        vocab,
        index,
        levels: vec![HashMap::new(); order],
    };
    let predictable: Vec<u32> = (1..lm.vocab.len() as u32).collect();
    for m in 1..=order {
        // adjusted counts for this level
        let adjusted: HashMap<Vec<u32>, u64> = if smoothing == Smoothing::KneserNey && m < order {
            let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
            for key in counts[m].keys() {
                *cont.entry(key[1..].to_vec()).or_insert(0) += 1;
            }
            counts[m - 1]
                .iter()
                .map(|(g, &c)| (g.clone(), if g[0] == bos { c } else { cont[g] }))
                .collect()
        } else {
            counts[m - 1].clone()
        };
        let mut contexts: BTreeMap<Vec<u32>, Vec<(u32, u64)>> = BTreeMap::new();
        for (g, &c) in &adjusted {
            contexts
                .entry(g[..m - 1].to_vec())
                .or_default()
                .push((g[m - 1], c));
        }
        let discounts = (smoothing == Smoothing::GoodTuring).then(|| {
            let mut coc = BTreeMap::new();
            for &c in counts[m - 1].values() {
                *coc.entry(c).or_insert(0u64) += 1;
            }
            good_turing_discounts(&coc)
        });
        for (h, mut seen) in contexts {
            seen.sort_unstable();
            let total: u64 = seen.iter().map(|s| s.1).sum();
            let total = total as f64;
            let lower = |lm: &NgramLm, w: u32| {
                if m == 1 {
                    1.0 / predictable.len() as f64
                } else {
                    lm.ln_prob_ids(&h[1..], w).exp()
                }
            };
            let mut probs: Vec<(u32, f64)> = match &discounts {
                None => {
                    let gamma = KN_DISCOUNT * seen.len() as f64 / total;
                    seen.iter()
                        .map(|&(w, c)| {
                            (w, (c as f64 - KN_DISCOUNT) / total + gamma * lower(&lm, w))
                        })
                        .collect()
                }
                Some(d) => seen
                    .iter()
                    .map(|&(w, c)| {
                        let dr = d.get(c as usize).copied().unwrap_or(1.0);
                        (w, dr * c as f64 / total)
                    })
                    .collect(),
            };
            let mut left = 1.0 - probs.iter().map(|p| p.1).sum::<f64>();
            if discounts.is_some() && left <= 1e-9 {
                // nothing discounted in this context: reserve 1/(total+1) for unseen words
                let keep = total / (total + 1.0);
                probs.iter_mut().for_each(|p| p.1 *= keep);
                left = 1.0 - probs.iter().map(|p| p.1).sum::<f64>();
            }
            let lower_seen: f64 = probs.iter().map(|&(w, _)| lower(&lm, w)).sum();
            let level = &mut lm.levels[m - 1];
            for &(w, p) in &probs {
                let mut key = h.clone();
                key.push(w);
                level.insert(
                    key,
                    Entry {
                        logp: p.ln(),
                        bow: 0.0,
                    },
                );
            }
            if m == 1 {
                let unseen: Vec<u32> = predictable
                    .iter()
                    .copied()
                    .filter(|w| !level.contains_key(&vec![*w]))
                    .collect();
                // Kneser-Ney: left / |unseen| equals the interpolated uniform floor
                for &w in &unseen {
                    let p = left / unseen.len() as f64;
                    level.insert(
                        vec![w],
                        Entry {
                            logp: p.ln(),
                            bow: 0.0,
                        },
                    );
                }
                if unseen.is_empty() && discounts.is_some() {
                    let scale = 1.0 / (1.0 - left);
                    level.values_mut().for_each(|e| e.logp += scale.ln());
                }
                level.insert(
                    vec![bos],
                    Entry {
                        logp: f64::NEG_INFINITY,
                        bow: 0.0,
                    },
                );
            } else {
                let denom = 1.0 - lower_seen;
                let bow = if denom > 1e-12 {
                    (left / denom).ln()
                } else {
                    f64::NEG_INFINITY
                };
                if let Some(e) = lm.levels[m - 2].get_mut(&h) {
                    e.bow = bow;
                }
            }
        }
    }
    Ok(lm)
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }

    pub fn unk(&self) -> u32 {
        2
    }

    /// Id of `word`, mapping unknown words to <unk>.
    pub fn word_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(2)
    }

    /// Ids that can be predicted (everything but <s>).
    pub fn predictable_ids(&self) -> impl Iterator<Item = u32> {
        1..self.vocab.len() as u32
    }

    /// Contexts (as id sequences) that carry a backoff weight, i.e. observed histories.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.levels[..self.order - 1]
            .iter()
            .flat_map(|l| l.keys().filter(|k| *k.last().unwrap() != 1).cloned())
            .collect();
        out.sort();
        out
    }

    /// Natural-log p(w | history); only the last order-1 history ids matter.
    pub fn ln_prob_ids(&self, history: &[u32], w: u32) -> f64 {
        let h = &history[history.len().saturating_sub(self.order - 1)..];
        let mut acc = 0.0;
        let mut key = Vec::with_capacity(h.len() + 1);
        for start in 0..=h.len() {
            let ctx = &h[start..];
            key.clear();
            key.extend_from_slice(ctx);
            key.push(w);
            if let Some(e) = self.levels[ctx.len()].get(&key) {
                return acc + e.logp;
            }
            if !ctx.is_empty() {
                if let Some(e) = self.levels[ctx.len() - 1].get(ctx) {
                    acc += e.bow;
                }
            }
        }
        f64::NEG_INFINITY
    }

    pub fn ln_prob(&self, history: &[&str], word: &str) -> f64 {
        let h: Vec<u32> = history
            .iter()
            .map(|w| if *w == BOS { 0 } else { self.word_id(w) })
            .collect();
        self.ln_prob_ids(&h, self.word_id(word))
    }

    /// ln p(sentence) including the end-of-sentence event.
    pub fn sentence_ln_prob(&self, words: &[&str]) -> f64 {
        let mut hist = vec![0u32];
        let mut total = 0.0;
        for w in words
            .iter()
            .map(|w| self.word_id(w))
            .chain(std::iter::once(1))
        {
            total += self.ln_prob_ids(&hist, w);
            hist.push(w);
        }
        total
    }

    pub fn unigram_logprobs(&self) -> HashMap<String, f64> {
        self.levels[0]
            .iter()
            .filter(|(k, e)| e.logp.is_finite() && k[0] > 2)
            .map(|(k, e)| (self.vocab[k[0] as usize].clone(), e.logp))
            .collect()
    }

    /// Standard text interchange format (log10 values).
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (m, level) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", m + 1, level.len());
        }
        let log10 = |v: f64| if v.is_finite() { v / LN_10 } else { -99.0 };
        for (m, level) in self.levels.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", m + 1);
            let mut keys: Vec<&Vec<u32>> = level.keys().collect();
            keys.sort();
            for k in keys {
                let e = level[k];
                let words: Vec<&str> = k.iter().map(|&i| self.vocab[i as usize].as_str()).collect();
                let _ = write!(out, "{}\t{}", log10(e.logp), words.join(" "));
                if m + 1 < self.order {
                    let _ = write!(out, "\t{}", log10(e.bow));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self, LmError> {
        let bad = |m: String| LmError::Format(m);
        let mut declared = Vec::new();
        let mut raw: Vec<Vec<(Vec<String>, f64, f64)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut seen_data = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                seen_data = true;
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (_, n) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: bad count", ln + 1)))?;
                declared.push(
                    n.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(format!("line {}: bad count", ln + 1)))?,
                );
                continue;
            }
            if let Some(m) = line
                .strip_prefix('\\')
                .and_then(|l| l.strip_suffix("-grams:"))
            {
                let m: usize = m
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad section", ln + 1)))?;
                if m != raw.len() + 1 {
                    return Err(bad(format!("line {}: sections out of order", ln + 1)));
                }
                raw.push(Vec::new());
                section = Some(m);
                continue;
            }
            let m =
                section.ok_or_else(|| bad(format!("line {}: entry outside a section", ln + 1)))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != m + 1 && fields.len() != m + 2 {
                return Err(bad(format!("line {}: expected {m} words", ln + 1)));
            }
            let num = |s: &str| -> Result<f64, LmError> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad number `{s}`", ln + 1)))?;
                Ok(if v <= -99.0 {
                    f64::NEG_INFINITY
                } else {
                    v * LN_10
                })
            };
            let logp = num(fields[0])?;
            let bow = if fields.len() == m + 2 {
                num(fields[m + 1])?
            } else {
                0.0
            };
            raw[m - 1].push((
                fields[1..=m].iter().map(|s| s.to_string()).collect(),
                logp,
                bow,
            ));
        }
        if !seen_data || raw.is_empty() || declared.len() != raw.len() {
            return Err(bad("missing header or sections".into()));
        }
        for (m, (d, r)) in declared.iter().zip(&raw).enumerate() {
            if *d != r.len() {
                return Err(bad(format!(
                    "{}-gram count {} does not match header {}",
                    m + 1,
                    r.len(),
                    d
                )));
            }
        }
        let order = raw.len();
        check_order(order)?;
        let (vocab, index) = build_vocab(raw[0].iter().map(|(w, _, _)| w[0].as_str()));
        let mut levels = vec![HashMap::new(); order];
        for (m, entries) in raw.into_iter().enumerate() {
            for (words, logp, bow) in entries {
                let key = words
                    .iter()
                    .map(|w| {
                        index
                            .get(w)
                            .copied()
                            .ok_or_else(|| bad(format!("`{w}` missing from 1-grams")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                levels[m].insert(key, Entry { logp, bow });
            }
        }
        Ok(Self {
            order,
            vocab,
            index,
            levels,
        })
    }
}

/// exp(-mean ln p) over all word and end-of-sentence events.
pub fn perplexity(lm: &NgramLm, text: &[Vec<String>]) -> Result<f64, LmError> {
    if text.is_empty() {
        return Err(LmError::EmptyText);
    }
    let mut total = 0.0;
    let mut events = 0usize;
    for sent in text {
        let words: Vec<&str> = sent.iter().map(String::as_str).collect();
        total += lm.sentence_ln_prob(&words);
        events += words.len() + 1;
    }
    Ok((-total / events as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn kn_bigram_hand_value() {
        // V = {</s>, <unk>, a, b, c}; continuation counts: a 1, b 1, c 1, </s> 2 over 5
        // bigram types. p_uni(b) = 0.25/5 + 0.75*4/5/5 = 0.17;
        // p(b|a) = 0.25/2 + 0.75*2/2*0.17 = 0.2525
        let lm = train_ngram(&corpus(&["a b", "a c"]), 2, Smoothing::KneserNey).unwrap();
        assert!((lm.ln_prob(&["a"], "b").exp() - 0.2525).abs() < 1e-9);
        assert!((lm.ln_prob(&[], "b").exp() - 0.17).abs() < 1e-9);
    }

    fn random_corpus(seed: u64, sentences: usize) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sentences)
            .map(|_| {
                let n = rng.random_range(1..8);
                (0..n)
                    .map(|_| {
                        // skewed word distribution
                        let r: f64 = rng.random();
                        format!("w{}", (r * r * 30.0) as usize)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_normalized(lm: &NgramLm) {
        for ctx in lm.contexts() {
            let s: f64 = lm
                .predictable_ids()
                .map(|w| lm.ln_prob_ids(&ctx, w).exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-6, "context {ctx:?}: {s}");
        }
        let s: f64 = lm
            .predictable_ids()
            .map(|w| lm.ln_prob_ids(&[], w).exp())
            .sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_contexts_normalize() {
        let c = random_corpus(1, 120);
        for order in 2..=4 {
            for sm in [Smoothing::KneserNey, Smoothing::GoodTuring] {
                let lm = train_ngram(&c, order, sm).unwrap();
                check_normalized(&lm);
                assert!(lm.ln_prob(&["w1"], "never-seen") > f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn tiny_corpora_normalize() {
        for lines in [
            vec!["a"],
            vec!["a a a a a a a a a a"],
            vec!["a b", "a c"],
            vec!["x y z", "x y z", "z"],
        ] {
            for order in 2..=4 {
                for sm in [Smoothing::KneserNey, Smoothing::GoodTuring] {
                    check_normalized(&train_ngram(&corpus(&lines), order, sm).unwrap());
                }
            }
        }
    }

    #[test]
    fn order_and_empty_errors() {
        let c = corpus(&["a"]);
        assert!(matches!(
            train_ngram(&c, 5, Smoothing::KneserNey),
            Err(LmError::Order(5))
        ));
        assert!(matches!(
            train_ngram(&[], 2, Smoothing::KneserNey),
            Err(LmError::EmptyCorpus)
        ));
        let lm = train_ngram(&c, 2, Smoothing::KneserNey).unwrap();
        assert!(matches!(perplexity(&lm, &[]), Err(LmError::EmptyText)));
    }

    #[test]
    fn arpa_round_trip() {
        let c = random_corpus(2, 40);
        for sm in [Smoothing::KneserNey, Smoothing::GoodTuring] {
            let lm = train_ngram(&c, 3, sm).unwrap();
            let back = NgramLm::from_arpa(&lm.to_arpa()).unwrap();
            assert_eq!(back.vocab(), lm.vocab());
            for ctx in lm.contexts().iter().take(30) {
                for w in lm.predictable_ids() {
                    let (a, b) = (lm.ln_prob_ids(ctx, w), back.ln_prob_ids(ctx, w));
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
        assert!(NgramLm::from_arpa("garbage").is_err());
    }

    #[test]
    fn training_text_beats_shuffled() {
        let mut wins = 0;
        for seed in 0..10 {
            let c = random_corpus(seed, 60);
            let lm = train_ngram(&c, 3, Smoothing::KneserNey).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut tokens: Vec<String> = c.iter().flatten().cloned().collect();
            tokens.shuffle(&mut rng);
            let mut it = tokens.into_iter();
            let shuffled: Vec<Vec<String>> = c
                .iter()
                .map(|s| it.by_ref().take(s.len()).collect())
                .collect();
            if perplexity(&lm, &c).unwrap() <= perplexity(&lm, &shuffled).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 6, "{wins}");
    }
}
