use std::collections::HashMap;

/// Log-probability charged per symbol that no lexicon word covers.
pub const OOV_PENALTY: f64 = -13.815510557964274; // ln(1e-6)

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Word(String),
    Oov(char),
}

#[derive(Default)]
struct TrieNode {
    children: HashMap<char, usize>,
    /// Log-probability if a word ends here.
    word: Option<f64>,
}

/// Prefix tree over word spellings, scored by unigram log-probabilities.
pub struct WordTrie {
    nodes: Vec<TrieNode>,
}

impl WordTrie {
    /// Only words with an entry in `unigram_logprobs` are inserted.
    pub fn new<'a>(
        words: impl IntoIterator<Item = &'a str>,
        unigram_logprobs: &HashMap<String, f64>,
    ) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for w in words {
            let Some(&lp) = unigram_logprobs.get(w) else {
                continue;
            };
            if w.is_empty() {
                continue;
            }
            let mut cur = 0;
            for ch in w.chars() {
                cur = match nodes[cur].children.get(&ch) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(ch, n);
                        n
                    }
                };
            }
            nodes[cur].word = Some(lp);
        }
        Self { nodes }
    }

    fn is_single_symbol_word(&self, ch: char) -> bool {
        self.nodes[0]
            .children
            .get(&ch)
            .is_some_and(|&n| self.nodes[n].word.is_some())
    }

    /// Maximum log-probability segmentation. A symbol may be emitted as OOV (with
    /// `OOV_PENALTY`) unless it is itself a one-symbol word.
    pub fn segment(&self, text: &str) -> (Vec<Segment>, f64) {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        // best[i]: (score, back pointer start, is_oov)
        let mut best: Vec<Option<(f64, usize, bool)>> = vec![None; n + 1];
        best[0] = Some((0.0, 0, false));
        for j in 0..n {
            let Some((base, _, _)) = best[j] else {
                continue;
            };
            if !self.is_single_symbol_word(chars[j]) {
                relax(&mut best[j + 1], base + OOV_PENALTY, j, true);
            }
            let mut cur = 0;
            for (i, ch) in chars.iter().enumerate().skip(j) {
                let Some(&next) = self.nodes[cur].children.get(ch) else {
                    break;
                };
                cur = next;
                if let Some(lp) = self.nodes[cur].word {
                    relax(&mut best[i + 1], base + lp, j, false);
                }
            }
        }
        let score = best[n]
            .map(|b| b.0)
            .expect("OOV steps make every prefix reachable");
        let mut out = Vec::new();
        let mut i = n;
        while i > 0 {
            let (_, start, oov) = best[i].expect("reachable");
            out.push(if oov {
                Segment::Oov(chars[start])
            } else {
                Segment::Word(chars[start..i].iter().collect())
            });
            i = start;
        }
        out.reverse();
        (out, score)
    }
}

fn relax(slot: &mut Option<(f64, usize, bool)>, score: f64, start: usize, oov: bool) {
    if slot.is_none_or(|(s, _, _)| score > s) {
        *slot = Some((score, start, oov));
    }
}

pub fn segment_text(
    text: &str,
    lexicon: &super::Lexicon,
    unigram_logprobs: &HashMap<String, f64>,
) -> Vec<Segment> {
    WordTrie::new(lexicon.words(), unigram_logprobs)
        .segment(text)
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(chars: &[char], vocab: &HashMap<String, f64>) -> f64 {
        if chars.is_empty() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        let first = chars[0].to_string();
        if !vocab.contains_key(&first) {
            best = best.max(OOV_PENALTY + brute(&chars[1..], vocab));
        }
        for len in 1..=chars.len() {
            let w: String = chars[..len].iter().collect();
            if let Some(lp) = vocab.get(&w) {
                best = best.max(lp + brute(&chars[len..], vocab));
            }
        }
        best
    }

    fn score(segs: &[Segment], vocab: &HashMap<String, f64>) -> f64 {
        segs.iter()
            .map(|s| match s {
                Segment::Word(w) => vocab[w],
                Segment::Oov(_) => OOV_PENALTY,
            })
            .sum()
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alphabet = ['a', 'b', 'c', 'd'];
        for _ in 0..300 {
            let mut vocab = HashMap::new();
            while vocab.len() < 5 {
                let len = rng.random_range(1..=3);
                let w: String = (0..len).map(|_| alphabet[rng.random_range(0..4)]).collect();
                vocab.insert(w, rng.random_range(-8.0..-0.5));
            }
            let len = rng.random_range(0..=8);
            let text: String = (0..len).map(|_| alphabet[rng.random_range(0..4)]).collect();
            let trie = WordTrie::new(vocab.keys().map(String::as_str), &vocab);
            let (segs, s) = trie.segment(&text);
            let expect = brute(&text.chars().collect::<Vec<_>>(), &vocab);
            assert!((s - expect).abs() < 1e-9, "{text}: {s} vs {expect}");
            assert!((score(&segs, &vocab) - s).abs() < 1e-9);
            let joined: String = segs
                .iter()
                .map(|g| match g {
                    Segment::Word(w) => w.clone(),
                    Segment::Oov(c) => c.to_string(),
                })
                .collect();
            assert_eq!(joined, text);
        }
    }

    #[test]
    fn simple_cases() {
        let vocab: HashMap<String, f64> = [("ab", -1.0), ("a", -2.0), ("c", -2.0), ("abc", -4.0)]
            .into_iter()
            .map(|(w, p)| (w.to_string(), p))
            .collect();
        let trie = WordTrie::new(vocab.keys().map(String::as_str), &vocab);
        assert_eq!(trie.segment("ab").0, vec![Segment::Word("ab".into())]);
        // ab + c = -3 beats abc = -4
        assert_eq!(
            trie.segment("abc").0,
            vec![Segment::Word("ab".into()), Segment::Word("c".into())]
        );
        assert_eq!(trie.segment("z").0, vec![Segment::Oov('z')]);
        assert!(trie.segment("").0.is_empty());
    }
}
