use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::LexError;

pub const SILENCE_PHONE: &str = "sil";
pub const OOV_PHONE: &str = "spn";
pub const OOV_WORD: &str = "<unk>";

/// Word -> syllables -> phones, with alternatives kept per word.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: BTreeMap<String, Vec<Vec<String>>>,
    syllables: BTreeMap<String, Vec<String>>,
    phones: Vec<String>,
}

/// Builds the two-layer lexicon. Repeated words with different syllable sequences become
/// alternative pronunciations.
pub fn compile_lexicon(
    word_entries: &[(String, Vec<String>)],
    syllable_entries: &[(String, Vec<String>)],
) -> Result<Lexicon, LexError> {
    let mut syllables = BTreeMap::new();
    for (syl, phones) in syllable_entries {
        if phones.is_empty() {
            return Err(LexError::EmptyPronunciation(syl.clone()));
        }
        if let Some(prev) = syllables.insert(syl.clone(), phones.clone()) {
            if &prev != phones {
                return Err(LexError::ConflictingSyllable(syl.clone()));
            }
        }
    }
    let mut words: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (word, syls) in word_entries {
        if syls.is_empty() {
            return Err(LexError::EmptyPronunciation(word.clone()));
        }
        if let Some(s) = syls.iter().find(|s| !syllables.contains_key(*s)) {
            return Err(LexError::UnknownSyllable {
                word: word.clone(),
                syllable: s.clone(),
            });
        }
        let alts = words.entry(word.clone()).or_default();
        if !alts.contains(syls) {
            alts.push(syls.clone());
        }
    }
    let used: BTreeSet<&String> = syllables.values().flatten().collect();
    let mut phones = vec![SILENCE_PHONE.to_string(), OOV_PHONE.to_string()];
    phones.extend(
        used.into_iter()
            .filter(|p| p.as_str() != SILENCE_PHONE && p.as_str() != OOV_PHONE)
            .cloned(),
    );
    Ok(Lexicon {
        words,
        syllables,
        phones,
    })
}

impl Lexicon {
    /// Phone inventory: silence first, then the OOV garbage phone, then the rest sorted.
    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn phone_index(&self, phone: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == phone)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn syllables_of(&self, word: &str) -> Option<&[Vec<String>]> {
        self.words.get(word).map(Vec::as_slice)
    }

    pub fn syllable_phones(&self, syllable: &str) -> Option<&[String]> {
        self.syllables.get(syllable).map(Vec::as_slice)
    }

    /// Every pronunciation of `word` as phones; unknown words get the OOV phone.
    pub fn word_to_phones(&self, word: &str) -> Vec<Vec<String>> {
        match self.words.get(word) {
            Some(alts) => alts
                .iter()
                .map(|syls| {
                    syls.iter()
                        .flat_map(|s| self.syllables[s].iter().cloned())
                        .collect()
                })
                .collect(),
            None => vec![vec![OOV_PHONE.to_string()]],
        }
    }

    /// First pronunciation as phone indices.
    pub fn word_phone_ids(&self, word: &str) -> Vec<usize> {
        self.word_to_phones(word)[0]
            .iter()
            .map(|p| {
                self.phone_index(p)
                    .expect("lexicon phones are in the inventory")
            })
            .collect()
    }

    pub fn format_words(&self) -> String {
        let mut out = String::new();
        for (w, alts) in &self.words {
            for syls in alts {
                let _ = writeln!(out, "{w}\t{}", syls.join(" "));
            }
        }
        out
    }

    pub fn format_syllables(&self) -> String {
        let mut out = String::new();
        for (s, phones) in &self.syllables {
            let _ = writeln!(out, "{s}\t{}", phones.join(" "));
        }
        out
    }
}

/// Parses `key<TAB>sym1 sym2 ...` lines.
pub fn parse_entries(text: &str) -> Result<Vec<(String, Vec<String>)>, LexError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (key, rest) = line
                .split_once('\t')
                .ok_or_else(|| LexError::Format(format!("line {}: expected a tab", i + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(LexError::Format(format!("line {}: empty key", i + 1)));
            }
            Ok((
                key.to_string(),
                rest.split_whitespace().map(str::to_string).collect(),
            ))
        })
        .collect()
}

pub fn read_lexicon(words_text: &str, syllables_text: &str) -> Result<Lexicon, LexError> {
    compile_lexicon(&parse_entries(words_text)?, &parse_entries(syllables_text)?)
}
