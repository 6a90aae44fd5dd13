//! Controlled accuracy degradation of synthetic text: numbers are swapped for
//! random numbers of the same shape, frequent nouns for sibling hyponyms and
//! frequent adjectives for antonyms.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_TOP_K: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub ratio: f64,
    pub seed: u64,
    pub enable_numbers: bool,
    pub enable_noun_hyponyms: bool,
    pub enable_adjective_antonyms: bool,
    pub top_k_frequent: usize,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            ratio: 0.0,
            seed: 0,
            enable_numbers: true,
            enable_noun_hyponyms: true,
            enable_adjective_antonyms: true,
            top_k_frequent: DEFAULT_TOP_K,
        }
    }
}

impl CorruptionSpec {
    pub fn new(ratio: f64, seed: u64) -> Self {
        CorruptionSpec {
            ratio,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("corruption ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounEntry {
    pub hypernym: String,
    pub siblings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    #[serde(default)]
    pub nouns: BTreeMap<String, NounEntry>,
    #[serde(default)]
    pub adjectives: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: Lexicon = util::read_json(path)?;
        let lex = raw.normalized();
        lex.validate().map_err(|e| e.context(format!("lexicon {}", path.display())))?;
        Ok(lex)
    }

    /// Lowercases every key so lookups are case-insensitive.
    pub fn normalized(self) -> Self {
        Lexicon {
            nouns: self.nouns.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect(),
            adjectives: self.adjectives.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (word, entry) in &self.nouns {
            if entry.siblings.len() < 2 {
                return Err(Error::invalid(format!("noun {word:?} needs at least 2 sibling hyponyms")));
            }
        }
        for (word, antonyms) in &self.adjectives {
            if antonyms.is_empty() {
                return Err(Error::invalid(format!("adjective {word:?} has no antonyms")));
            }
        }
        Ok(())
    }
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?").expect("static regex"));
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+").expect("static regex"));

/// Lowercased word to number of documents containing it.
pub fn document_frequencies<'a, I>(texts: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut df = HashMap::new();
    for text in texts {
        let words: HashSet<String> = WORD.find_iter(text).map(|m| m.as_str().to_lowercase()).collect();
        for w in words {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    df
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateClass {
    Number,
    Noun,
    Adjective,
}

impl fmt::Display for CandidateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateClass::Number => "number",
            CandidateClass::Noun => "noun",
            CandidateClass::Adjective => "adjective",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Candidate {
    pub offset: usize,
    pub text: String,
    pub class: CandidateClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub offset: usize,
    pub before: String,
    pub after: String,
    pub class: CandidateClass,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    pub candidates: usize,
    pub changes: Vec<Change>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

fn top_k<'a, I>(words: I, freq: &HashMap<String, u64>, k: usize) -> HashSet<String>
where
    I: Iterator<Item = &'a String>,
{
    let mut ranked: Vec<(u64, &String)> = words
        .filter_map(|w| freq.get(w).copied().filter(|&df| df > 0).map(|df| (df, w)))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().take(k).map(|(_, w)| w.clone()).collect()
}

/// Applies a corruption spec with a fixed lexicon and frequency table.
pub struct Corruptor<'a> {
    spec: CorruptionSpec,
    lexicon: &'a Lexicon,
    nouns: HashSet<String>,
    adjectives: HashSet<String>,
}

impl<'a> Corruptor<'a> {
    pub fn new(spec: CorruptionSpec, lexicon: &'a Lexicon, freq: &HashMap<String, u64>) -> Result<Self> {
        spec.validate()?;
        let nouns = if spec.enable_noun_hyponyms {
            top_k(lexicon.nouns.keys(), freq, spec.top_k_frequent)
        } else {
            HashSet::new()
        };
        let adjectives = if spec.enable_adjective_antonyms {
            top_k(lexicon.adjectives.keys().filter(|w| !lexicon.nouns.contains_key(*w)), freq, spec.top_k_frequent)
        } else {
            HashSet::new()
        };
        Ok(Corruptor {
            spec,
            lexicon,
            nouns,
            adjectives,
        })
    }

    pub fn spec(&self) -> &CorruptionSpec {
        &self.spec
    }

    /// Eligible occurrences, left to right by byte offset.
    pub fn find_candidates(&self, text: &str) -> Vec<Candidate> {
        let mut out = Vec::new();
        if self.spec.enable_numbers {
            out.extend(NUMBER.find_iter(text).map(|m| Candidate {
                offset: m.start(),
                text: m.as_str().to_owned(),
                class: CandidateClass::Number,
            }));
        }
        if !self.nouns.is_empty() || !self.adjectives.is_empty() {
            for m in WORD.find_iter(text) {
                let lower = m.as_str().to_lowercase();
                let class = if self.nouns.contains(&lower) {
                    CandidateClass::Noun
                } else if self.adjectives.contains(&lower) {
                    CandidateClass::Adjective
                } else {
                    continue;
                };
                out.push(Candidate {
                    offset: m.start(),
                    text: m.as_str().to_owned(),
                    class,
                });
            }
        }
        out.sort_by_key(|c| c.offset);
        out
    }

    /// Corrupts `text` with an RNG stream seeded from the spec seed alone.
    pub fn corrupt(&self, text: &str) -> (String, ChangeReport) {
        self.corrupt_with(text, &mut util::rng_for(self.spec.seed, &["corrupt"]))
    }

    /// Corrupts a document with a stream keyed by (seed, document id).
    pub fn corrupt_document(&self, doc: &Document) -> (Document, ChangeReport) {
        let mut rng = util::rng_for(self.spec.seed, &["corrupt", &doc.id]);
        let (text, mut report) = self.corrupt_with(&doc.text, &mut rng);
        report.doc_id = Some(doc.id.clone());
        let mut out = doc.clone();
        out.text = text;
        (out, report)
    }

    pub fn corrupt_corpus(&self, docs: &[Document]) -> Vec<(Document, ChangeReport)> {
        docs.par_iter().map(|d| self.corrupt_document(d)).collect()
    }

    fn corrupt_with(&self, text: &str, rng: &mut ChaCha8Rng) -> (String, ChangeReport) {
        let candidates = self.find_candidates(text);
        let mut report = ChangeReport {
            candidates: candidates.len(),
            ..Default::default()
        };
        if self.spec.ratio == 0.0 || candidates.is_empty() {
            return (text.to_owned(), report);
        }
        // one decision per distinct word keeps swaps consistent in a document
        let mut word_choice: HashMap<String, Option<String>> = HashMap::new();
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        for c in candidates {
            let replacement = match c.class {
                CandidateClass::Number => rng.gen_bool(self.spec.ratio).then(|| replace_number(&c.text, rng)),
                CandidateClass::Noun | CandidateClass::Adjective => {
                    let lower = c.text.to_lowercase();
                    let choice = match word_choice.get(&lower) {
                        Some(choice) => choice.clone(),
                        None => {
                            let choice = if rng.gen_bool(self.spec.ratio) {
                                let alternatives = self.alternatives(&lower, c.class);
                                let picked = alternatives.choose(rng).map(|s| s.to_string());
                                if picked.is_none() {
                                    report.skipped.push(format!("{lower}: no replacement available"));
                                }
                                picked
                            } else {
                                None
                            };
                            word_choice.insert(lower, choice.clone());
                            choice
                        }
                    };
                    choice.map(|w| match_case(&c.text, &w))
                }
            };
            if let Some(after) = replacement {
                out.push_str(&text[cursor..c.offset]);
                out.push_str(&after);
                cursor = c.offset + c.text.len();
                report.changes.push(Change {
                    offset: c.offset,
                    before: c.text,
                    after,
                    class: c.class,
                });
            }
        }
        out.push_str(&text[cursor..]);
        (out, report)
    }

    fn alternatives(&self, lower: &str, class: CandidateClass) -> Vec<&'a str> {
        let list: &[String] = match class {
            CandidateClass::Noun => self.lexicon.nouns.get(lower).map_or(&[], |e| &e.siblings),
            CandidateClass::Adjective => self.lexicon.adjectives.get(lower).map_or(&[], |v| v),
            CandidateClass::Number => &[],
        };
        list.iter().map(String::as_str).filter(|w| !w.eq_ignore_ascii_case(lower)).collect()
    }
}

/// One-shot form of [`Corruptor::corrupt`].
pub fn corrupt(
    text: &str,
    spec: &CorruptionSpec,
    lexicon: &Lexicon,
    freq: &HashMap<String, u64>,
) -> Result<(String, ChangeReport)> {
    Ok(Corruptor::new(spec.clone(), lexicon, freq)?.corrupt(text))
}

/// Random number with the same digit layout, never equal to the input.
/// Multi-digit runs keep a nonzero leading digit.
fn replace_number(original: &str, rng: &mut ChaCha8Rng) -> String {
    let total_digits = original.bytes().filter(u8::is_ascii_digit).count();
    loop {
        let mut out = String::with_capacity(original.len());
        let mut at_run_start = true;
        let mut run_len = 0;
        for (i, b) in original.bytes().enumerate() {
            if b == b'.' {
                out.push('.');
                at_run_start = true;
                continue;
            }
            if at_run_start {
                run_len = original[i..].bytes().take_while(u8::is_ascii_digit).count();
            }
            let lead_nonzero = at_run_start && run_len > 1 && out.is_empty();
            let d = if lead_nonzero { rng.gen_range(1..=9) } else { rng.gen_range(0..=9) };
            out.push(char::from(b'0' + d));
            at_run_start = false;
        }
        if out != original || total_digits == 0 {
            return out;
        }
    }
}

fn match_case(template: &str, word: &str) -> String {
    let mut chars = template.chars();
    let first_upper = chars.next().is_some_and(char::is_uppercase);
    let rest_upper = template.chars().count() > 1 && template.chars().skip(1).all(char::is_uppercase);
    if first_upper && rest_upper {
        word.to_uppercase()
    } else if first_upper {
        let mut c = word.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c.flat_map(char::to_lowercase)).collect())
            .unwrap_or_default()
    } else {
        word.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        serde_json::from_str(
            r#"{"nouns": {"chlorine": {"hypernym": "chemical element", "siblings": ["oxygen", "hydrogen", "neon", "chlorine"]},
                          "cat": {"hypernym": "feline", "siblings": ["lion", "tiger"]}},
                "adjectives": {"equal": ["unequal"], "hot": ["cold"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn number_candidates_in_formula() {
        let lex = Lexicon::default();
        let c = Corruptor::new(CorruptionSpec::new(0.5, 1), &lex, &HashMap::new()).unwrap();
        let cands = c.find_candidates("2Na + Cl2");
        assert_eq!(cands.iter().map(|c| (c.offset, c.text.as_str())).collect::<Vec<_>>(), [(0, "2"), (8, "2")]);
        assert!(c.find_candidates("no digits here").is_empty());
    }

    #[test]
    fn ratio_zero_is_identity() {
        let lex = lexicon();
        let text = "The cat is hot and 42 cats are equal.";
        let freq = document_frequencies([text]);
        let (out, report) = corrupt(text, &CorruptionSpec::new(0.0, 3), &lex, &freq).unwrap();
        assert_eq!(out, text);
        assert!(report.changes.is_empty());
    }

    #[test]
    fn ratio_one_replaces_everything_consistently() {
        let lex = lexicon();
        let text = "Cat and cat and CAT: hot, 12.5 and 7.";
        let freq = document_frequencies([text]);
        let (out, report) = corrupt(text, &CorruptionSpec::new(1.0, 3), &lex, &freq).unwrap();
        assert_eq!(report.candidates, 6);
        assert_eq!(report.changes.len(), 6);
        let nouns: HashSet<String> = report
            .changes
            .iter()
            .filter(|c| c.class == CandidateClass::Noun)
            .map(|c| c.after.to_lowercase())
            .collect();
        assert_eq!(nouns.len(), 1);
        assert!(out.contains("cold"));
        for c in report.changes.iter().filter(|c| c.class == CandidateClass::Number) {
            assert_eq!(c.before.len(), c.after.len());
            assert_ne!(c.before, c.after);
            assert_eq!(c.before.find('.'), c.after.find('.'));
        }
    }

    #[test]
    fn top_k_limits_words() {
        let lex = lexicon();
        let freq: HashMap<String, u64> = [("cat".to_string(), 5), ("chlorine".to_string(), 1)].into();
        let spec = CorruptionSpec {
            top_k_frequent: 1,
            ..CorruptionSpec::new(1.0, 0)
        };
        let c = Corruptor::new(spec, &lex, &freq).unwrap();
        let cands = c.find_candidates("cat chlorine");
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].text, "cat");
    }

    #[test]
    fn disabled_classes_contribute_nothing() {
        let lex = lexicon();
        let text = "cat 1 hot";
        let freq = document_frequencies([text]);
        let spec = CorruptionSpec {
            enable_numbers: false,
            enable_adjective_antonyms: false,
            ..CorruptionSpec::new(1.0, 0)
        };
        let c = Corruptor::new(spec, &lex, &freq).unwrap();
        assert_eq!(c.find_candidates(text).len(), 1);
    }

    #[test]
    fn case_is_preserved() {
        assert_eq!(match_case("Chlorine", "oxygen"), "Oxygen");
        assert_eq!(match_case("CAT", "lion"), "LION");
        assert_eq!(match_case("cat", "lion"), "lion");
    }

    #[test]
    fn lexicon_validation() {
        let bad: Lexicon = serde_json::from_str(r#"{"nouns": {"x": {"hypernym": "h", "siblings": ["x"]}}}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad: Lexicon = serde_json::from_str(r#"{"adjectives": {"x": []}}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(lexicon().validate().is_ok());
    }
}
