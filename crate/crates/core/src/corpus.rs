//! Corpus records, JSONL ingestion, token counting, validation splits and
//! per-source statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::En, Language::Zh];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "english" => Ok(Language::En),
            "zh" | "chinese" => Ok(Language::Zh),
            other => Err(Error::invalid(format!("unknown language {other:?}"))),
        }
    }
}

/// The eight corpus source categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    WebPages,
    Encyclopedia,
    Books,
    QaForums,
    AcademicPapers,
    MathCorpora,
    Code,
    Synthetic,
}

impl Source {
    pub const ALL: [Source; 8] = [
        Source::WebPages,
        Source::Encyclopedia,
        Source::Books,
        Source::QaForums,
        Source::AcademicPapers,
        Source::MathCorpora,
        Source::Code,
        Source::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::WebPages => "web_pages",
            Source::Encyclopedia => "encyclopedia",
            Source::Books => "books",
            Source::QaForums => "qa_forums",
            Source::AcademicPapers => "academic_papers",
            Source::MathCorpora => "math_corpora",
            Source::Code => "code",
            Source::Synthetic => "synthetic",
        }
    }

    /// Reference corpus volume in billions of tokens.
    pub fn reference_volume(self) -> f64 {
        match self {
            Source::WebPages => 45.18,
            Source::Encyclopedia => 4.92,
            Source::Books => 15.74,
            Source::QaForums => 4.92,
            Source::AcademicPapers => 7.93,
            Source::MathCorpora => 7.93,
            Source::Code => 11.88,
            Source::Synthetic => 1.50,
        }
    }

    /// Whether the reference corpus carries Chinese data for this source.
    pub fn has_chinese(self) -> bool {
        matches!(
            self,
            Source::WebPages | Source::Encyclopedia | Source::Books | Source::QaForums
        )
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Source::ALL
            .into_iter()
            .find(|src| src.as_str() == key)
            .ok_or_else(|| Error::invalid(format!("unknown source {s:?}")))
    }
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, language: Language, source: Source) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            language,
            source,
            url: None,
            topic: None,
            ppl: None,
            token_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::invalid(format!("document {}: empty text", self.id)));
        }
        if let Some(p) = self.ppl {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid(format!(
                    "document {}: ppl must be finite and > 0, got {p}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> u64 {
        self.token_count.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    language: Option<Language>,
    #[serde(default)]
    source: Option<Source>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    topic: Option<String>,
    #[serde(default)]
    ppl: Option<f64>,
    #[serde(default)]
    token_count: Option<u64>,
}

/// Streams documents out of a JSONL reader in file order.
///
/// Yields `(line_number, outcome)`; blank lines are skipped silently.
pub struct DocumentReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    file_label: String,
    language: Language,
    source: Source,
}

impl<R: BufRead> DocumentReader<R> {
    pub fn new(reader: R, file_label: impl Into<String>, language: Language, source: Source) -> Self {
        DocumentReader {
            lines: reader.lines(),
            line_no: 0,
            file_label: file_label.into(),
            language,
            source,
        }
    }

    fn parse(&self, line: &str) -> std::result::Result<Document, String> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
        let text = raw.text.ok_or("missing required key `text`")?;
        if text.is_empty() {
            return Err("empty text".into());
        }
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => format!("{}:{}", self.file_label, self.line_no),
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(format!("unsupported id value {other}")),
        };
        if let Some(p) = raw.ppl {
            if !(p.is_finite() && p > 0.0) {
                return Err(format!("ppl must be finite and > 0, got {p}"));
            }
        }
        Ok(Document {
            id,
            text,
            language: raw.language.unwrap_or(self.language),
            source: raw.source.unwrap_or(self.source),
            url: raw.url,
            topic: raw.topic,
            ppl: raw.ppl,
            token_count: raw.token_count,
        })
    }
}

impl<R: BufRead> Iterator for DocumentReader<R> {
    type Item = (usize, std::result::Result<Document, String>);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Err(e) => return Some((self.line_no, Err(format!("read error: {e}")))),
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some((self.line_no, self.parse(&l))),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub path: PathBuf,
    pub accepted: usize,
    pub rejected: Vec<LineIssue>,
}

/// Reads a whole JSONL file. Strict mode aborts on the first bad record.
pub fn ingest(
    path: &Path,
    language: Language,
    source: Source,
    mode: IngestMode,
) -> Result<(Vec<Document>, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut docs = Vec::new();
    let mut report = IngestReport {
        path: path.to_path_buf(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    for (line, outcome) in DocumentReader::new(BufReader::new(file), label, language, source) {
        let outcome = outcome.and_then(|doc| {
            if seen.insert(doc.id.clone()) {
                Ok(doc)
            } else {
                Err(format!("duplicate id {:?}", doc.id))
            }
        });
        match (outcome, mode) {
            (Ok(doc), _) => docs.push(doc),
            (Err(message), IngestMode::Strict) => {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line,
                    message,
                })
            }
            (Err(message), IngestMode::Lenient) => {
                log::warn!("{}:{line}: {message} (skipped)", path.display());
                report.rejected.push(LineIssue { line, message });
            }
        }
    }
    report.accepted = docs.len();
    Ok((docs, report))
}

/// Pluggable token counter.
#[derive(Debug, Clone)]
pub enum TokenCounter {
    Whitespace,
    BytesOver4,
    Vocabulary(Vocabulary),
}

impl TokenCounter {
    /// Parses `whitespace`, `bytes4` or `vocab:<path>`.
    pub fn from_spec(spec: &str, base_dir: Option<&Path>) -> Result<Self> {
        match spec {
            "whitespace" => Ok(TokenCounter::Whitespace),
            "bytes4" | "bytes/4" => Ok(TokenCounter::BytesOver4),
            s if s.starts_with("vocab:") => {
                let p = Path::new(&s[6..]);
                let p = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.to_path_buf(),
                };
                Ok(TokenCounter::Vocabulary(Vocabulary::load(&p)?))
            }
            other => Err(Error::config(format!("unknown token counter {other:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TokenCounter::Whitespace => "whitespace".into(),
            TokenCounter::BytesOver4 => "bytes4".into(),
            TokenCounter::Vocabulary(v) => format!("vocab:{}", v.name),
        }
    }

    pub fn count(&self, text: &str) -> u64 {
        match self {
            TokenCounter::Whitespace => text.split_whitespace().count() as u64,
            TokenCounter::BytesOver4 => (text.len() as u64).div_ceil(4),
            TokenCounter::Vocabulary(v) => v.count(text),
        }
    }
}

/// Greedy longest-match tokenizer over an external vocabulary.
///
/// Characters not covered by any vocabulary entry count as one token each.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    name: String,
    entries: HashSet<String>,
    max_chars: usize,
}

impl Vocabulary {
    /// Loads either a JSON object whose keys are tokens, or one token per line.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = util::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::invalid(format!("{}: vocabulary is not UTF-8", path.display())))?;
        let entries: HashSet<String> = if path.extension().is_some_and(|e| e == "json") {
            let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| Error::json(path.display().to_string(), e))?;
            map.into_keys().collect()
        } else {
            text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect()
        };
        Ok(Self::from_entries(path.display().to_string(), entries))
    }

    pub fn from_entries(name: impl Into<String>, entries: impl IntoIterator<Item = String>) -> Self {
        let entries: HashSet<String> = entries.into_iter().collect();
        let max_chars = entries.iter().map(|e| e.chars().count()).max().unwrap_or(1);
        Vocabulary {
            name: name.into(),
            entries,
            max_chars,
        }
    }

    pub fn count(&self, text: &str) -> u64 {
        let mut total = 0u64;
        for word in text.split_whitespace() {
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let mut step = 1;
                let upper = self.max_chars.min(chars.len() - i);
                for len in (1..=upper).rev() {
                    let start = chars[i].0;
                    let end = chars.get(i + len).map_or(word.len(), |c| c.0);
                    if self.entries.contains(&word[start..end]) {
                        step = len;
                        break;
                    }
                }
                total += 1;
                i += step;
            }
        }
        total
    }
}

/// Counts tokens for one document and stores the result on it.
pub fn count_tokens(doc: &mut Document, counter: &TokenCounter) -> u64 {
    let n = counter.count(&doc.text);
    doc.token_count = Some(n);
    n
}

pub fn count_all(docs: &mut [Document], counter: &TokenCounter) {
    docs.par_iter_mut().for_each(|d| {
        count_tokens(d, counter);
    });
}

#[derive(Debug, Clone, Default)]
pub struct ValidationSplit {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub warnings: Vec<String>,
}

pub const DEFAULT_VALIDATION_PER_TOPIC: usize = 200;

/// Carves `per_topic` documents per topic into a validation set.
///
/// Selection is a seeded uniform sample without replacement over the topic's
/// documents sorted by id, so membership does not depend on input order.
pub fn split_validation(corpus: Vec<Document>, per_topic: usize, seed: u64) -> Result<ValidationSplit> {
    if per_topic == 0 {
        return Err(Error::invalid("per_topic must be positive"));
    }
    let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in corpus.iter().enumerate() {
        let topic = d
            .topic
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("document {} has no topic label", d.id)))?;
        by_topic.entry(topic).or_default().push(i);
    }
    let mut chosen = vec![false; corpus.len()];
    let mut warnings = Vec::new();
    for (topic, mut idx) in by_topic {
        idx.sort_by(|&a, &b| corpus[a].id.cmp(&corpus[b].id));
        let mut rng = util::rng_for(seed, &["validation", topic]);
        idx.shuffle(&mut rng);
        if idx.len() < per_topic {
            let w = format!(
                "topic {topic:?} has {} documents, fewer than the {per_topic} requested; all go to validation",
                idx.len()
            );
            log::warn!("{w}");
            warnings.push(w);
        }
        for &i in idx.iter().take(per_topic) {
            chosen[i] = true;
        }
    }
    let mut split = ValidationSplit {
        warnings,
        ..Default::default()
    };
    for (doc, is_val) in corpus.into_iter().zip(chosen) {
        if is_val {
            split.validation.push(doc);
        } else {
            split.train.push(doc);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsCell {
    pub language: Language,
    pub source: Source,
    pub documents: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub cells: Vec<StatsCell>,
    pub total_documents: u64,
    pub total_tokens: u64,
}

impl CorpusStats {
    pub fn tokens_for_source(&self, source: Source) -> u64 {
        self.cells.iter().filter(|c| c.source == source).map(|c| c.tokens).sum()
    }
}

/// Aggregates document and token counts per (language, source).
pub fn source_stats(corpus: &[Document]) -> Result<CorpusStats> {
    let mut cells: BTreeMap<(Language, Source), (u64, u64)> = BTreeMap::new();
    for d in corpus {
        let tokens = d
            .token_count
            .ok_or_else(|| Error::invalid(format!("document {} has no token count", d.id)))?;
        let cell = cells.entry((d.language, d.source)).or_default();
        cell.0 += 1;
        cell.1 += tokens;
    }
    let cells: Vec<StatsCell> = cells
        .into_iter()
        .map(|((language, source), (documents, tokens))| StatsCell {
            language,
            source,
            documents,
            tokens,
        })
        .collect();
    Ok(CorpusStats {
        total_documents: cells.iter().map(|c| c.documents).sum(),
        total_tokens: cells.iter().map(|c| c.tokens).sum(),
        cells,
    })
}

/// Maps document id to position; errors on duplicates.
pub fn index_by_id(docs: &[Document]) -> Result<HashMap<&str, usize>> {
    let mut map = HashMap::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if map.insert(d.id.as_str(), i).is_some() {
            return Err(Error::invalid(format!("duplicate document id {:?}", d.id)));
        }
    }
    Ok(map)
}
